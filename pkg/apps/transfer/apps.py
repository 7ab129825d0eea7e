"""
Transfer model app configuration for XTransferCDR.
"""
from django.apps import AppConfig


class TransferConfig(AppConfig):
    """Configuration for the transfer app."""

    name = 'apps.transfer'
    verbose_name = 'Cross-Transfer Model'
