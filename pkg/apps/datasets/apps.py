"""
Datasets app configuration for XTransferCDR.
"""
from django.apps import AppConfig


class DatasetsConfig(AppConfig):
    """Configuration for the datasets app."""

    name = 'apps.datasets'
    verbose_name = 'Datasets'
