"""
Neural-network core app configuration for XTransferCDR.
"""
from django.apps import AppConfig


class NnConfig(AppConfig):
    """Configuration for the nn app."""

    name = 'apps.nn'
    verbose_name = 'Network Core'
