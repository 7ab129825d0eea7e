"""
Core app configuration for XTransferCDR.
"""
from django.apps import AppConfig


class CoreConfig(AppConfig):
    """Configuration for the core app."""

    name = 'apps.core'
    verbose_name = 'Core'
