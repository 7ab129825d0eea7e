"""
Synthetic data app configuration for XTransferCDR.
"""
from django.apps import AppConfig


class SynthAppConfig(AppConfig):
    """Configuration for the synth app."""

    name = 'apps.synth'
    verbose_name = 'Synthetic Data'
