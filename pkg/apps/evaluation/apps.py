"""
Evaluation app configuration for XTransferCDR.
"""
from django.apps import AppConfig


class EvaluationConfig(AppConfig):
    """Configuration for the evaluation app."""

    name = 'apps.evaluation'
    verbose_name = 'Evaluation'
