"""
Development settings for XTransferCDR project.
"""
from .base import *

DEBUG = True

LOGGING['loggers']['apps']['level'] = env('LOG_LEVEL', default='DEBUG')
