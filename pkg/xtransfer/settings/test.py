"""
Test settings for XTransferCDR project.
"""
from .base import *

DEBUG = False

# Keep test output readable; failures still surface through assertions
LOGGING['loggers']['apps']['level'] = 'WARNING'
