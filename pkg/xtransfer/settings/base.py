"""
Base Django settings for XTransferCDR project.
This file contains settings common to all environments.
"""
from pathlib import Path
import environ

# Build paths inside the project
BASE_DIR = Path(__file__).resolve().parent.parent.parent

# Environment variables
env = environ.Env(
    DEBUG=(bool, False),
    SECRET_KEY=(str, 'development-key-change-in-production'),
    LOG_LEVEL=(str, 'INFO'),
    LOG_FILE=(str, ''),
    XTRANSFER_OUTPUT_DIR=(str, 'runs'),
    XTRANSFER_FLOAT_FORMAT=(str, '%.9g'),
    XTRANSFER_CHECKPOINT_FORMAT_VERSION=(int, 1),
)

# Read .env file if it exists
env_file = BASE_DIR / '.env'
if env_file.exists():
    environ.Env.read_env(env_file)

SECRET_KEY = env('SECRET_KEY')

DEBUG = env('DEBUG')

ALLOWED_HOSTS = []

# Application definition
LOCAL_APPS = [
    'apps.core',
    'apps.nn',
    'apps.datasets',
    'apps.synth',
    'apps.transfer',
    'apps.evaluation',
]

INSTALLED_APPS = LOCAL_APPS

# The engine keeps no relational state; runs live on disk
DATABASES = {}

# Internationalization
LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

# XTransferCDR engine settings
XTRANSFER = {
    'OUTPUT_DIR': BASE_DIR / env('XTRANSFER_OUTPUT_DIR'),
    # %.9g round-trips every float32 through text
    'FLOAT_FORMAT': env('XTRANSFER_FLOAT_FORMAT'),
    'CHECKPOINT_FORMAT_VERSION': env('XTRANSFER_CHECKPOINT_FORMAT_VERSION'),
    'CONTROL_LABEL': 'control',
    'COMBO_SEPARATOR': '+',
}

# Logging
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {message}',
            'style': '{',
        },
        'simple': {
            'format': '{levelname} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'level': 'DEBUG',
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
    },
    'loggers': {
        'django': {
            'handlers': ['console'],
            'level': 'WARNING',
            'propagate': True,
        },
        'apps': {
            'handlers': ['console'],
            'level': env('LOG_LEVEL'),
            'propagate': False,
        },
    },
}

if env('LOG_FILE'):
    LOGGING['handlers']['file'] = {
        'level': 'INFO',
        'class': 'logging.FileHandler',
        'filename': env('LOG_FILE'),
        'formatter': 'verbose',
    }
    LOGGING['loggers']['apps']['handlers'].append('file')
