"""
Django settings for the nlos_track project.

The project is used through management commands (see cli/management/commands)
and the test runner; it does not serve HTTP.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.2/ref/settings/
"""

from pathlib import Path
import os
from dotenv import load_dotenv

load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.getenv('DJANGO_SECRET_KEY', 'django-insecure-nlos-track-local-only')

DEBUG = os.getenv('DJANGO_DEBUG', 'false').lower() in ('1', 'true', 'yes')

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    # Project apps
    'kernels',
    'scenarios',
    'srukf',
    'projection',
    'baselines',
    'harness',
    'cli',
]


# Database
# Only the run registry (harness.ExperimentRun) lives here.

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': os.getenv('DB_PATH', str(BASE_DIR / 'db.sqlite3')),
    }
}


# Logging

LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO').upper()

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': LOG_LEVEL,
    },
}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


# Default primary key field type

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Tests

TEST_RUNNER = 'core.test_runner.TrackingTestRunner'

RUN_ACCEPTANCE = os.getenv('RUN_ACCEPTANCE', '').lower() in ('1', 'true', 'yes')


# Tracking

# Overrides the --out option of the run command when set.
NLOS_TRACK_OUT = os.getenv('NLOS_TRACK_OUT') or None

TRACKING_WORKERS = int(os.getenv('TRACKING_WORKERS', '1'))

TRACKING_CODE_VERSION = '0.3.0'
