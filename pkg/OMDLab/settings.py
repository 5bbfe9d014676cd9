"""
Django settings for OMDLab project.

The project hosts the optimal-model-design toolkit as a set of Django apps
(one per numerical component) plus the experiment harness. Nothing here serves
HTTP; Django supplies settings, logging, management commands and the test
runner, and Celery supplies the job queue for sweeps.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/4.2/ref/settings/
"""

from pathlib import Path
import os

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.environ.get('OMD_SECRET_KEY', 'django-insecure-omdlab-local-experiments-only')

DEBUG = os.environ.get('OMD_DEBUG', '0') == '1'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',
    'rest_framework',
    'mdp_core',
    'autodiff',
    'tabular_omd',
    'analysis',
    'envs',
    'funcapprox',
    'harness',
]

MIDDLEWARE = []

ROOT_URLCONF = None


# Database
# https://docs.djangoproject.com/en/4.2/ref/settings/#databases
# The harness keeps its records in files; the database is never touched.

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


# Numerical defaults shared by the apps

OMD_FIXED_POINT_TOL = 1e-10
OMD_FIXED_POINT_MAX_ITER = 100000

# Dense Jacobians are only materialised up to this many state-action pairs.
OMD_DENSE_JACOBIAN_LIMIT = 64

# The converged-fixed-point check the implicit gradient relies on.
OMD_IFT_RESIDUAL_TOL = 1e-8

OMD_ROOT_SOLVE = {
    'USE_IDENTITY_INVERSE': True,
    'CG_TOL': 1e-10,
    'CG_MAX_ITER': 1000,
}

OMD_OUTPUT_ROOT = Path(os.environ.get('OMD_OUTPUT_ROOT', BASE_DIR / 'results'))
OMD_CONFIG_ROOT = BASE_DIR / 'configs'
OMD_CODE_VERSION = os.environ.get('OMD_CODE_VERSION', 'omdlab-1.0.0')
OMD_WORKERS = int(os.environ.get('OMD_WORKERS', '1'))


# Celery Config
# Eager by default: jobs run in-process (or on a local billiard pool).
# Point OMD_BROKER_URL at a broker and set OMD_CELERY_EAGER=0 to fan out.
CELERY_BROKER_URL = os.environ.get('OMD_BROKER_URL', 'memory://')
CELERY_RESULT_BACKEND = os.environ.get('OMD_RESULT_BACKEND', 'cache+memory://')
CELERY_TASK_ALWAYS_EAGER = os.environ.get('OMD_CELERY_EAGER', '1') == '1'
CELERY_TASK_EAGER_PROPAGATES = True
CELERY_ACCEPT_CONTENT = ['json']
CELERY_TASK_SERIALIZER = 'json'
CELERY_RESULT_SERIALIZER = 'json'
CELERY_TIMEZONE = 'UTC'


LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '%(asctime)s %(levelname)s %(name)s [%(process)d] %(message)s',
        },
        'simple': {
            'format': '%(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'file': {
            'level': 'DEBUG',
            'class': 'logging.handlers.RotatingFileHandler',
            'filename': os.environ.get('OMD_LOG_FILE', str(BASE_DIR / 'omdlab.log')),
            'maxBytes': 1024 * 1024 * 5,  # 5 MB
            'backupCount': 5,
            'formatter': 'verbose',
        },
        'console': {
            'level': os.environ.get('OMD_CONSOLE_LOG_LEVEL', 'INFO'),
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
    },
    'loggers': {
        'django': {
            'handlers': ['file'],
            'level': 'INFO',
            'propagate': True,
        },
        'celery': {
            'handlers': ['file', 'console'],
            'level': 'INFO',
            'propagate': False,
        },
        'mdp_core': {
            'handlers': ['file'],
            'level': 'DEBUG',
            'propagate': False,
        },
        'autodiff': {
            'handlers': ['file'],
            'level': 'DEBUG',
            'propagate': False,
        },
        'tabular_omd': {
            'handlers': ['file', 'console'],
            'level': 'DEBUG',
            'propagate': False,
        },
        'analysis': {
            'handlers': ['file', 'console'],
            'level': 'DEBUG',
            'propagate': False,
        },
        'envs': {
            'handlers': ['file'],
            'level': 'DEBUG',
            'propagate': False,
        },
        'funcapprox': {
            'handlers': ['file', 'console'],
            'level': 'DEBUG',
            'propagate': False,
        },
        'harness': {
            'handlers': ['file', 'console'],
            'level': 'DEBUG',
            'propagate': False,
        },
    },
}
