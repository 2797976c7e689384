"""
Django settings for the agentdice toolkit.

The project has no web surface: Django provides the settings layer, the
management-command CLI (``manage.py merge|simulate|partition|compare|zscore|
validate``), DRF serializers for config validation and reports, and the test
runner.

Every knob below can be overridden from the environment or a ``.env`` file at
the project root (see ``.env.example``).
"""
import os
from pathlib import Path

from dotenv import load_dotenv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

load_dotenv(BASE_DIR / '.env')

# Nothing is signed or stored; Django still insists on a key.
SECRET_KEY = os.environ.get('SECRET_KEY', 'agentdice-local-only')

DEBUG = os.environ.get('DEBUG', 'False') == 'True'

ALLOWED_HOSTS = []

# Application definition

INSTALLED_APPS = [
    # Third party apps
    'rest_framework',
    # Our apps
    'dice',
]

# No database: every command works on files.
DATABASES = {}

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True



# Django REST Framework Settings
REST_FRAMEWORK = {
    'DEFAULT_RENDERER_CLASSES': [
        'rest_framework.renderers.JSONRenderer',
    ],
    'COERCE_DECIMAL_TO_STRING': False,
}


# ============================================
# AGENTDICE
# ============================================

def _int_or_auto(value):
    if value in (None, '', 'auto'):
        return os.cpu_count() or 1
    return max(1, int(value))


# Worker count for merge/simulate when --threads/--workers is absent
AGENTDICE_THREADS = _int_or_auto(os.environ.get('AGENTDICE_THREADS'))

# Elements fused per block inside one tensor; bounds peak memory only
AGENTDICE_CHUNK_ELEMENTS = int(os.environ.get('AGENTDICE_CHUNK_ELEMENTS', 4 * 1024 * 1024))

# 'passthrough' copies base tensors absent from some task; 'error' refuses
AGENTDICE_MISSING_TENSORS = os.environ.get('AGENTDICE_MISSING_TENSORS', 'passthrough')

# Parameter-histogram KL defaults for `compare`
AGENTDICE_HIST_BINS = int(os.environ.get('AGENTDICE_HIST_BINS', 256))
AGENTDICE_HIST_ALPHA = float(os.environ.get('AGENTDICE_HIST_ALPHA', 1e-8))

AGENTDICE_FIXTURE_DIR = BASE_DIR / 'dice' / 'fixtures'


# Logging (stderr; stdout is reserved for command output)
AGENTDICE_LOG_LEVEL = os.environ.get('AGENTDICE_LOG_LEVEL', 'INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'dice': {
            'handlers': ['console'],
            'level': AGENTDICE_LOG_LEVEL,
            'propagate': False,
        },
    },
}
