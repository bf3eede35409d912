from pathlib import Path
import os

from dotenv import load_dotenv

# =========================
# BASE DIR
# =========================
BASE_DIR = Path(__file__).resolve().parent.parent

load_dotenv(BASE_DIR / ".env")

# =========================
# SECURITY
# =========================
# Nothing is served; Django still wants a key to boot.
SECRET_KEY = os.environ.get(
    "DJANGO_SECRET_KEY",
    "django-insecure-local-dev-key"
)

DEBUG = os.environ.get("DEBUG", "True") == "True"

ALLOWED_HOSTS = []

# =========================
# APPLICATIONS
# =========================
INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',

    # Third-party
    'rest_framework',

    # Local
    'policy',
]

MIDDLEWARE = []

# =========================
# DATABASE
# =========================
# The lab keeps its artifacts on disk; the sqlite file is only created if
# something asks for it.
DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}

# =========================
# LANGUAGE & TIMEZONE
# =========================
LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# =========================
# REPRODUCIBILITY
# =========================
# When set, overrides every --seed flag.
DITA_DESK_SEED = os.environ.get("DITA_DESK_SEED")

# Torch threads for training and parallel episodes for evaluation. Bitwise
# determinism is only guaranteed at 1.
DITA_DESK_WORKERS = int(os.environ.get("DITA_DESK_WORKERS", "1"))

# =========================
# SIMULATOR
# =========================
IMAGE_SIZE = int(os.environ.get("IMAGE_SIZE", "64"))
STEP_LIMIT = int(os.environ.get("STEP_LIMIT", "120"))

CAMERA_POOL_SIZE = int(os.environ.get("CAMERA_POOL_SIZE", "1024"))
CAMERA_POOL_SEED = int(os.environ.get("CAMERA_POOL_SEED", "20250301"))
# Every n-th pool camera is held out for evaluation (19:1 split at 20).
CAMERA_TEST_EVERY = int(os.environ.get("CAMERA_TEST_EVERY", "20"))

# =========================
# LOGGING
# =========================
DITA_DESK_LOG_LEVEL = os.environ.get("DITA_DESK_LOG_LEVEL", "INFO")

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
        'policy': {
            'handlers': ['console'],
            'level': DITA_DESK_LOG_LEVEL,
            'propagate': False,
        },
    },
}
