"""
Environment-backed settings for the PCNO toolkit.
Centralizes every value read from the process environment (or a .env file) so
the CLI and the library agree on defaults.
"""

import logging
import os
from dotenv import load_dotenv

load_dotenv()

# --- Environment variables ---
LOG_FILE_PATH = os.environ.get("LOG_FILE_PATH", "/tmp/pcno_toolkit.log")
LOG_LEVEL = os.environ.get("PCNO_LOG_LEVEL", "INFO").upper()
DEFAULT_DTYPE = os.environ.get("PCNO_DEFAULT_DTYPE", "real64")
RUN_SLOW_TESTS = os.environ.get("PCNO_RUN_SLOW", "0") == "1"


def _env_int(name, default):
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return default
    try:
        value = int(raw)
    except ValueError:
        logging.warning(f"Ignoring non-integer {name}={raw!r}; using {default}")
        return default
    return max(1, value)


def _env_flag(name, default=False):
    raw = os.environ.get(name)
    if raw is None:
        return default
    return raw.strip().lower() in ("1", "true", "yes", "on")


# Default worker count for per-sample generation/preprocessing pools
THREADS = _env_int("PCNO_THREADS", 1)

# Reject non-finite primitive inputs on the differentiation tape
STRICT_FINITE = _env_flag("PCNO_STRICT_FINITE", False)
