# logging_config.py
import logging
import sys
from logging.handlers import RotatingFileHandler

from settings import LOG_FILE_PATH

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(console_level=None):
    """Configures a rotating file logger (and an optional console echo) for the entire toolkit."""
    logger = logging.getLogger()

    # Avoid adding handlers multiple times
    if logger.hasHandlers() and any(isinstance(h, RotatingFileHandler) for h in logger.handlers):
        if console_level is not None:
            for h in logger.handlers:
                if getattr(h, "_pcno_console", False):
                    h.setLevel(console_level)
        return

    logger.setLevel(logging.DEBUG)
    formatter = logging.Formatter(LOG_FORMAT)

    # 10MB per file, keep last 5 files
    handler = RotatingFileHandler(LOG_FILE_PATH, maxBytes=10*1024*1024, backupCount=5)
    handler.setLevel(logging.INFO)
    handler.setFormatter(formatter)
    logger.addHandler(handler)

    if console_level is not None:
        console = logging.StreamHandler(sys.stderr)
        console.setLevel(console_level)
        console.setFormatter(formatter)
        console._pcno_console = True
        logger.addHandler(console)
