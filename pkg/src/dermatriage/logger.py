"""
Logging for the dermatriage batch tools.

Two handlers share one format:
    - console (stderr, so report text on stdout stays clean), level from
      DERMATRIAGE_CONSOLE_LEVEL, DEBUG by default
    - rotating file dermatriage.log at WARNING, kept in the project 'logs'
      directory or in DERMATRIAGE_LOG_DIR

Every module imports `logger` from here; handlers are attached once per process.
"""

import logging
import os
from logging.handlers import RotatingFileHandler
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()  # Log settings may come from the .env file

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
LOG_DATE_FORMAT = "%Y-%m-%d %H:%M"
LOG_FILE_NAME = "dermatriage.log"
MAX_LOG_BYTES = 500_000  # 500 KB
LOG_BACKUPS = 2


def log_directory():
    """Folder for the rotating log file, created if missing."""
    default = Path(__file__).resolve().parent.parent / "logs"
    folder = Path(os.getenv("DERMATRIAGE_LOG_DIR") or default)
    folder.mkdir(parents=True, exist_ok=True)
    return folder


def configure_logger(name="dermatriage_logger"):
    """Return the named logger with console and file handlers attached exactly once."""
    configured = logging.getLogger(name)
    configured.setLevel(logging.DEBUG)
    # Own handlers only; nothing reaches the root logger
    configured.propagate = False
    if configured.handlers:
        return configured

    formatter = logging.Formatter(LOG_FORMAT, datefmt=LOG_DATE_FORMAT)

    console_handler = logging.StreamHandler()
    console_handler.setLevel(os.getenv("DERMATRIAGE_CONSOLE_LEVEL", "DEBUG").upper())
    console_handler.setFormatter(formatter)

    file_handler = RotatingFileHandler(
        log_directory() / LOG_FILE_NAME,
        mode="a",
        maxBytes=MAX_LOG_BYTES,
        backupCount=LOG_BACKUPS,
    )
    file_handler.setLevel(logging.WARNING)
    file_handler.setFormatter(formatter)

    configured.addHandler(console_handler)
    configured.addHandler(file_handler)
    return configured


logger = configure_logger()
