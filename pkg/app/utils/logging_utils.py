"""
Utility module for logging configuration with explicit date handling.
"""
import logging
import os
from logging.handlers import RotatingFileHandler
from datetime import datetime
from typing import Optional

from app.config import config


def setup_logging(log_file: Optional[str] = None, log_level: str = "INFO",
                  app_name: Optional[str] = None) -> logging.Logger:
    """Set up logging configuration with a dated rotating log file.

    Args:
        log_file: Path to the log file, if None, a default path will be used
        log_level: Logging level
        app_name: Application name prefix for the log file

    Returns:
        The configured root logger
    """
    logs_dir = str(config.LOG_DIR)
    today = datetime.now().strftime("%Y%m%d")

    if app_name is None:
        app_name = "qtree"

    if log_file is None:
        log_file = os.path.join(logs_dir, f"{app_name}_{today}.log")

    level = getattr(logging, log_level.upper(), logging.INFO)

    # Configure root logger
    root_logger = logging.getLogger()
    root_logger.setLevel(level)

    # Clear existing handlers to avoid duplicates
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)

    formatter = logging.Formatter(config.LOG_FORMAT)

    # Console handler goes to stderr so stdout stays machine-readable
    console_handler = logging.StreamHandler()
    console_handler.setLevel(level)
    console_handler.setFormatter(formatter)
    root_logger.addHandler(console_handler)

    try:
        os.makedirs(os.path.dirname(log_file) or ".", exist_ok=True)
        file_handler = RotatingFileHandler(
            log_file,
            maxBytes=10 * 1024 * 1024,  # 10 MB
            backupCount=5,
            delay=True
        )
        file_handler.setLevel(level)
        file_handler.setFormatter(formatter)
        root_logger.addHandler(file_handler)
        root_logger.debug(f"Logging to file: {log_file}")
    except OSError as e:
        # If we can't set up file logging, continue with console logging only
        root_logger.warning(f"Failed to set up file logging: {e}")
        root_logger.warning("Continuing with console logging only")

    return root_logger
