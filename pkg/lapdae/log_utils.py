"""
Console logging setup with coloured level names
"""

import logging
import os
from typing import Optional

from colorama import just_fix_windows_console
from dotenv import load_dotenv
from termcolor import colored

LEVEL_COLORS = {
    "DEBUG": "blue",
    "INFO": "green",
    "WARNING": "yellow",
    "ERROR": "red",
    "CRITICAL": "red",
}


class ColorFormatter(logging.Formatter):
    """Formatter that colours the level name by severity"""

    def format(self, record: logging.LogRecord) -> str:
        record = logging.makeLogRecord(record.__dict__)
        color = LEVEL_COLORS.get(record.levelname)
        if color:
            record.levelname = colored(f"{record.levelname:<7}", color, attrs=["bold"])
        return super().format(record)


def configure_logging(level: Optional[str] = None) -> logging.Logger:
    """
    Install a single coloured console handler on the package logger

    Args:
        level: Level name; falls back to LAPDAE_LOG_LEVEL (from .env) and then INFO

    Returns:
        The configured ``lapdae`` logger
    """
    just_fix_windows_console()
    load_dotenv()
    level = (level or os.environ.get("LAPDAE_LOG_LEVEL") or "INFO").upper()

    logger = logging.getLogger("lapdae")
    for handler in list(logger.handlers):
        if getattr(handler, "_lapdae_console", False):
            logger.removeHandler(handler)

    handler = logging.StreamHandler()
    handler._lapdae_console = True
    handler.setFormatter(ColorFormatter("%(asctime)s %(levelname)s %(name)s: %(message)s", "%H:%M:%S"))
    logger.addHandler(handler)
    logger.setLevel(level)
    logger.propagate = False
    return logger
