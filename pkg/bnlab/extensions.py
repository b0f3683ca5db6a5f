"""
Process-wide shared instances - single place for the logging setup.
"""
import logging

from bnlab.config import LOG_LEVEL

LOG_FORMAT = "[%(levelname)s] %(message)s"

logger = logging.getLogger("bnlab")


def configure_logging(level=None):
    """Attach the bracketed-tag handler once; later calls only change the level."""
    level = (level or LOG_LEVEL).upper()
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(handler)
    logger.setLevel(level)
    return logger
