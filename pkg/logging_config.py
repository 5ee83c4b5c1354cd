"""Logging configuration for the ADNet lab"""
import sys
import logging
from pathlib import Path
from typing import Optional


def setup_logging(log_level: str = "INFO", log_file: Optional[str] = None) -> logging.Logger:
    """
    Configure the root logger once per process

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_file: Optional path to log file, default logs/adnet_lab.log

    Returns:
        Configured root logger
    """
    log_path = Path(log_file) if log_file else Path("logs/adnet_lab.log")
    try:
        log_path.parent.mkdir(parents=True, exist_ok=True)
    except OSError:
        # the FileHandler below reports the problem
        pass

    logger = logging.getLogger()
    logger.setLevel(getattr(logging, log_level.upper()))
    for handler in logger.handlers[:]:
        logger.removeHandler(handler)

    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(filename)s:%(lineno)d - %(message)s'
    )

    stream_handler = logging.StreamHandler(sys.stdout)
    stream_handler.setFormatter(formatter)
    try:
        file_handler = logging.FileHandler(log_path)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)
    except OSError as e:
        logger.addHandler(stream_handler)
        logger.warning(f"Cannot write log file '{log_path}': {e}. Falling back to stdout.")
        return logger
    logger.addHandler(stream_handler)

    logger.info(f"Logging initialized (level: {log_level}, file: {log_path})")
    return logger
