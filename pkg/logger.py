"""
Structured logging module for the local-dependence bound toolkit.
Provides file and console logging with a verdict-specific file.
"""

import logging
from datetime import datetime
from typing import Optional
from pathlib import Path

from config import config


class VerdictFormatter(logging.Formatter):
    """Console formatter with level colors."""

    COLORS = {
        'DEBUG': '\033[36m',     # Cyan
        'INFO': '\033[32m',      # Green
        'WARNING': '\033[33m',   # Yellow
        'ERROR': '\033[31m',     # Red
        'CRITICAL': '\033[35m',  # Magenta
        'RESET': '\033[0m'
    }

    def __init__(self, fmt: Optional[str] = None, datefmt: Optional[str] = None, use_color: bool = True):
        super().__init__(fmt, datefmt)
        self.use_color = use_color

    def format(self, record):
        if not self.use_color:
            return super().format(record)
        # other handlers share the record
        colored = logging.makeLogRecord(record.__dict__)
        color = self.COLORS.get(record.levelname, self.COLORS['RESET'])
        colored.levelname = f"{color}{record.levelname}{self.COLORS['RESET']}"
        return super().format(colored)


def setup_logger(name: str = "stein_bounds", log_level: Optional[str] = None) -> logging.Logger:
    """
    Set up and return a configured logger.

    Args:
        name: Logger name
        log_level: Level name; defaults to config.log_level

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)

    # Avoid duplicate handlers
    if logger.handlers:
        return logger

    logger.setLevel(logging.DEBUG)

    logs_dir = Path(config.logs_dir)
    logs_dir.mkdir(parents=True, exist_ok=True)

    # File handler - all logs
    log_file = logs_dir / f"bounds_{datetime.now().strftime('%Y%m%d')}.log"
    file_handler = logging.FileHandler(log_file, encoding='utf-8')
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(logging.Formatter(
        '%(asctime)s | %(levelname)-8s | %(name)s | %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    ))

    # Console handler
    console_handler = logging.StreamHandler()
    console_handler.setLevel(getattr(logging, (log_level or config.log_level), logging.INFO))
    console_handler.setFormatter(VerdictFormatter(
        '%(asctime)s | %(levelname)-8s | %(message)s',
        datefmt='%H:%M:%S',
        use_color=console_handler.stream.isatty(),
    ))

    # Verdict-only file handler
    verdict_file = logs_dir / f"verdicts_{datetime.now().strftime('%Y%m%d')}.log"
    verdict_handler = logging.FileHandler(verdict_file, encoding='utf-8')
    verdict_handler.setLevel(logging.INFO)
    verdict_handler.addFilter(lambda record: hasattr(record, 'verdict'))
    verdict_handler.setFormatter(logging.Formatter(
        '%(asctime)s | %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    ))

    logger.addHandler(file_handler)
    logger.addHandler(console_handler)
    logger.addHandler(verdict_handler)

    return logger


# Global logger instance
logger = setup_logger()


def log_verdict(
    theorem: str,
    ks: float,
    bound: float,
    verdict: str,
    margin: Optional[float] = None,
):
    """Log a dominance verdict with structured format."""
    info = {
        'theorem': theorem,
        'ks': f"{ks:.6g}",
        'bound': f"{bound:.6g}",
        'verdict': verdict,
    }
    if margin is not None:
        info['margin'] = f"{margin:.6g}"

    message = " | ".join(f"{k}={v}" for k, v in info.items())

    record = logger.makeRecord(
        logger.name, logging.INFO, "", 0, f"VERDICT | {message}", None, None
    )
    record.verdict = True
    logger.handle(record)


def log_estimate(name: str, value: float, se: float, method: str, details: str = ""):
    """Log an estimated quantity."""
    logger.debug(f"ESTIMATE | {name} | value={value:.6g} | se={se:.3g} | method={method} | {details}")


def log_error(message: str, exc_info: bool = False):
    """Log error with optional traceback."""
    logger.error(message, exc_info=exc_info)


def log_info(message: str):
    """Log info message."""
    logger.info(message)


def log_debug(message: str):
    """Log debug message."""
    logger.debug(message)


def log_warning(message: str):
    """Log warning message."""
    logger.warning(message)
