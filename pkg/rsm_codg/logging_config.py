"""
Logging configuration module for rsm_codg.

``setup_logging`` installs the process-wide handlers: a console handler on
stdout and an optional rotating log file. ``fold_logging`` routes everything
one LOSO fold logs into that fold's own file, tagging each record with the
held-out subject, so folds trained in parallel worker processes keep
separate logs.
"""

import logging
import logging.config
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, Optional

PACKAGE_LOGGER = "rsm_codg"
DEFAULT_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
FOLD_FORMAT = "%(asctime)s - fold %(fold)s - %(name)s - %(levelname)s - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def _level_name(level: str) -> str:
    level = str(level).upper()
    return level if isinstance(getattr(logging, level, None), int) else "INFO"


def setup_logging(
    level: str = "INFO",
    log_format: Optional[str] = None,
    log_file: Optional[str] = None
) -> None:
    """
    Set up logging configuration for the application.

    Args:
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL); unknown
            names fall back to INFO
        log_format: Custom log format string
        log_file: Optional file path for log output
    """
    level = _level_name(level)
    handlers: Dict[str, Any] = {
        'console': {
            'class': 'logging.StreamHandler',
            'level': level,
            'formatter': 'standard',
            'stream': 'ext://sys.stdout'
        }
    }
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers['file'] = {
            'class': 'logging.handlers.RotatingFileHandler',
            'level': level,
            'formatter': 'standard',
            'filename': str(log_file),
            'maxBytes': 10485760,  # 10MB
            'backupCount': 5,
            'encoding': 'utf-8'
        }

    logging.config.dictConfig({
        'version': 1,
        'disable_existing_loggers': False,
        'formatters': {
            'standard': {'format': log_format or DEFAULT_FORMAT, 'datefmt': DATE_FORMAT}
        },
        'handlers': handlers,
        'loggers': {
            PACKAGE_LOGGER: {'level': level, 'handlers': list(handlers), 'propagate': False}
        },
        'root': {'level': 'WARNING', 'handlers': list(handlers)}
    })


class FoldFilter(logging.Filter):
    """Stamps every record passing through with the fold's held-out subject."""

    def __init__(self, fold: int):
        super().__init__()
        self.fold = fold

    def filter(self, record: logging.LogRecord) -> bool:
        record.fold = self.fold
        return True


@contextmanager
def fold_logging(path: Path, fold: int, level: str = "INFO") -> Iterator[logging.Handler]:
    """
    Copy package log records into ``path`` while one fold trains.

    A worker process that never ran ``setup_logging`` has an unset package
    level; it is raised to ``level`` for the duration so INFO records reach
    the fold file, then restored.

    Args:
        path: Log file of the fold, truncated on entry
        fold: Held-out subject written into every line
        level: Minimum level written to the file

    Yields:
        The installed file handler
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    package = logging.getLogger(PACKAGE_LOGGER)
    handler = logging.FileHandler(path, mode="w", encoding="utf-8")
    handler.setLevel(_level_name(level))
    handler.setFormatter(logging.Formatter(FOLD_FORMAT, DATE_FORMAT))
    handler.addFilter(FoldFilter(fold))
    previous_level = package.level
    if previous_level == logging.NOTSET:
        package.setLevel(handler.level)
    package.addHandler(handler)
    try:
        yield handler
    finally:
        package.removeHandler(handler)
        package.setLevel(previous_level)
        handler.close()
