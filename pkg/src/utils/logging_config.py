"""
Logging Configuration Module

Structured logging setup with file rotation, run-context tagging and
module-specific loggers for the RotIR pipeline.
"""

import json
import logging
import logging.handlers
import sys
import time
import traceback
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterator, Optional

# Attributes every LogRecord carries; anything else is an extra field
_RESERVED = {
    'name', 'msg', 'args', 'levelname', 'levelno', 'pathname', 'filename', 'module',
    'lineno', 'funcName', 'created', 'msecs', 'relativeCreated', 'thread', 'threadName',
    'processName', 'process', 'getMessage', 'exc_info', 'exc_text', 'stack_info',
    'taskName', 'message',
}


class RunContextFilter(logging.Filter):
    """Stamp every record with the run identifier and subcommand."""

    def __init__(self, context: Optional[Dict[str, Any]] = None):
        super().__init__()
        self.context: Dict[str, Any] = dict(context or {})

    def filter(self, record):
        for key, value in self.context.items():
            if not hasattr(record, key):
                setattr(record, key, value)
        return True


class JSONFormatter(logging.Formatter):
    """JSON formatter for structured logging."""

    def __init__(self, include_extra: bool = True):
        super().__init__()
        self.include_extra = include_extra

    def format(self, record):
        """Format log record as JSON."""
        log_data = {
            'timestamp': datetime.fromtimestamp(record.created).isoformat(),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
            'module': record.module,
            'function': record.funcName,
            'line': record.lineno
        }

        if record.exc_info and record.exc_info[0]:
            log_data['exception'] = {
                'type': record.exc_info[0].__name__,
                'message': str(record.exc_info[1]),
                'traceback': traceback.format_exception(*record.exc_info)
            }

        if self.include_extra:
            for key, value in record.__dict__.items():
                if key not in _RESERVED:
                    log_data[f'extra_{key}'] = value

        return json.dumps(log_data, default=str, ensure_ascii=False)


class ApplicationLogger:
    """
    Application logging manager.

    Configures the root logger with a rotating JSON file under the run
    directory and an optional plain console stream on stderr, and shares a
    single RunContextFilter between them.
    """

    def __init__(
        self,
        app_name: str = "rotir",
        log_dir: Optional[Path] = None,
        log_level: str = "INFO",
        max_file_size: int = 10 * 1024 * 1024,  # 10MB
        backup_count: int = 5,
        enable_console: bool = True,
        enable_json: bool = True,
        context: Optional[Dict[str, Any]] = None
    ):
        """
        Initialize application logger.

        Args:
            app_name: Log file stem
            log_dir: Directory for log files (no file handler when None)
            log_level: Minimum log level to capture
            max_file_size: Maximum size of each log file in bytes
            backup_count: Number of backup log files to keep
            enable_console: Whether to log to stderr
            enable_json: Whether to use JSON formatting for file logs
            context: Initial run context (run_id, subcommand, ...)
        """
        self.app_name = app_name
        self.log_dir = Path(log_dir) if log_dir is not None else None
        self.log_level = getattr(logging, log_level.upper())
        self.max_file_size = max_file_size
        self.backup_count = backup_count
        self.enable_console = enable_console
        self.enable_json = enable_json
        self.context_filter = RunContextFilter(context)

        if self.log_dir is not None:
            self.log_dir.mkdir(parents=True, exist_ok=True)

        self._configure_root_logger()

    def _configure_root_logger(self) -> None:
        root_logger = logging.getLogger()
        root_logger.setLevel(self.log_level)
        for handler in list(root_logger.handlers):
            root_logger.removeHandler(handler)
            handler.close()

        if self.log_dir is not None:
            self._add_file_handler(root_logger)
        if self.enable_console:
            self._add_console_handler(root_logger)

        for handler in root_logger.handlers:
            handler.addFilter(self.context_filter)

    def _add_file_handler(self, logger: logging.Logger) -> None:
        log_file = self.log_dir / f"{self.app_name}.log"
        file_handler = logging.handlers.RotatingFileHandler(
            log_file,
            maxBytes=self.max_file_size,
            backupCount=self.backup_count,
            encoding='utf-8'
        )
        if self.enable_json:
            file_handler.setFormatter(JSONFormatter())
        else:
            file_handler.setFormatter(
                logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
            )
        logger.addHandler(file_handler)

    def _add_console_handler(self, logger: logging.Logger) -> None:
        # stdout carries command results; logs go to stderr
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setFormatter(
            logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
        )
        logger.addHandler(console_handler)

    def shutdown(self) -> None:
        """Flush and detach the handlers installed by this manager."""
        root_logger = logging.getLogger()
        for handler in list(root_logger.handlers):
            handler.flush()
            root_logger.removeHandler(handler)
            handler.close()


# Global logger instance
_app_logger: Optional[ApplicationLogger] = None


def setup_logging(
    log_dir: Optional[Path] = None,
    log_level: str = "INFO",
    enable_console: bool = True,
    enable_json: bool = True,
    context: Optional[Dict[str, Any]] = None
) -> ApplicationLogger:
    """
    Set up application logging.

    Args:
        log_dir: Directory for the rotating log file
        log_level: Minimum log level
        enable_console: Whether to log to stderr
        enable_json: Whether to use JSON formatting
        context: Run context stamped on every record

    Returns:
        Configured ApplicationLogger instance
    """
    global _app_logger

    if _app_logger is not None:
        _app_logger.shutdown()
    _app_logger = ApplicationLogger(
        log_dir=log_dir,
        log_level=log_level,
        enable_console=enable_console,
        enable_json=enable_json,
        context=context
    )
    return _app_logger


def get_logger(name: str) -> logging.Logger:
    """
    Get a logger for a module.

    Args:
        name: Logger name (typically __name__)

    Returns:
        Logger instance
    """
    return logging.getLogger(name)


def log_performance(func_name: str, execution_time: float, logger: logging.Logger,
                    **fields: Any) -> None:
    """
    Log a timing metric as a structured record.

    Args:
        func_name: Name of the timed stage
        execution_time: Execution time in seconds
        logger: Logger to use
        **fields: Additional structured fields (frames, epochs, ...)
    """
    logger.info(
        "Performance metric",
        extra={
            'metric_type': 'execution_time',
            'stage': func_name,
            'duration_seconds': execution_time,
            **fields
        }
    )


@contextmanager
def timed(stage: str, logger: logging.Logger, **fields: Any) -> Iterator[None]:
    """Time a block and report it with log_performance."""
    t0 = time.perf_counter()
    try:
        yield
    finally:
        log_performance(stage, time.perf_counter() - t0, logger, **fields)
