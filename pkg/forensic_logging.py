#!/usr/bin/env python3
"""
Logging setup shared by the investigation tools

Console logs go to standard error so reports on standard output stay
byte-identical between runs. The investigation audit trail is a plain
append-only text file.
"""

import logging
import sys
from datetime import datetime

import structlog

TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"
MESSAGE_LEVELS = {
    "info": "info",
    "success": "info",
    "warning": "warning",
    "error": "error",
}

logger = structlog.get_logger(__name__)


def level_for(verbosity: int) -> int:
    """Logging level for a -v count"""
    if verbosity <= 0:
        return logging.WARNING
    if verbosity == 1:
        return logging.INFO
    return logging.DEBUG


def configure_logging(verbosity: int = 0, stream=None):
    """Console renderer without colours, filtered by -v count"""
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt=TIMESTAMP_FORMAT),
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(level_for(verbosity)),
        logger_factory=structlog.PrintLoggerFactory(file=stream or sys.stderr),
        cache_logger_on_first_use=False,
    )


def log_message(message: str, msg_type: str = "info", **context):
    """Status line in one of the info/success/warning/error kinds"""
    method = MESSAGE_LEVELS.get(msg_type, "info")
    getattr(logger, method)(message, kind=msg_type, **context)


def write_audit_log(path, command: str, target: str, exit_code: int, **details) -> bool:
    """Append one investigation entry; failures are logged, never raised"""
    try:
        timestamp = datetime.now().strftime(TIMESTAMP_FORMAT)
        entry = f"[{timestamp}] | Command: {command} | Target: {target} | Exit: {exit_code}"
        for key, value in details.items():
            entry += f" | {key.replace('_', ' ').title()}: {value}"
        entry += "\n"

        with open(path, "a", encoding="utf-8") as audit_file:
            audit_file.write(entry)
        return True
    except OSError as e:
        log_message(f"Error writing to audit log: {e}", "error", path=str(path))
        return False
