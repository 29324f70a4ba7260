"""
Logger Setup Script
File: utils/utils_logger.py

Shared loguru logger for the training engine.

Features:
- Logs training progress, checkpoints and failures to a rotating log file.
- Mirrors everything to stderr so long runs can be watched from the terminal.
- Sanitizes messages so logs can be shared (no user names or home paths).
"""

#####################################
# Import Modules
#####################################

# Imports from Python Standard Library
import getpass
import os
import pathlib
import sys
from typing import Any, Mapping

# Imports from external packages
from loguru import logger

#####################################
# Default Configurations
#####################################

DEFAULT_LOG_FOLDER = "logs"
DEFAULT_LOG_LEVEL = "INFO"
LOG_FILE_NAME = "dni_log.log"

#####################################
# Helper Functions
#####################################


def sanitize_message(record: Mapping[str, Any]) -> str:
    """Remove personal/identifying information from log messages and escape braces."""
    message = record["message"]

    try:
        message = message.replace(getpass.getuser(), "USER")
    except Exception:
        pass

    try:
        message = message.replace(str(pathlib.Path.home()), "~")
    except Exception:
        pass

    try:
        message = message.replace(str(pathlib.Path.cwd()), "PROJECT_ROOT")
    except Exception:
        pass

    message = message.replace("\\", "/")

    # Loguru treats braces in the returned format string as fields
    return message.replace("{", "{{").replace("}", "}}")


def format_sanitized(record: Mapping[str, Any]) -> str:
    """Formatter that sanitizes messages and prefixes time, level and module."""
    message = sanitize_message(record)
    time_str = record["time"].strftime("%Y-%m-%d %H:%M:%S")
    level_name = record["level"].name
    module = record["name"]
    return f"{time_str} | {level_name} | {module} | {message}\n"


def get_log_folder() -> pathlib.Path:
    """Fetch the log folder from environment or use default."""
    return pathlib.Path(os.getenv("DNI_LOG_DIR", DEFAULT_LOG_FOLDER))


def get_log_level() -> str:
    """Fetch the log level from environment or use default."""
    return os.getenv("DNI_LOG_LEVEL", DEFAULT_LOG_LEVEL).upper()


def configure_logger(
    log_folder: pathlib.Path | None = None, level: str | None = None
) -> pathlib.Path:
    """
    (Re)configure the shared logger sinks.

    Args:
        log_folder (Path, optional): Folder for the rotating log file.
        level (str, optional): Minimum level for both sinks.

    Returns:
        Path: The log file in use.
    """
    folder = log_folder or get_log_folder()
    level = level or get_log_level()
    log_file = folder.joinpath(LOG_FILE_NAME)

    logger.remove()
    try:
        folder.mkdir(parents=True, exist_ok=True)
        logger.add(
            log_file,
            level=level,
            rotation="1 MB",
            retention=3,
            compression=None,
            enqueue=True,
            format=format_sanitized,
        )
    except Exception as e:
        print(f"Error configuring log file {log_file}: {e}", file=sys.stderr)
    logger.add(sys.stderr, level=level, enqueue=True, format=format_sanitized)
    return log_file


LOG_FILE: pathlib.Path = configure_logger()