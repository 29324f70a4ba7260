"""
utils_config.py - environment getters and dotenv-format config files.

Runtime settings (data root, metrics topic, Kafka broker) come from the
environment, loaded from a .env file when present. Experiment configs are
plain KEY=value files in the same format so they can be read with
python-dotenv and edited by hand.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import dataclasses
import os
import pathlib
import types
import typing
from typing import Any

# Import external packages
from dotenv import dotenv_values, load_dotenv, set_key

# Import functions from local modules
from utils.utils_logger import logger

#####################################
# Default Configurations
#####################################

DEFAULT_DATA_DIR = "data/mnist"
DEFAULT_KAFKA_BROKER_ADDRESS = "localhost:9092"

#####################################
# Errors
#####################################


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration."""


def raise_config_error(msg: str) -> None:
    logger.error(msg)
    raise ConfigError(msg)


#####################################
# Getter Functions for .env Variables
#####################################


def load_environment() -> None:
    """Load a .env file from the working directory if one exists."""
    load_dotenv()


def get_data_dir() -> pathlib.Path:
    """Fetch dataset root from environment or use default."""
    data_dir = pathlib.Path(os.getenv("DNI_DATA_DIR", DEFAULT_DATA_DIR))
    logger.info(f"Dataset root: {data_dir}")
    return data_dir


def get_metrics_topic() -> str | None:
    """Fetch the Kafka topic for live metrics; None disables streaming."""
    topic = os.getenv("DNI_METRICS_TOPIC", "").strip()
    if topic:
        logger.info(f"Metrics topic: {topic}")
    return topic or None


def get_kafka_broker_address() -> str:
    """Fetch Kafka broker address from environment or use default."""
    broker_address = os.getenv("KAFKA_BROKER_ADDRESS", DEFAULT_KAFKA_BROKER_ADDRESS)
    logger.info(f"Kafka broker address: {broker_address}")
    return broker_address


#####################################
# Dataclass <-> KEY=value
#####################################


def _coerce(raw: str, annotation: Any, key: str) -> Any:
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin in (typing.Union, types.UnionType):
        if raw in ("", "None", "none"):
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(raw, inner[0], key)
    try:
        if annotation is bool:
            lowered = raw.strip().lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
        if annotation is str:
            return raw
    except ValueError:
        raise_config_error(f"Config key {key}: cannot parse {raw!r} as {annotation}")
    raise_config_error(f"Config key {key}: unsupported type {annotation}")


def _format(value: Any) -> str:
    if value is None:
        return "None"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def flatten_dataclass(obj: Any, prefix: str = "") -> dict[str, str]:
    """Flatten nested dataclasses to {SECTION_FIELD: text}."""
    out: dict[str, str] = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}".upper()
        if dataclasses.is_dataclass(value):
            out.update(flatten_dataclass(value, prefix=f"{key}_"))
        else:
            out[key] = _format(value)
    return out


def build_dataclass(cls: type, values: dict[str, str], prefix: str = "") -> Any:
    """Rebuild a (nested) dataclass from flattened values; missing keys keep defaults."""
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = f"{prefix}{f.name}".upper()
        annotation = hints[f.name]
        if dataclasses.is_dataclass(annotation):
            kwargs[f.name] = build_dataclass(annotation, values, prefix=f"{key}_")
        elif key in values:
            kwargs[f.name] = _coerce(values[key], annotation, key)
    return cls(**kwargs)


def known_keys(cls: type, prefix: str = "") -> set[str]:
    hints = typing.get_type_hints(cls)
    keys: set[str] = set()
    for f in dataclasses.fields(cls):
        key = f"{prefix}{f.name}".upper()
        if dataclasses.is_dataclass(hints[f.name]):
            keys |= known_keys(hints[f.name], prefix=f"{key}_")
        else:
            keys.add(key)
    return keys


def save_config_file(obj: Any, path: pathlib.Path) -> pathlib.Path:
    """Write a dataclass as a KEY=value file (keys sorted)."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("")
    for key, value in sorted(flatten_dataclass(obj).items()):
        set_key(str(path), key, value, quote_mode="never")
    logger.debug(f"Wrote config file: {path}")
    return path


def load_config_file(cls: type, path: pathlib.Path) -> Any:
    """Read a KEY=value file into dataclass cls, rejecting unknown keys."""
    path = pathlib.Path(path)
    if not path.exists():
        raise_config_error(f"Config file not found: {path}")
    values = {k.upper(): (v if v is not None else "") for k, v in dotenv_values(path).items()}
    unknown = sorted(set(values) - known_keys(cls))
    if unknown:
        raise_config_error(f"Unknown config keys in {path}: {', '.join(unknown)}")
    logger.info(f"Loaded config file: {path}")
    return build_dataclass(cls, values)
