"""
metrics_consumer.py

Watch training metrics streamed to Kafka and raise alerts.

Each message is one metrics row as JSON, for example
{"run": "ff-mnist-seed0", "step": 200, "samples": 51200, "task_loss": 0.41, "sg_loss_1": 2.1e-05}

Alerts:
- divergence: a loss value is NaN/inf or above DIVERGENCE_LIMIT.
- stall: task loss has not improved by STALL_TOLERANCE over the last window of rows.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import math
import os
from collections import deque
from dataclasses import dataclass
from typing import Any

# Import functions from local modules
from utils.utils_config import get_metrics_topic, load_environment
from utils.utils_consumer import DEFAULT_CONSUMER_GROUP, create_kafka_consumer
from utils.utils_logger import logger

#####################################
# Default Configurations
#####################################

DEFAULT_WINDOW = 20
DIVERGENCE_LIMIT = 1e6
STALL_TOLERANCE = 1e-3
LOSS_KEYS = ("task_loss", "loss_a", "loss_b")

#####################################
# Getter Functions for .env Variables
#####################################


def get_consumer_group_id() -> str:
    group_id = os.getenv("DNI_CONSUMER_GROUP_ID", DEFAULT_CONSUMER_GROUP)
    logger.info(f"Kafka consumer group id: {group_id}")
    return group_id


def get_stall_window() -> int:
    return int(os.getenv("DNI_STALL_WINDOW", str(DEFAULT_WINDOW)))


#####################################
# Function to process a single message
#####################################


@dataclass
class Alert:
    kind: str
    run: str
    step: int
    detail: str


def process_message(message: dict[str, Any], window: deque) -> list[Alert]:
    """
    Check one metrics row; `window` keeps recent task losses for this run.

    Returns the alerts raised (possibly none). Bad messages are logged and skipped.
    """
    try:
        run = str(message.get("run", "unknown"))
        step = int(message["step"])
    except (KeyError, TypeError, ValueError):
        logger.error(f"Malformed metrics message: {message}")
        return []

    alerts = []
    for key in LOSS_KEYS:
        value = message.get(key)
        if value is None:
            continue
        value = float(value)
        if not math.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
            alerts.append(Alert("divergence", run, step, f"{key}={value}"))

    loss = message.get("task_loss", message.get("loss_a"))
    if loss is not None and math.isfinite(float(loss)):
        window.append(float(loss))
        if window.maxlen is not None and len(window) == window.maxlen:
            oldest, best_recent = window[0], min(list(window)[1:])
            if oldest - best_recent < STALL_TOLERANCE:
                alerts.append(Alert("stall", run, step, f"no improvement over {window.maxlen} rows"))

    for alert in alerts:
        logger.warning(f"[{alert.kind}] run {alert.run} step {alert.step}: {alert.detail}")
    return alerts


#####################################
# Define main function for this module
#####################################


def main() -> None:
    logger.info("START metrics consumer.")
    load_environment()
    topic = get_metrics_topic()
    if topic is None:
        logger.error("Set DNI_METRICS_TOPIC to the topic training runs stream to.")
        return
    consumer = create_kafka_consumer(topic, get_consumer_group_id())
    windows: dict[str, deque] = {}
    size = get_stall_window()

    logger.info(f"Polling metrics from topic '{topic}'...")
    try:
        while True:
            records = consumer.poll(timeout_ms=1000, max_records=100)
            for _tp, batch in records.items():
                for msg in batch:
                    row = msg.value
                    run = str(row.get("run", "unknown")) if isinstance(row, dict) else "unknown"
                    window = windows.setdefault(run, deque(maxlen=size))
                    process_message(row if isinstance(row, dict) else {}, window)
    except KeyboardInterrupt:
        logger.warning("Consumer interrupted by user.")
    except Exception as e:
        logger.error(f"Error while consuming metrics: {e}")
    finally:
        consumer.close()
        logger.info("Kafka consumer closed.")

    logger.info("END metrics consumer.")


#####################################
# Conditional Execution
#####################################

if __name__ == "__main__":
    main()
