"""
utils_producer.py - Kafka producer helpers for live metrics streaming.

Training never depends on Kafka: every helper here logs and returns
None/False when the broker is unreachable so the caller can carry on
with CSV output only.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import json
from typing import Any, Callable, Optional

# Import external packages
from kafka import KafkaProducer, errors
from kafka.admin import KafkaAdminClient, NewTopic

# Import functions from local modules
from utils.utils_config import get_kafka_broker_address
from utils.utils_logger import logger

#####################################
# Kafka Readiness Check
#####################################


def check_kafka_service_is_ready() -> bool:
    """
    Check if Kafka is ready by connecting to the broker and fetching metadata.

    Returns:
        bool: True if Kafka is ready, False otherwise.
    """
    kafka_broker = get_kafka_broker_address()

    try:
        admin_client = KafkaAdminClient(bootstrap_servers=kafka_broker)
        cluster_info: dict = admin_client.describe_cluster()
        logger.info(f"Kafka is ready. Brokers: {cluster_info}")
        admin_client.close()
        return True
    except errors.KafkaError as e:
        logger.warning(f"Kafka not reachable at {kafka_broker}: {e}")
        return False


#####################################
# Kafka Producer and Topic Management
#####################################


def json_serializer(value: Any) -> bytes:
    return json.dumps(value, sort_keys=True).encode("utf-8")


def create_kafka_producer(
    value_serializer: Optional[Callable[[Any], bytes]] = None,
) -> Optional[KafkaProducer]:
    """
    Create and return a Kafka producer instance, or None if the broker is down.

    Args:
        value_serializer (callable): Serializer for message values.
                                     Defaults to JSON.
    """
    kafka_broker = get_kafka_broker_address()
    try:
        logger.info(f"Connecting to Kafka broker at {kafka_broker}...")
        producer = KafkaProducer(
            bootstrap_servers=kafka_broker,
            value_serializer=value_serializer or json_serializer,
        )
        logger.info("Kafka producer successfully created.")
        return producer
    except Exception as e:
        logger.warning(f"Failed to create Kafka producer: {e}")
        return None


def ensure_kafka_topic(topic_name: str) -> bool:
    """Create the topic if it does not exist yet. Existing topics are kept."""
    kafka_broker = get_kafka_broker_address()
    admin_client = None
    try:
        admin_client = KafkaAdminClient(bootstrap_servers=kafka_broker)
        if topic_name in set(admin_client.list_topics()):
            logger.info(f"Topic '{topic_name}' already exists.")
            return True
        admin_client.create_topics([NewTopic(name=topic_name, num_partitions=1, replication_factor=1)])
        logger.info(f"Topic '{topic_name}' created successfully.")
        return True
    except Exception as e:
        logger.warning(f"Could not ensure topic '{topic_name}': {e}")
        return False
    finally:
        if admin_client is not None:
            try:
                admin_client.close()
            except Exception:
                pass
