"""
utils_metrics.py - metrics rows, the CSV sink and the optional Kafka stream.

CSV layout: `step,samples,<metric columns...>` with a header fixed per
experiment kind. Floats are written with repr so two identical runs
produce byte-identical files. Empty cells mean "not measured this row".
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import csv
import pathlib
from dataclasses import dataclass, field
from typing import Any, Sequence

# Import external packages
import pandas as pd

# Import functions from local modules
from utils.utils_config import get_metrics_topic, raise_config_error
from utils.utils_logger import logger
from utils.utils_producer import check_kafka_service_is_ready, create_kafka_producer, ensure_kafka_topic

#####################################
# Default Configurations
#####################################

INDEX_COLUMNS = ("step", "samples")

#####################################
# Rows
#####################################


@dataclass
class MetricsRow:
    step: int
    samples: int
    values: dict[str, float] = field(default_factory=dict)

    def as_record(self) -> dict[str, Any]:
        record: dict[str, Any] = {"step": self.step, "samples": self.samples}
        record.update({k: float(v) for k, v in self.values.items()})
        return record


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (int,)) and not isinstance(value, bool):
        return str(value)
    return repr(float(value))


#####################################
# CSV Sink
#####################################


class CsvMetricsSink:
    """Append-only metrics file; steps must strictly increase."""

    def __init__(self, path: pathlib.Path, columns: Sequence[str], append: bool = False):
        self.path = pathlib.Path(path)
        self.columns = list(INDEX_COLUMNS) + [c for c in columns if c not in INDEX_COLUMNS]
        self.last_step: int | None = None
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if append and self.path.exists():
            self._file = self.path.open("a", newline="", encoding="utf-8")
            self.last_step = last_logged_step(self.path)
        else:
            self._file = self.path.open("w", newline="", encoding="utf-8")
            csv.writer(self._file, lineterminator="\n").writerow(self.columns)
            self._file.flush()
        self._writer = csv.writer(self._file, lineterminator="\n")

    def write(self, row: MetricsRow) -> None:
        if self.last_step is not None and row.step <= self.last_step:
            raise_config_error(f"metrics step {row.step} does not follow {self.last_step}")
        unknown = set(row.values) - set(self.columns)
        if unknown:
            raise_config_error(f"metrics {sorted(unknown)} are not columns of {self.path.name}")
        record = row.as_record()
        self._writer.writerow([_cell(record.get(col)) for col in self.columns])
        self._file.flush()
        self.last_step = row.step

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()


def last_logged_step(path: pathlib.Path) -> int | None:
    with pathlib.Path(path).open("r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if len(lines) < 2:
        return None
    return int(lines[-1].split(",", 1)[0])


def truncate_metrics(path: pathlib.Path, last_step: int) -> int:
    """Drop rows logged after last_step (a resumed run rewrites them). Returns rows dropped."""
    path = pathlib.Path(path)
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    kept = lines[:1] + [line for line in lines[1:] if int(line.split(",", 1)[0]) <= last_step]
    dropped = len(lines) - len(kept)
    if dropped:
        logger.warning(f"Resuming: dropped {dropped} metrics rows after step {last_step}")
        path.write_text("".join(kept), encoding="utf-8")
    return dropped


def load_metrics(path: pathlib.Path) -> pd.DataFrame:
    return pd.read_csv(path)


def summarize_metrics(path: pathlib.Path) -> pd.DataFrame:
    """First/last/min/max of every metric column."""
    frame = load_metrics(path)
    metrics = frame.drop(columns=[c for c in INDEX_COLUMNS if c in frame.columns])
    return pd.DataFrame(
        {
            "first": metrics.apply(lambda s: s.dropna().iloc[0] if s.notna().any() else float("nan")),
            "last": metrics.apply(lambda s: s.dropna().iloc[-1] if s.notna().any() else float("nan")),
            "min": metrics.min(),
            "max": metrics.max(),
        }
    )


#####################################
# Kafka Stream
#####################################


class KafkaMetricsStream:
    """Best-effort live copy of each row as JSON on a Kafka topic."""

    def __init__(self, topic: str, run_name: str, producer: Any):
        self.topic = topic
        self.run_name = run_name
        self.producer = producer

    def send(self, row: MetricsRow) -> None:
        if self.producer is None:
            return
        record = row.as_record()
        record["run"] = self.run_name
        try:
            self.producer.send(self.topic, value=record)
        except Exception as e:
            logger.warning(f"Disabling metrics stream after send failure: {e}")
            self.producer = None

    def close(self) -> None:
        if self.producer is not None:
            try:
                self.producer.flush()
                self.producer.close()
            except Exception as e:
                logger.warning(f"Error closing metrics stream: {e}")
            self.producer = None


def open_metrics_stream(run_name: str) -> KafkaMetricsStream | None:
    """Stream rows when DNI_METRICS_TOPIC is set and the broker answers."""
    topic = get_metrics_topic()
    if topic is None:
        return None
    if not check_kafka_service_is_ready() or not ensure_kafka_topic(topic):
        logger.warning("Metrics streaming disabled; writing CSV only.")
        return None
    producer = create_kafka_producer()
    if producer is None:
        return None
    return KafkaMetricsStream(topic=topic, run_name=run_name, producer=producer)


#####################################
# Recorder
#####################################


class MetricsRecorder:
    """CSV sink plus optional stream, used as a context manager by runs."""

    def __init__(self, sink: CsvMetricsSink, stream: KafkaMetricsStream | None = None):
        self.sink = sink
        self.stream = stream

    def record(self, row: MetricsRow) -> None:
        self.sink.write(row)
        if self.stream is not None:
            self.stream.send(row)
        logger.debug(f"step {row.step}: {row.values}")

    def close(self) -> None:
        self.sink.close()
        if self.stream is not None:
            self.stream.close()

    def __enter__(self) -> "MetricsRecorder":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
