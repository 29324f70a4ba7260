"""
ff_pipeline.py - optional parallel mode for decoupled feed-forward training.

Each segment of a decoupled network runs on its own worker thread.
Workers exchange immutable messages through ordered queues: activations
travel up, SG regression targets travel down. A worker updates its layers
as soon as its synthetic gradient is available and trains the SG model at
its top interface whenever the worker above returns the matching target.

Interleaving depends on thread timing, so runs are not bit-reproducible;
the deterministic trainers in ff_dni.py are the reference.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable

# Import external packages
import numpy as np

# Import functions from local modules
from networks.layers import softmax_xent
from networks.synthetic_models import sg_predict, sg_update
from trainers.ff_dni import FfNetwork, segments_for
from utils.utils_config import raise_config_error
from utils.utils_logger import logger
from utils.utils_numerics import detach

#####################################
# Default Configurations
#####################################

QUEUE_TIMEOUT_SECONDS = 60.0
POLL_SECONDS = 0.05

#####################################
# Messages
#####################################


@dataclass(frozen=True)
class ActivationMessage:
    step: int
    h: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class TargetMessage:
    step: int
    gradient: np.ndarray


#####################################
# Workers
#####################################


class SegmentWorker(threading.Thread):
    """Owns one segment's layers and the SG model on its top interface."""

    def __init__(
        self,
        net: FfNetwork,
        layers: list[int],
        inbox: queue.Queue,
        outbox: queue.Queue | None,
        targets_in: queue.Queue | None,
        targets_out: queue.Queue | None,
        stop: threading.Event | None = None,
    ):
        super().__init__(name=f"segment-{layers[0]}-{layers[-1]}", daemon=True)
        self.net = net
        self.layers = layers
        self.top = layers[-1] if layers[-1] < net.n_layers else None
        self.inbox = inbox
        self.outbox = outbox
        self.targets_in = targets_in
        self.targets_out = targets_out
        self.stop = stop if stop is not None else threading.Event()
        self.losses: list[tuple[int, float]] = []
        self.sg_losses: list[tuple[int, float]] = []
        self.error: BaseException | None = None
        self._pending: dict[int, tuple[np.ndarray, np.ndarray | None]] = {}

    def run(self) -> None:
        try:
            self._loop()
        except BaseException as e:
            self.error = e
            self.stop.set()
            logger.error(f"Worker {self.name} failed: {e}")
            if self.outbox is not None:
                self.outbox.put(None)

    def _loop(self) -> None:
        while True:
            msg = self.inbox.get()
            if msg is None:
                break
            if self.stop.is_set():
                continue
            cond = msg.labels if self.net.conditional else None
            h = msg.h
            caches = []
            for layer in self.layers:
                h, cache = self.net.blocks[layer - 1].forward(h)
                caches.append(cache)
            if self.top is None:
                loss, g = softmax_xent(h, msg.labels)
                self.losses.append((msg.step, loss))
            else:
                self.outbox.put(ActivationMessage(step=msg.step, h=detach(h), labels=msg.labels))
                g = sg_predict(self.net.sg_models[self.top], h, cond)
                self._pending[msg.step] = (h, cond)
            for layer, cache in zip(reversed(self.layers), reversed(caches)):
                g, grads = self.net.blocks[layer - 1].backward(cache, g)
                self.net.blocks[layer - 1].apply_gradients(grads)
            if self.targets_out is not None:
                self.targets_out.put(TargetMessage(step=msg.step, gradient=detach(g)))
            self._drain(block=False)
        if self.outbox is not None:
            self.outbox.put(None)
        if not self.stop.is_set():
            self._drain(block=True)

    def _drain(self, block: bool) -> None:
        if self.targets_in is None:
            return
        deadline = time.monotonic() + QUEUE_TIMEOUT_SECONDS
        while self._pending:
            try:
                if block:
                    target = self.targets_in.get(timeout=POLL_SECONDS)
                else:
                    target = self.targets_in.get_nowait()
            except queue.Empty:
                if not block or self.stop.is_set():
                    return
                if time.monotonic() > deadline:
                    raise TimeoutError(f"{self.name} waited too long for SG targets")
                continue
            h, cond = self._pending.pop(target.step)
            deadline = time.monotonic() + QUEUE_TIMEOUT_SECONDS
            loss = sg_update(self.net.sg_models[self.top], h, cond, target.gradient)
            self.sg_losses.append((target.step, loss))


#####################################
# Pipeline
#####################################


@dataclass
class PipelineResult:
    losses: list[float] = field(default_factory=list)
    sg_losses: dict[int, list[float]] = field(default_factory=dict)
    steps: int = 0


def run_pipeline(net: FfNetwork, batches: Iterable[tuple[np.ndarray, np.ndarray]]) -> PipelineResult:
    """Train net on batches with one thread per decoupled segment."""
    decoupled = net.spec.decoupled_interfaces()
    segments = segments_for(net.n_layers, decoupled)
    missing = [s[-1] for s in segments[:-1] if s[-1] not in net.sg_models]
    if missing:
        raise_config_error(f"No SG model at decoupled interfaces {missing}")

    inboxes = [queue.Queue() for _ in segments]
    stop = threading.Event()
    target_queues = [queue.Queue() for _ in segments[:-1]]
    workers = []
    for s, layers in enumerate(segments):
        workers.append(
            SegmentWorker(
                net,
                layers,
                inbox=inboxes[s],
                outbox=inboxes[s + 1] if s + 1 < len(segments) else None,
                targets_in=target_queues[s] if s < len(target_queues) else None,
                targets_out=target_queues[s - 1] if s > 0 else None,
                stop=stop,
            )
        )
    logger.info(f"Starting pipeline with {len(workers)} segment workers")
    for worker in workers:
        worker.start()

    steps = 0
    for step, (x, y) in enumerate(batches):
        inboxes[0].put(ActivationMessage(step=step, h=detach(x), labels=np.asarray(y)))
        steps += 1
    inboxes[0].put(None)
    for worker in workers:
        worker.join()

    for worker in workers:
        if worker.error is not None:
            raise worker.error

    result = PipelineResult(steps=steps)
    result.losses = [loss for _, loss in sorted(workers[-1].losses)]
    for worker in workers[:-1]:
        result.sg_losses[worker.top] = [loss for _, loss in sorted(worker.sg_losses)]
    logger.info(f"Pipeline finished {steps} steps")
    return result
