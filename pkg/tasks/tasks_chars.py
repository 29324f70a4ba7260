"""
tasks_chars.py - generic next-character prediction streams from raw bytes.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import pathlib
from typing import Iterator, Sequence

# Import external packages
import numpy as np

# Import functions from local modules
from utils.utils_config import raise_config_error
from utils.utils_logger import logger
from utils.utils_numerics import DTYPE

#####################################
# Vocabulary and Streams
#####################################


def build_vocab(data: bytes) -> list[int]:
    """Sorted unique byte values."""
    return sorted(set(data))


def encode(data: bytes, vocab: Sequence[int]) -> np.ndarray:
    lookup = {byte: idx for idx, byte in enumerate(vocab)}
    missing = set(data) - set(lookup)
    if missing:
        raise_config_error(f"{len(missing)} byte values are outside the vocabulary")
    return np.array([lookup[b] for b in data], dtype=np.int64)


def char_stream(data: bytes, vocab: Sequence[int] | None = None) -> Iterator[tuple[int, int]]:
    """Yield (current index, next index) pairs; len(data) - 1 of them."""
    vocab = build_vocab(data) if vocab is None else vocab
    codes = encode(data, vocab)
    for current, following in zip(codes[:-1], codes[1:]):
        yield int(current), int(following)


def load_text(path: pathlib.Path) -> bytes:
    data = pathlib.Path(path).read_bytes()
    logger.info(f"Loaded {len(data)} bytes of text from {path}")
    return data


#####################################
# Batched Windows
#####################################


class CharLanes:
    """
    Split one encoded stream into `batch` contiguous lanes and serve
    T-step windows of one-hot inputs and next-character targets. Lanes
    wrap around, so the stream is effectively endless.
    """

    def __init__(self, data: bytes, batch: int, vocab: Sequence[int] | None = None):
        self.vocab = list(build_vocab(data) if vocab is None else vocab)
        codes = encode(data, self.vocab)
        lane_len = (len(codes) - 1) // batch
        if lane_len < 2:
            raise_config_error(f"text of {len(codes)} bytes is too short for {batch} lanes")
        self.inputs = np.stack([codes[i * lane_len : (i + 1) * lane_len] for i in range(batch)], axis=1)
        self.targets = np.stack(
            [codes[i * lane_len + 1 : (i + 1) * lane_len + 1] for i in range(batch)], axis=1
        )
        self.position = 0

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def next_window(self, steps: int) -> tuple[np.ndarray, np.ndarray]:
        """Return (one-hot inputs [T x B x V], target indices [T x B])."""
        rows = (self.position + np.arange(steps)) % self.inputs.shape[0]
        self.position = int((self.position + steps) % self.inputs.shape[0])
        idx = self.inputs[rows]
        one_hot = np.zeros(idx.shape + (self.vocab_size,), dtype=DTYPE)
        np.put_along_axis(one_hot, idx[..., None], 1.0, axis=-1)
        return one_hot, self.targets[rows]
