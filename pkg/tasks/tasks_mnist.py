"""
tasks_mnist.py - MNIST IDX ingestion plus a synthetic stand-in with the same shapes.

IDX layout: two zero bytes, a dtype code, the number of dims, one
big-endian u32 per dim, then the payload. Files may be raw or gzip.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import gzip
import pathlib
import struct
from dataclasses import dataclass

# Import external packages
import numpy as np

# Import functions from local modules
from utils.utils_logger import logger
from utils.utils_numerics import DTYPE

#####################################
# Default Configurations
#####################################

IMAGE_SIZE = 784
NUM_CLASSES = 10

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}

SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

#####################################
# Errors and Types
#####################################


class MnistFormatError(ValueError):
    """Raised for malformed IDX files or inconsistent image/label sets."""


def raise_format_error(msg: str) -> None:
    logger.error(msg)
    raise MnistFormatError(msg)


@dataclass
class MnistDataset:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.images.shape[0] != self.labels.shape[0]:
            raise_format_error(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise_format_error("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def sample(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(0, len(self), size=size)
        return self.images[idx], self.labels[idx]


#####################################
# IDX Reading
#####################################


def _read_bytes(path: pathlib.Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def read_idx(path: pathlib.Path) -> np.ndarray:
    """Parse one IDX file into an array of its declared shape."""
    path = pathlib.Path(path)
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise_format_error(f"{path.name}: truncated header")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in IDX_DTYPES or ndim < 1:
        raise_format_error(f"{path.name}: bad magic {raw[:4].hex()}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise_format_error(f"{path.name}: truncated dimension header")
    shape = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = IDX_DTYPES[code]
    count = int(np.prod(shape))
    if len(raw) - header_end < count * dtype.itemsize:
        raise_format_error(f"{path.name}: payload truncated, expected {count} items")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=header_end)
    return data.reshape(shape)


def _find(data_dir: pathlib.Path, stem: str) -> pathlib.Path:
    dotted = stem.replace("-idx", ".idx")
    for name in (stem, f"{stem}.gz", dotted, f"{dotted}.gz"):
        candidate = data_dir.joinpath(name)
        if candidate.exists():
            return candidate
    raise_format_error(f"MNIST file {stem} not found in {data_dir}")


def load_mnist(data_dir: pathlib.Path, split: str = "train") -> MnistDataset:
    """Load one MNIST split, scaling pixels to [0, 1]."""
    data_dir = pathlib.Path(data_dir)
    if split not in SPLIT_FILES:
        raise_format_error(f"Unknown MNIST split: {split}")
    image_stem, label_stem = SPLIT_FILES[split]
    images = read_idx(_find(data_dir, image_stem))
    labels = read_idx(_find(data_dir, label_stem))
    if images.ndim < 2 or labels.ndim != 1:
        raise_format_error(f"unexpected MNIST ranks: images {images.shape}, labels {labels.shape}")
    flat = images.reshape(images.shape[0], -1).astype(DTYPE) / 255.0
    logger.info(f"Loaded MNIST {split}: {flat.shape[0]} images from {data_dir}")
    return MnistDataset(images=flat, labels=labels.astype(np.int64))


#####################################
# Synthetic Digits
#####################################


def synthetic_digits(
    n: int,
    rng: np.random.Generator,
    prototype_seed: int = 0,
    noise: float = 0.25,
    image_size: int = IMAGE_SIZE,
) -> MnistDataset:
    """
    Ten noisy class prototypes in [0, 1]; shares prototypes across calls
    with the same prototype_seed so train and test splits agree.
    """
    prototypes = np.random.Generator(np.random.Philox(prototype_seed)).uniform(
        0.0, 1.0, size=(NUM_CLASSES, image_size)
    )
    labels = rng.integers(0, NUM_CLASSES, size=n)
    images = np.clip(prototypes[labels] + noise * rng.standard_normal((n, image_size)), 0.0, 1.0)
    return MnistDataset(images=images, labels=labels.astype(np.int64))
