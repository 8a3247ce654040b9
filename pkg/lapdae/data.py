"""
Dataset ingestion and batch iteration

Reads MNIST IDX files (raw or gzip) and CIFAR-10 binary batches from a local
directory; nothing is downloaded here (see scripts/fetch_datasets.py). Images
are scaled to [0, 1] by /255 with no mean subtraction.
"""

import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Tuple, Union

import numpy as np

from lapdae.errors import (
    ConfigError,
    CountMismatchError,
    DataError,
    MagicNumberError,
    MissingDataError,
    TruncatedFileError,
)

logger = logging.getLogger(__name__)

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

CIFAR_RECORD_BYTES = 3073
CIFAR_SIDE = 32
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}
CIFAR_SUBDIR = "cifar-10-batches-bin"

CANONICAL_SIZES = {
    ("mnist", "train"): 60000,
    ("mnist", "test"): 10000,
    ("cifar10", "train"): 50000,
    ("cifar10", "test"): 10000,
}
SPLITS = ("train", "test")


@dataclass
class Dataset:
    """Images (N, C, H, W) float32 in [0, 1] with integer labels used only by evaluation"""

    images: np.ndarray
    labels: np.ndarray
    split: str
    name: str

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, count: int, offset: int = 0) -> "Dataset":
        end = len(self) if count is None else min(len(self), offset + count)
        return Dataset(self.images[offset:end], self.labels[offset:end], self.split, self.name)

    def split_off(self, count: int) -> Tuple["Dataset", "Dataset"]:
        """Carve the last ``count`` samples off; returns (remaining, carved)"""
        cut = max(len(self) - count, 0)
        head = Dataset(self.images[:cut], self.labels[:cut], self.split, self.name)
        tail = Dataset(self.images[cut:], self.labels[cut:], self.split, self.name)
        return head, tail


def _check_split(split: str):
    if split not in SPLITS:
        raise ConfigError(f"Unknown split '{split}' (valid: {', '.join(SPLITS)})")


def _read_bytes(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _find_file(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz", directory / stem.replace("-idx", ".idx")):
        if candidate.is_file():
            return candidate
    raise MissingDataError(f"Missing dataset file '{stem}' (or '{stem}.gz') in {directory}")


def read_idx(path: Path, expected_magic: int) -> Tuple[Tuple[int, ...], np.ndarray]:
    """
    Parse an unsigned-byte IDX file

    Args:
        path: File path (raw or .gz)
        expected_magic: 0x00000803 for images, 0x00000801 for labels

    Returns:
        (dims, flat uint8 payload)
    """
    data = _read_bytes(path)
    if len(data) < 4:
        raise TruncatedFileError(f"{path.name}: truncated header at byte offset {len(data)}", offset=len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise MagicNumberError(f"{path.name}: magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise TruncatedFileError(f"{path.name}: truncated dimension header at byte offset {len(data)}",
                                 offset=len(data))
    dims = struct.unpack(">" + "I" * ndim, data[4:header_end])
    expected = int(np.prod(dims))
    payload = np.frombuffer(data, dtype=np.uint8, offset=header_end)
    if payload.size < expected:
        raise TruncatedFileError(
            f"{path.name}: payload ends at byte offset {len(data)}, expected {header_end + expected} bytes",
            offset=len(data),
        )
    if payload.size > expected:
        raise CountMismatchError(f"{path.name}: {payload.size - expected} trailing bytes after {dims} payload")
    return dims, payload


def _warn_if_noncanonical(name: str, split: str, count: int):
    canonical = CANONICAL_SIZES.get((name, split))
    if canonical is not None and count != canonical:
        logger.warning(f"{name} {split} split has {count} samples (canonical size {canonical})")


def load_mnist(directory: Union[str, Path], split: str = "train") -> Dataset:
    """
    Load one MNIST split from IDX files

    Args:
        directory: Folder holding the four IDX files (raw or .gz)
        split: "train" or "test"

    Returns:
        Dataset with images (N, 1, 28, 28)
    """
    _check_split(split)
    directory = Path(directory)
    image_stem, label_stem = MNIST_FILES[split]
    label_dims, labels = read_idx(_find_file(directory, label_stem), MNIST_LABEL_MAGIC)
    image_dims, pixels = read_idx(_find_file(directory, image_stem), MNIST_IMAGE_MAGIC)
    if len(image_dims) != 3 or len(label_dims) != 1:
        raise DataError(f"MNIST {split}: unexpected IDX ranks {len(image_dims)} (images) / {len(label_dims)} (labels)")
    if image_dims[0] != label_dims[0]:
        raise CountMismatchError(f"MNIST {split}: {image_dims[0]} images but {label_dims[0]} labels")

    count, rows, cols = image_dims
    images = pixels.reshape(count, 1, rows, cols).astype(np.float32) / np.float32(255.0)
    _warn_if_noncanonical("mnist", split, count)
    logger.info(f"Loaded MNIST {split}: {count} images of {rows}x{cols}")
    return Dataset(images, labels.astype(np.int64), split, "mnist")


def load_cifar10(directory: Union[str, Path], split: str = "train") -> Dataset:
    """
    Load one CIFAR-10 split from the binary batches

    Each record is 1 label byte followed by 3072 pixel bytes (R, G, B planes of 32x32).

    Args:
        directory: Folder holding the .bin batches (or its cifar-10-batches-bin subfolder)
        split: "train" or "test"

    Returns:
        Dataset with images (N, 3, 32, 32)
    """
    _check_split(split)
    directory = Path(directory)
    if not (directory / CIFAR_FILES[split][0]).is_file() and (directory / CIFAR_SUBDIR).is_dir():
        directory = directory / CIFAR_SUBDIR

    labels: List[np.ndarray] = []
    images: List[np.ndarray] = []
    for name in CIFAR_FILES[split]:
        path = directory / name
        if not path.is_file():
            raise MissingDataError(f"Missing CIFAR-10 batch '{name}' in {directory}")
        data = path.read_bytes()
        complete = len(data) // CIFAR_RECORD_BYTES
        if len(data) % CIFAR_RECORD_BYTES:
            offset = complete * CIFAR_RECORD_BYTES
            raise TruncatedFileError(
                f"{name}: truncated record {complete} starting at byte offset {offset} "
                f"({len(data) - offset} of {CIFAR_RECORD_BYTES} bytes)",
                offset=offset,
            )
        records = np.frombuffer(data, dtype=np.uint8).reshape(complete, CIFAR_RECORD_BYTES)
        labels.append(records[:, 0].astype(np.int64))
        images.append(records[:, 1:].reshape(complete, 3, CIFAR_SIDE, CIFAR_SIDE))

    stacked = np.concatenate(images).astype(np.float32) / np.float32(255.0)
    _warn_if_noncanonical("cifar10", split, stacked.shape[0])
    logger.info(f"Loaded CIFAR-10 {split}: {stacked.shape[0]} images")
    return Dataset(stacked, np.concatenate(labels), split, "cifar10")


DATASET_LOADERS = {
    "mnist": load_mnist,
    "cifar10": load_cifar10,
}


def load_dataset(name: str, directory: Union[str, Path], split: str) -> Dataset:
    if name not in DATASET_LOADERS:
        raise ConfigError(f"Unknown dataset '{name}' (valid: {', '.join(DATASET_LOADERS)})")
    return DATASET_LOADERS[name](directory, split)


def hflip(images: np.ndarray) -> np.ndarray:
    """Mirror along the width axis"""
    return np.ascontiguousarray(images[..., ::-1])


@dataclass
class Batch:
    indices: np.ndarray
    images: np.ndarray
    flipped: np.ndarray = field(default=None)


@dataclass
class BatchIterator:
    """Shuffled mini-batches; order and flips are a pure function of (seed, epoch)"""

    batch_size: int
    seed: int = 0
    flip: bool = False
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    def batches(self, images: np.ndarray, epoch: int = 0) -> Iterator[Batch]:
        count = images.shape[0]
        rng = np.random.default_rng([self.seed, epoch])
        order = rng.permutation(count) if self.shuffle else np.arange(count)
        flips = rng.random(count) < 0.5 if self.flip else np.zeros(count, dtype=bool)
        for start in range(0, count, self.batch_size):
            indices = order[start:start + self.batch_size]
            batch = images[indices]
            mask = flips[start:start + self.batch_size]
            if mask.any():
                batch = batch.copy()
                batch[mask] = hflip(batch[mask])
            yield Batch(indices, batch, mask)


def iterate(dataset: Union[Dataset, np.ndarray], cfg: BatchIterator, epoch: int = 0) -> Iterator[Batch]:
    """Stream the batches of one epoch"""
    images = dataset.images if isinstance(dataset, Dataset) else dataset
    return cfg.batches(images, epoch)
