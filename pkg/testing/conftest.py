import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

from lapdae.model import build_arch, init_params
from lapdae.data import CIFAR_FILES, MNIST_IMAGE_MAGIC, MNIST_LABEL_MAGIC

REPO_ROOT = Path(__file__).resolve().parent.parent


def _idx_bytes(magic: int, dims, payload: bytes) -> bytes:
    return struct.pack(">I", magic) + struct.pack(">" + "I" * len(dims), *dims) + payload


@pytest.fixture
def write_idx():
    """Write an IDX file; returns the path"""

    def _write(path: Path, magic: int, dims, payload: bytes, compress: bool = False) -> Path:
        data = _idx_bytes(magic, dims, payload)
        if compress:
            path = path.with_name(path.name + ".gz")
            with gzip.open(path, "wb") as f:
                f.write(data)
        else:
            path.write_bytes(data)
        return path

    return _write


def smooth_images(count: int, channels: int, size: int, seed: int = 0) -> np.ndarray:
    """Low-frequency synthetic images in [0, 1]"""
    rng = np.random.default_rng(seed)
    grid = np.linspace(0.0, 1.0, size)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    images = np.empty((count, channels, size, size), dtype=np.float32)
    for n in range(count):
        for c in range(channels):
            fx, fy, phase = rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0, np.pi)
            images[n, c] = 0.5 + 0.4 * np.sin(np.pi * fx * xx + phase) * np.cos(np.pi * fy * yy)
    return images


@pytest.fixture
def mnist_dir(tmp_path, write_idx):
    """MNIST-layout directory with 24 train and 20 test 28x28 images"""
    directory = tmp_path / "mnist"
    directory.mkdir()
    for split, count, seed in (("train", 24, 1), ("t10k", 20, 2)):
        pixels = np.round(smooth_images(count, 1, 28, seed) * 255).astype(np.uint8)
        labels = (np.arange(count) % 10).astype(np.uint8)
        write_idx(directory / f"{split}-images-idx3-ubyte", MNIST_IMAGE_MAGIC, (count, 28, 28), pixels.tobytes())
        write_idx(directory / f"{split}-labels-idx1-ubyte", MNIST_LABEL_MAGIC, (count,), labels.tobytes())
    return directory


@pytest.fixture
def cifar_dir(tmp_path):
    """CIFAR-10 binary layout with 3 records per batch file"""
    directory = tmp_path / "cifar-10-batches-bin"
    directory.mkdir()
    rng = np.random.default_rng(3)
    for name in CIFAR_FILES["train"] + CIFAR_FILES["test"]:
        records = rng.integers(0, 256, size=(3, 3073), dtype=np.uint8)
        records[:, 0] = rng.integers(0, 10, size=3)
        (directory / name).write_bytes(records.tobytes())
    return directory


@pytest.fixture
def tiny_arch():
    return build_arch(1, (4, 4, 6, 6), (1, 2, 1, 2), (4, 3), (2, 2, 1))


@pytest.fixture
def tiny_params(tiny_arch):
    return init_params(tiny_arch, seed=0)


@pytest.fixture
def tiny_config(tmp_path):
    """INI file for a tiny, fast run writing under tmp_path"""
    path = tmp_path / "tiny.ini"
    path.write_text(
        "[data]\n"
        "held_out_size = 4\n"
        "[model]\n"
        "encoder_channels = 4,4,6,6\n"
        "decoder_channels = 4,3\n"
        "[train]\n"
        "epochs = 1\n"
        "batch_size = 8\n"
        "base_lr = 1e-2\n"
        "checkpoint_every = 1\n"
        "[corruption]\n"
        "levels = 3\n"
        "[eval]\n"
        "queries = none\n"
        "probe_epochs = 2\n"
        "probe_train_size = 24\n"
        f"[run]\n"
        f"runs_dir = {tmp_path / 'runs'}\n"
    )
    return path
