#!/usr/bin/env python3
"""
Download MNIST and CIFAR-10 into a local data directory and verify checksums

Nothing in the package downloads by itself; run this once:

    python scripts/fetch_datasets.py --out ./data

MNIST lands in <out>/mnist (gzip IDX files, readable as-is), CIFAR-10 in
<out>/cifar10/cifar-10-batches-bin. Every file is verified against its published
SHA-256 digest before it is kept.
"""

import argparse
import concurrent.futures
import hashlib
import logging
import os
import sys
import tarfile
from pathlib import Path
from typing import Callable, Dict, List, Tuple

import requests

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from lapdae.errors import DataError, StorageError
from lapdae.log_utils import configure_logging

logger = logging.getLogger("lapdae.fetch")

# Dataset mirrors
MNIST_MIRROR = "https://ossci-datasets.s3.amazonaws.com/mnist/"
CIFAR_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"

# Published SHA-256 digests of the upstream archives
MNIST_FILES = {
    "train-images-idx3-ubyte.gz": "440fcabf73cc546fa21475e81ea370265605f56be210a4024d2ca8f203523609",
    "train-labels-idx1-ubyte.gz": "3552534a0a558bbed6aed32b30c495cca23d567ec52cac8be1a0730e8010255c",
    "t10k-images-idx3-ubyte.gz": "8d422c7b0a1c1c79245a5bcf07fe86e33eeafee792b84584aec276f5a2dbc4e6",
    "t10k-labels-idx1-ubyte.gz": "f7ae60f92e00ec6debd23a6088c31dbd2371eca3ffa0defaefb259924204aec6",
}
CIFAR_ARCHIVE = ("cifar-10-binary.tar.gz", "c4a38c50a1bc5f3a1c5537f2155ab9d68f9f25eb1ed8d9ddda3db29a59bca1dd")

CHUNK_SIZE = 1 << 20
TIMEOUT = 60


def sha256sum(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(CHUNK_SIZE), b""):
            digest.update(chunk)
    return digest.hexdigest()


def download(url: str, target: Path, expected_sha256: str) -> Path:
    """Stream ``url`` to ``target`` unless a file with the right checksum is already there"""
    if target.is_file() and sha256sum(target) == expected_sha256:
        logger.info(f"{target.name}: present, checksum ok")
        return target
    target.parent.mkdir(parents=True, exist_ok=True)
    partial = target.with_suffix(target.suffix + ".part")
    try:
        with requests.get(url, stream=True, timeout=TIMEOUT) as res:
            res.raise_for_status()
            with open(partial, "wb") as f:
                for chunk in res.iter_content(chunk_size=CHUNK_SIZE):
                    f.write(chunk)
    except (requests.exceptions.SSLError, requests.exceptions.ConnectTimeout,
            requests.exceptions.ConnectionError, requests.exceptions.HTTPError) as e:
        raise StorageError(f"Download of {url} failed: {e}") from e

    actual = sha256sum(partial)
    if actual != expected_sha256:
        partial.unlink()
        raise DataError(f"{target.name}: SHA-256 {actual} does not match the published {expected_sha256}")
    partial.replace(target)
    logger.info(f"{target.name}: downloaded, checksum ok")
    return target


def fetch_mnist(out: Path, workers: int = 4) -> List[Path]:
    jobs: List[Tuple[str, Path, str]] = [
        (MNIST_MIRROR + name, out / "mnist" / name, digest) for name, digest in MNIST_FILES.items()
    ]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [executor.submit(download, *job) for job in jobs]
        return [future.result() for future in futures]


def fetch_cifar10(out: Path) -> Path:
    name, digest = CIFAR_ARCHIVE
    archive = download(CIFAR_URL, out / "cifar10" / name, digest)
    with tarfile.open(archive, "r:gz") as tar:
        members = [m for m in tar.getmembers() if m.isfile() and m.name.endswith(".bin")]
        tar.extractall(out / "cifar10", members=members)
    logger.info(f"Extracted {len(members)} CIFAR-10 batch files to {out / 'cifar10'}")
    return out / "cifar10" / "cifar-10-batches-bin"


DATASETS: Dict[str, Callable] = {
    "mnist": fetch_mnist,
    "cifar10": fetch_cifar10,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Fetch MNIST / CIFAR-10 with checksum verification")
    parser.add_argument("--out", default="data", help="Target directory")
    parser.add_argument("--dataset", choices=sorted(DATASETS) + ["all"], default="all")
    args = parser.parse_args(argv)
    configure_logging()

    out = Path(args.out)
    names = sorted(DATASETS) if args.dataset == "all" else [args.dataset]
    try:
        for name in names:
            DATASETS[name](out)
    except (DataError, StorageError) as e:
        logger.error(str(e))
        return e.exit_code
    print(f"Done. Point LAPDAE_DATA_DIR (or --data-dir) at {out / 'mnist'} or {out / 'cifar10'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
