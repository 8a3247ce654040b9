"""
Binary checkpoint format

Layout (little-endian throughout):

    b"LAPD" | u32 version
    u32 len | architecture JSON
    u32 len | run-config JSON
    u32 epoch
    u32 len | config fingerprint (ASCII)
    u32 count | count x tensor
    u8 has_optimizer [| u32 step | f64 beta1 | f64 beta2 | f64 eps | count x m tensor | count x v tensor]

    tensor = u32 name_len | UTF-8 name | u32 rank | rank x u32 dim | f32 payload

JSON blocks are written with sorted keys and compact separators so that
save -> load -> save reproduces the same bytes.
"""

import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, Optional, Tuple, Union

import numpy as np

from lapdae.errors import CheckpointError, ConfigError, StorageError
from lapdae.model import ArchConfig, ModelParams
from lapdae.optim import AdamState
from lapdae.tensor_core import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"LAPD"
FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)


@dataclass
class Checkpoint:
    params: ModelParams
    epoch: int = 0
    run_config: Dict = field(default_factory=dict)
    fingerprint: str = ""
    optimizer: Optional[AdamState] = None


def _canonical_json(data: Dict) -> bytes:
    return json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_block(out: BinaryIO, payload: bytes):
    out.write(struct.pack("<I", len(payload)))
    out.write(payload)


def _write_tensor(out: BinaryIO, name: str, array: np.ndarray):
    encoded = name.encode("utf-8")
    _write_block(out, encoded)
    out.write(struct.pack("<I", array.ndim))
    out.write(struct.pack(f"<{array.ndim}I", *array.shape))
    out.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def to_bytes(checkpoint: Checkpoint) -> bytes:
    """Serialise a checkpoint to the binary layout above"""
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", FORMAT_VERSION))
    _write_block(out, _canonical_json(checkpoint.params.arch.to_dict()))
    _write_block(out, _canonical_json(checkpoint.run_config))
    out.write(struct.pack("<I", int(checkpoint.epoch)))
    _write_block(out, checkpoint.fingerprint.encode("ascii"))

    names = list(checkpoint.params)
    out.write(struct.pack("<I", len(names)))
    for name in names:
        _write_tensor(out, name, checkpoint.params[name].data)

    state = checkpoint.optimizer
    out.write(struct.pack("<B", 1 if state is not None else 0))
    if state is not None:
        out.write(struct.pack("<I", state.step))
        out.write(struct.pack("<3d", state.beta1, state.beta2, state.eps))
        for moments in (state.m, state.v):
            for name in names:
                _write_tensor(out, name, moments.get(name, np.zeros_like(checkpoint.params[name].data)))
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.data):
            raise CheckpointError(f"{self.source}: truncated at byte offset {len(self.data)} "
                                  f"(needed {count} bytes at {self.offset})")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def u32(self) -> int:
        return self.unpack("<I")[0]

    def block(self) -> bytes:
        return self.take(self.u32())

    def json_block(self, what: str) -> Dict:
        try:
            return json.loads(self.block().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{self.source}: malformed {what} block: {e}") from e

    def tensor(self) -> Tuple[str, np.ndarray]:
        name = self.block().decode("utf-8")
        rank = self.u32()
        dims = self.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(dims)) if dims else 1
        payload = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(dims)
        return name, payload.astype(np.float32)


def from_bytes(data: bytes, source: str = "<bytes>") -> Checkpoint:
    """
    Parse a serialised checkpoint

    Raises:
        CheckpointError: Bad magic, unsupported version, truncated or malformed payload
    """
    reader = _Reader(data, source)
    magic = reader.take(4) if len(data) >= 4 else data
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}; not a LapDAE checkpoint")
    version = reader.u32()
    if version not in SUPPORTED_VERSIONS:
        supported = ", ".join(str(v) for v in SUPPORTED_VERSIONS)
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} (supported: {supported})")

    try:
        arch = ArchConfig.from_dict(reader.json_block("architecture"))
    except ConfigError as e:
        raise CheckpointError(f"{source}: {e}") from e
    run_config = reader.json_block("run config")
    epoch = reader.u32()
    fingerprint = reader.block().decode("ascii")

    tensors: Dict[str, Tensor] = {}
    for _ in range(reader.u32()):
        name, array = reader.tensor()
        tensors[name] = Tensor(array, requires_grad=True, name=name)
    params = ModelParams(arch, tensors)
    expected = {f"{layer.name}.{suffix}": shape for layer in arch.layers
                for suffix, shape in (("weight", layer.weight_shape), ("bias", (layer.out_channels,)))}
    for name, shape in expected.items():
        if name not in tensors or tensors[name].shape != tuple(shape):
            raise CheckpointError(f"{source}: parameter '{name}' missing or not of shape {tuple(shape)}")

    optimizer = None
    (has_optimizer,) = reader.unpack("<B")
    if has_optimizer:
        step = reader.u32()
        beta1, beta2, eps = reader.unpack("<3d")
        m = dict(reader.tensor() for _ in tensors)
        v = dict(reader.tensor() for _ in tensors)
        optimizer = AdamState(m=m, v=v, step=step, beta1=beta1, beta2=beta2, eps=eps)
    if reader.offset != len(data):
        raise CheckpointError(f"{source}: {len(data) - reader.offset} trailing bytes after checkpoint payload")
    return Checkpoint(params, epoch, run_config, fingerprint, optimizer)


def save(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(to_bytes(checkpoint))
    except OSError as e:
        raise StorageError(f"Cannot write checkpoint {path}: {e}") from e
    logger.info(f"Saved checkpoint {path} (epoch {checkpoint.epoch}, params {checkpoint.params.fingerprint()})")
    return path


def load(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise StorageError(f"Cannot read checkpoint {path}: {e}") from e
    checkpoint = from_bytes(data, source=path.name)
    logger.debug(f"Loaded checkpoint {path} (epoch {checkpoint.epoch}, version {FORMAT_VERSION})")
    return checkpoint
