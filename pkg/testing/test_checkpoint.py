import struct

import numpy as np
import pytest

from conftest import smooth_images
from lapdae.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    Checkpoint,
    from_bytes,
    load,
    save,
    to_bytes,
)
from lapdae.errors import CheckpointError, StorageError
from lapdae.model import autoencode
from lapdae.optim import AdamState, TrainConfig, train


@pytest.fixture
def trained(tiny_params):
    cfg = TrainConfig(base_lr=1e-2, batch_size=8, epochs=1, pyramid_levels=3)
    result = train(tiny_params, smooth_images(8, 1, 8), cfg)
    return Checkpoint(result.params, epoch=1, run_config={"mode": "lapdae", "seed": 0, "sigma": 25.0},
                      fingerprint="abc123def456", optimizer=result.state)


def test_header(trained):
    data = to_bytes(trained)
    assert data[:4] == MAGIC
    assert struct.unpack("<I", data[4:8])[0] == FORMAT_VERSION


def test_save_load_save_is_byte_identical(trained, tmp_path):
    first = save(trained, tmp_path / "a.lapd")
    second = save(load(first), tmp_path / "b.lapd")
    assert first.read_bytes() == second.read_bytes()


def test_load_restores_everything(trained, tmp_path):
    restored = load(save(trained, tmp_path / "ckpt.lapd"))
    assert restored.epoch == 1
    assert restored.fingerprint == "abc123def456"
    assert restored.run_config == {"mode": "lapdae", "seed": 0, "sigma": 25.0}
    assert restored.params.arch == trained.params.arch
    assert restored.params.checksum() == trained.params.checksum()
    assert restored.optimizer.step == trained.optimizer.step
    for name in trained.params:
        np.testing.assert_array_equal(restored.optimizer.m[name], trained.optimizer.m[name])
        np.testing.assert_array_equal(restored.optimizer.v[name], trained.optimizer.v[name])

    x = smooth_images(2, 1, 8)
    np.testing.assert_array_equal(autoencode(restored.params, x).data, autoencode(trained.params, x).data)


def test_without_optimizer(tiny_params):
    restored = from_bytes(to_bytes(Checkpoint(tiny_params)))
    assert restored.optimizer is None
    assert restored.epoch == 0


def test_missing_moments_are_written_as_zero(tiny_params):
    restored = from_bytes(to_bytes(Checkpoint(tiny_params, optimizer=AdamState())))
    assert not np.any(restored.optimizer.m["conv1.weight"])


def test_bad_magic(trained):
    data = b"NOPE" + to_bytes(trained)[4:]
    with pytest.raises(CheckpointError, match="bad magic"):
        from_bytes(data)


def test_unsupported_version(trained):
    data = bytearray(to_bytes(trained))
    data[4:8] = struct.pack("<I", 99)
    with pytest.raises(CheckpointError, match="version 99"):
        from_bytes(bytes(data))


@pytest.mark.parametrize("cut", [2, 10, 100, -1])
def test_truncated(trained, cut):
    data = to_bytes(trained)
    with pytest.raises(CheckpointError):
        from_bytes(data[:cut])


def test_trailing_bytes(trained):
    with pytest.raises(CheckpointError, match="trailing"):
        from_bytes(to_bytes(trained) + b"\x00")


def test_wrong_parameter_shape(tiny_params):
    params = tiny_params.copy()
    params.tensors["conv1.bias"].data = np.zeros(7, dtype=np.float32)
    with pytest.raises(CheckpointError, match="conv1.bias"):
        from_bytes(to_bytes(Checkpoint(params)))


def test_checkpoint_errors_exit_with_storage_code(tmp_path):
    path = tmp_path / "junk.lapd"
    path.write_bytes(b"junk")
    with pytest.raises(CheckpointError) as info:
        load(path)
    assert info.value.exit_code == 5
    with pytest.raises(StorageError):
        load(tmp_path / "missing.lapd")
