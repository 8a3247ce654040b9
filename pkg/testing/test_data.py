import numpy as np
import pytest

from lapdae.data import (
    CIFAR_FILES,
    MNIST_IMAGE_MAGIC,
    MNIST_LABEL_MAGIC,
    BatchIterator,
    hflip,
    iterate,
    load_cifar10,
    load_dataset,
    load_mnist,
    read_idx,
)
from lapdae.errors import (
    ConfigError,
    CountMismatchError,
    MagicNumberError,
    MissingDataError,
    TruncatedFileError,
)


def test_load_mnist(mnist_dir):
    train = load_mnist(mnist_dir, "train")
    assert train.images.shape == (24, 1, 28, 28)
    assert train.images.dtype == np.float32
    assert 0.0 <= train.images.min() and train.images.max() <= 1.0
    assert list(train.labels[:3]) == [0, 1, 2]
    assert load_mnist(mnist_dir, "test").images.shape == (20, 1, 28, 28)


def test_load_mnist_gzip(tmp_path, write_idx):
    pixels = np.arange(2 * 28 * 28, dtype=np.uint64).astype(np.uint8)
    write_idx(tmp_path / "train-images-idx3-ubyte", MNIST_IMAGE_MAGIC, (2, 28, 28), pixels.tobytes(), compress=True)
    write_idx(tmp_path / "train-labels-idx1-ubyte", MNIST_LABEL_MAGIC, (2,), bytes([7, 3]), compress=True)
    dataset = load_mnist(tmp_path, "train")
    assert list(dataset.labels) == [7, 3]
    assert dataset.images[0, 0, 0, 1] == pytest.approx(1 / 255)


def test_missing_file(tmp_path):
    with pytest.raises(MissingDataError) as info:
        load_mnist(tmp_path, "train")
    assert info.value.exit_code == 4


def test_bad_magic(tmp_path, write_idx):
    path = write_idx(tmp_path / "labels", 0x00000802, (1,), b"\x00")
    with pytest.raises(MagicNumberError, match="0x00000802"):
        read_idx(path, MNIST_LABEL_MAGIC)


def test_truncated_payload_reports_offset(tmp_path, write_idx):
    path = write_idx(tmp_path / "images", MNIST_IMAGE_MAGIC, (2, 4, 4), bytes(20))
    with pytest.raises(TruncatedFileError) as info:
        read_idx(path, MNIST_IMAGE_MAGIC)
    assert info.value.offset == 16 + 20


def test_truncated_header(tmp_path):
    path = tmp_path / "short"
    path.write_bytes(b"\x00\x00")
    with pytest.raises(TruncatedFileError):
        read_idx(path, MNIST_IMAGE_MAGIC)


def test_trailing_bytes(tmp_path, write_idx):
    path = write_idx(tmp_path / "labels", MNIST_LABEL_MAGIC, (2,), bytes(3))
    with pytest.raises(CountMismatchError):
        read_idx(path, MNIST_LABEL_MAGIC)


def test_image_label_count_mismatch(tmp_path, write_idx):
    write_idx(tmp_path / "t10k-images-idx3-ubyte", MNIST_IMAGE_MAGIC, (2, 28, 28), bytes(2 * 784))
    write_idx(tmp_path / "t10k-labels-idx1-ubyte", MNIST_LABEL_MAGIC, (3,), bytes(3))
    with pytest.raises(CountMismatchError):
        load_mnist(tmp_path, "test")


def test_load_cifar10_from_parent_dir(cifar_dir):
    train = load_cifar10(cifar_dir.parent, "train")
    assert train.images.shape == (15, 3, 32, 32)
    assert train.labels.dtype == np.int64
    test = load_dataset("cifar10", cifar_dir, "test")
    assert len(test) == 3


def test_cifar_plane_order(tmp_path):
    for name in CIFAR_FILES["test"]:
        record = np.zeros(3073, dtype=np.uint8)
        record[0] = 4
        record[1:1025] = 255  # red plane
        (tmp_path / name).write_bytes(record.tobytes())
    dataset = load_cifar10(tmp_path, "test")
    assert dataset.labels[0] == 4
    assert dataset.images[0, 0].min() == 1.0
    assert dataset.images[0, 1:].max() == 0.0


def test_cifar_truncated_record(cifar_dir):
    path = cifar_dir / CIFAR_FILES["test"][0]
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(TruncatedFileError) as info:
        load_cifar10(cifar_dir, "test")
    assert info.value.offset == 2 * 3073


def test_unknown_dataset_and_split(mnist_dir):
    with pytest.raises(ConfigError):
        load_dataset("svhn", mnist_dir, "train")
    with pytest.raises(ConfigError):
        load_mnist(mnist_dir, "validation")


def test_subset_and_split_off(mnist_dir):
    dataset = load_mnist(mnist_dir, "train")
    assert len(dataset.subset(10)) == 10
    assert len(dataset.subset(None)) == 24
    assert len(dataset.subset(100)) == 24
    train, held_out = dataset.split_off(4)
    assert (len(train), len(held_out)) == (20, 4)
    np.testing.assert_array_equal(held_out.images, dataset.images[20:])


def test_hflip():
    x = np.arange(6).reshape(1, 1, 2, 3)
    np.testing.assert_array_equal(hflip(x)[0, 0], [[2, 1, 0], [5, 4, 3]])


def test_batches_cover_every_index_once():
    images = np.arange(10, dtype=np.float32).reshape(10, 1, 1, 1)
    batches = list(BatchIterator(batch_size=4, seed=1).batches(images, epoch=0))
    assert [len(b.indices) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate([b.indices for b in batches])) == list(range(10))
    for batch in batches:
        np.testing.assert_array_equal(batch.images[:, 0, 0, 0], batch.indices)


def test_batch_order_depends_on_seed_and_epoch():
    images = np.zeros((32, 1, 2, 2), dtype=np.float32)
    cfg = BatchIterator(batch_size=32, seed=5)
    first = next(cfg.batches(images, epoch=0)).indices
    np.testing.assert_array_equal(first, next(cfg.batches(images, epoch=0)).indices)
    assert not np.array_equal(first, next(cfg.batches(images, epoch=1)).indices)


def test_flip_augmentation(mnist_dir):
    dataset = load_mnist(mnist_dir, "train")
    batch = next(iterate(dataset, BatchIterator(batch_size=24, seed=0, flip=True)))
    assert 0 < batch.flipped.sum() < 24
    for row, index in enumerate(batch.indices):
        expected = dataset.images[index]
        if batch.flipped[row]:
            expected = hflip(expected)
        np.testing.assert_array_equal(batch.images[row], expected)
    # source images are untouched
    assert np.array_equal(dataset.images, load_mnist(mnist_dir, "train").images)


def test_batch_size_must_be_positive():
    with pytest.raises(ConfigError):
        BatchIterator(batch_size=0)
