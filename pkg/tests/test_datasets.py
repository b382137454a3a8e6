import gzip
import struct

import numpy as np
import pytest

from dmn.datasets import (IDX_IMAGES_MAGIC, ImageBatch, SplitSpec, fisher_yates_permutation, load_cifar,
                          load_mnist, load_mnist_dir, partition_by_class, subsample, subsample_indices,
                          write_cifar_records, write_idx_images, write_idx_labels)
from dmn.errors import FormatError


def _mnist_pair(tmp_path, pixels, labels):
    ip, lp = tmp_path / "img", tmp_path / "lab"
    write_idx_images(ip, pixels)
    write_idx_labels(lp, labels)
    return str(ip), str(lp)


def test_idx_round_trip(tmp_path):
    pixels = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4) * 10
    ip, lp = _mnist_pair(tmp_path, pixels, [7, 1])
    b = load_mnist(ip, lp)
    assert b.images.shape == (2, 1, 3, 4)
    np.testing.assert_array_equal(np.rint(b.images[:, 0] * 255).astype(np.uint8), pixels)
    np.testing.assert_array_equal(b.labels, [7, 1])
    assert b.images.min() >= 0 and b.images.max() <= 1


def test_idx_hand_written_bytes(tmp_path):
    raw = struct.pack(">IIII", IDX_IMAGES_MAGIC, 2, 2, 2) + bytes([0, 255, 51, 102, 1, 2, 3, 4])
    (tmp_path / "i").write_bytes(raw)
    (tmp_path / "l").write_bytes(struct.pack(">II", 0x801, 2) + bytes([3, 9]))
    b = load_mnist(str(tmp_path / "i"), str(tmp_path / "l"))
    np.testing.assert_allclose(b.images[0, 0], [[0, 1], [0.2, 0.4]], rtol=1e-7)
    np.testing.assert_array_equal(b.labels, [3, 9])


def test_idx_gzip(tmp_path):
    pixels = np.full((1, 2, 2), 9, np.uint8)
    ip, lp = _mnist_pair(tmp_path, pixels, [0])
    gz = tmp_path / "img.gz"
    gz.write_bytes(gzip.compress(open(ip, "rb").read()))
    assert load_mnist(str(gz), lp).images.shape == (1, 1, 2, 2)


def test_idx_errors(tmp_path):
    pixels = np.zeros((2, 2, 2), np.uint8)
    ip, lp = _mnist_pair(tmp_path, pixels, [0, 1])
    with pytest.raises(FormatError, match="magic"):
        load_mnist(ip, ip)  # images magic where labels are expected
    trunc = tmp_path / "trunc"
    trunc.write_bytes(open(ip, "rb").read()[:-1])
    with pytest.raises(FormatError, match="truncated"):
        load_mnist(str(trunc), lp)
    lp3 = tmp_path / "l3"
    write_idx_labels(lp3, [0, 1, 2])
    with pytest.raises(FormatError, match="labels"):
        load_mnist(ip, str(lp3))


def test_load_mnist_dir(tmp_path):
    pixels = np.zeros((3, 28, 28), np.uint8)
    write_idx_images(tmp_path / "train-images-idx3-ubyte", pixels)
    write_idx_labels(tmp_path / "train-labels-idx1-ubyte", [0, 1, 2])
    b = load_mnist_dir(str(tmp_path), "train")
    assert b.images.shape == (3, 1, 28, 28) and b.n_classes == 10
    with pytest.raises(FileNotFoundError):
        load_mnist_dir(str(tmp_path), "test")


def test_cifar10_record_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=(1, 3072), dtype=np.uint8)
    for i in range(1, 6):
        write_cifar_records(tmp_path / f"data_batch_{i}.bin", pixels, [i])
    b = load_cifar(str(tmp_path), "cifar10", "train")
    assert b.images.shape == (5, 3, 32, 32) and b.n_classes == 10
    np.testing.assert_array_equal(b.labels, [1, 2, 3, 4, 5])
    back = np.rint(b.images[0] * 255).astype(np.uint8)
    np.testing.assert_array_equal(back.reshape(-1), pixels[0])
    # channel-major: the first 1024 bytes are the red plane
    np.testing.assert_array_equal(back[0].reshape(-1), pixels[0, :1024])


def test_cifar100_fine_label(tmp_path):
    pixels = np.zeros((1, 3072), np.uint8)
    write_cifar_records(tmp_path / "train.bin", pixels, [42], variant="cifar100", coarse=[7])
    b = load_cifar(str(tmp_path), "cifar100", "train")
    assert b.labels.tolist() == [42] and b.n_classes == 100


def test_cifar_bad_size(tmp_path):
    (tmp_path / "test_batch.bin").write_bytes(b"\0" * 3000)
    with pytest.raises(FormatError, match="multiple"):
        load_cifar(str(tmp_path), "cifar10", "test")


def _balanced(n_per=5, classes=10):
    labels = np.repeat(np.arange(classes), n_per)
    images = np.random.default_rng(0).random((labels.size, 1, 4, 4)).astype(np.float32)
    return ImageBatch(images, labels, classes, "fixture")


def test_subsample_counts_and_determinism():
    b = _balanced()
    s1 = subsample(b, SplitSpec(0.3, seed=7))
    s2 = subsample(b, SplitSpec(0.3, seed=7))
    assert len(s1) == 15
    np.testing.assert_array_equal(s1.images, s2.images)
    assert len(subsample_indices(60000, SplitSpec(0.3))) == 18000
    full = subsample_indices(50, SplitSpec(1.0, seed=3))
    assert sorted(full.tolist()) == list(range(50))


def test_fisher_yates_frozen_prefix():
    # regression values of the documented PCG64 + Lemire shuffle
    assert fisher_yates_permutation(10, 0).tolist() == [9, 1, 3, 8, 5, 4, 7, 0, 2, 6]


def test_fraction_bounds():
    with pytest.raises(ValueError):
        SplitSpec(0.0)
    with pytest.raises(ValueError):
        SplitSpec(1.5)


def test_partition_covers_every_index():
    b = _balanced()
    views = partition_by_class(b)
    assert len(views) == 10 and all(len(v) == 5 for v in views.values())
    idx = np.concatenate(list(b.class_index.values()))
    assert sorted(idx.tolist()) == list(range(len(b)))
    single = ImageBatch(b.images[:3], np.zeros(3, np.int64), 10)
    assert list(partition_by_class(single)) == [0]


def test_label_validation():
    with pytest.raises(ValueError):
        ImageBatch(np.zeros((1, 1, 2, 2)), np.array([10]), 10)

