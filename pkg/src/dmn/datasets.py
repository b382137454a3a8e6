"""MNIST IDX and CIFAR-10/100 binary readers, subsampling and class partitions.

Pixels are scaled by 1/255 and nothing else happens at ingestion; mean
handling belongs to the density code.  Images are held as ``float32`` to keep
a full CIFAR training set under a gigabyte; every accumulation downstream is
done in ``float64``.

Subsampling shuffle
-------------------
``subsample`` uses a Fisher-Yates shuffle driven by numpy's ``PCG64`` bit
generator (PCG XSL-RR 128/64, seeded through ``SeedSequence(seed)``) so the
index sets can be reproduced outside numpy.  For ``i = n-1 .. 1`` it draws
``j`` uniformly in ``[0, i]`` with Lemire's multiply-shift rejection method on
raw 64-bit outputs and swaps positions ``i`` and ``j``.  The first
``ceil(fraction * n)`` positions of the permuted index array are kept, in
that order.
"""
from dataclasses import dataclass, field
import gzip
import hashlib
import math
import os
import struct

import numpy as np

from .errors import FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CIFAR_PIXELS = 3 * 32 * 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR10_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}
CIFAR100_FILES = {"train": ["train.bin"], "test": ["test.bin"]}


@dataclass(frozen=True)
class SplitSpec:
    train_fraction_for_density: float = 1.0
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        f = self.train_fraction_for_density
        if not (0.0 < f <= 1.0):
            raise ValueError(f"fraction must lie in (0, 1], got {f}")


@dataclass(frozen=True)
class ImageBatch:
    """Labelled images, ``images`` shaped ``(N, C, H, W)`` with values in [0, 1]."""

    images: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = ""
    class_index: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("one label per image required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label outside [0, n_classes)")
        if self.class_index is None:
            object.__setattr__(self, "class_index", build_class_index(self.labels, self.n_classes))

    def __len__(self):
        return self.images.shape[0]

    @property
    def geometry(self):
        return self.images.shape[1:]

    def fingerprint(self):
        """Short content hash (labels plus a strided sample of pixels)."""
        step = max(1, len(self) // 64)
        h = hashlib.sha256(repr(self.images.shape).encode())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        h.update(np.ascontiguousarray(self.images[::step]).tobytes())
        return h.hexdigest()[:12]

    def take(self, indices, name=None):
        indices = np.asarray(indices, dtype=np.int64)
        return ImageBatch(
            self.images[indices], self.labels[indices], self.n_classes, name or self.name
        )


def build_class_index(labels, n_classes):
    order = np.argsort(labels, kind="stable")
    counts = np.bincount(labels, minlength=n_classes)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    return {c: order[bounds[c] : bounds[c + 1]] for c in range(n_classes)}


# ---------------------------------------------------------------------------
# MNIST


def _read_maybe_gzip(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, magic, ndim, path):
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise FormatError(f"{path}: truncated payload ({len(raw) - header} of {size} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_mnist(images_path, labels_path, n_classes=10, name="mnist"):
    """Read an IDX image/label file pair (optionally gzipped) into an ImageBatch."""
    pixels = _parse_idx(_read_maybe_gzip(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_maybe_gzip(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if pixels.shape[0] != labels.shape[0]:
        raise FormatError(f"{pixels.shape[0]} images but {labels.shape[0]} labels")
    images = (pixels.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    return ImageBatch(images, labels.astype(np.int64), n_classes, name)


def _find(directory, stem):
    for candidate in (stem, stem + ".gz"):
        path = os.path.join(directory, candidate)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(os.path.join(directory, stem))


def load_mnist_dir(directory, split="train"):
    """Load the standard MNIST file names (plain or ``.gz``) from ``directory``."""
    img, lab = MNIST_FILES[split]
    return load_mnist(_find(directory, img), _find(directory, lab), name=f"mnist-{split}")


def write_idx_images(path, pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(pixels.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


# ---------------------------------------------------------------------------
# CIFAR


def _cifar_records(path, variant):
    label_bytes = 1 if variant == "cifar10" else 2
    record = label_bytes + CIFAR_PIXELS
    raw = _read_maybe_gzip(path)
    if len(raw) % record:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of record size {record}")
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    # cifar100 stores (coarse, fine); the fine label is the class
    labels = rows[:, label_bytes - 1].astype(np.int64)
    pixels = rows[:, label_bytes:].reshape(-1, 3, 32, 32)
    return pixels, labels


def load_cifar(dir_path, variant="cifar10", split="train"):
    """Read CIFAR-10/100 binary batches; images come out channel-major (R, G, B planes)."""
    if variant not in ("cifar10", "cifar100"):
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    names = (CIFAR10_FILES if variant == "cifar10" else CIFAR100_FILES)[split]
    parts = [_cifar_records(_find(dir_path, n), variant) for n in names]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([lab for _, lab in parts])
    images = pixels.astype(np.float32) / np.float32(255.0)
    n_classes = 10 if variant == "cifar10" else 100
    return ImageBatch(images, labels, n_classes, f"{variant}-{split}")


def write_cifar_records(path, pixels, labels, variant="cifar10", coarse=None):
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(-1, CIFAR_PIXELS)
    labels = np.asarray(labels, dtype=np.uint8)
    if variant == "cifar10":
        head = labels[:, None]
    else:
        coarse = np.zeros_like(labels) if coarse is None else np.asarray(coarse, dtype=np.uint8)
        head = np.stack([coarse, labels], axis=1)
    with open(path, "wb") as fh:
        fh.write(np.concatenate([head, pixels], axis=1).tobytes())


# ---------------------------------------------------------------------------
# subsampling and partitions


def _bounded(bitgen, bound):
    """Uniform integer in ``[0, bound)`` from raw 64-bit draws (Lemire)."""
    threshold = (1 << 64) % bound
    while True:
        product = int(bitgen.random_raw()) * bound
        if (product & 0xFFFFFFFFFFFFFFFF) >= threshold:
            return product >> 64


def fisher_yates_permutation(n, seed):
    bitgen = np.random.PCG64(seed)
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = _bounded(bitgen, i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return np.asarray(perm, dtype=np.int64)


def subsample_indices(n, spec):
    count = math.ceil(spec.train_fraction_for_density * n)
    if spec.shuffle:
        return fisher_yates_permutation(n, spec.seed)[:count]
    return np.arange(count, dtype=np.int64)


def subsample(batch, spec):
    """Keep ``ceil(fraction * N)`` samples chosen by the seeded shuffle."""
    if spec.train_fraction_for_density == 1.0 and not spec.shuffle:
        return batch
    return batch.take(subsample_indices(len(batch), spec))


def partition_by_class(batch):
    """Per-class views ``{c: ImageBatch}`` for every class present in ``batch``."""
    return {c: batch.take(idx) for c, idx in batch.class_index.items() if idx.size}
