"""Density matrix network layers: filters from the top eigenvectors of each class.

A layer keeps, for every class in ascending label order, the shortest prefix
of its descending eigenvectors whose eigenvalue mass reaches the variance
threshold.  A candidate is dropped when its absolute overlap with an already
kept filter exceeds the overlap cutoff, so earlier classes and larger
eigenvalues win.  Filters are frozen; biases are zero.
"""
from dataclasses import dataclass, field
import time

import numpy as np

from .datasets import SplitSpec, subsample
from .density import TOTAL, DensityAccumulator
from .errors import DimensionError, EmptySelectionError
from .patching import conv_forward, maxpool2, out_extent

#: slack on the cumulative variance comparison, absorbs rounding at threshold 1.0
VARIANCE_SLACK = 1e-12


@dataclass(frozen=True)
class SelectionPolicy:
    variance_threshold: float = 0.95
    overlap_cutoff: float = 0.9
    max_filters: int = None
    supervised: bool = True

    def __post_init__(self):
        for name in ("variance_threshold", "overlap_cutoff"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.max_filters is not None and self.max_filters < 0:
            raise ValueError("max_filters must be non-negative")

    def key(self):
        return (f"var={self.variance_threshold!r};cutoff={self.overlap_cutoff!r};"
                f"max={self.max_filters!r};supervised={int(self.supervised)}")


@dataclass
class DmnLayer:
    """Frozen filter bank followed by ReLU and 2x2 max pooling.

    ``filters`` has one unit eigenvector per row; ``provenance`` holds the
    (class, eigen-index, eigenvalue) each row came from, with class ``-1``
    for the pooled matrix.
    """

    filters: np.ndarray
    provenance: np.ndarray
    k: int
    in_channels: int
    meta: dict = field(default_factory=dict)

    dtype_provenance = np.dtype([("cls", "<i4"), ("mu", "<i4"), ("eigenvalue", "<f8")])

    def __post_init__(self):
        self.filters = np.array(self.filters, dtype=np.float64)
        self.filters.setflags(write=False)
        self.provenance = np.asarray(self.provenance, dtype=self.dtype_provenance)

    @property
    def n_filters(self):
        return self.filters.shape[0]

    @property
    def dim(self):
        return self.filters.shape[1]

    @property
    def bias(self):
        return np.zeros(self.n_filters)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        return (self.n_filters, out_extent(h, self.k) // 2, out_extent(w, self.k) // 2)

    def forward(self, x, out_dtype=np.float32):
        z = conv_forward(x, self.filters, activation="relu", out_dtype=out_dtype)
        return maxpool2(z)[0]


def _prefix_length(lam, threshold):
    total = float(np.sum(lam))
    if total <= 0.0:
        return 0
    frac = np.cumsum(lam) / total
    return int(np.searchsorted(frac, threshold - VARIANCE_SLACK) + 1)


def select_filters(spectra, policy):
    """Assemble filter rows from per-class spectra (see module docstring)."""
    spectra = list(spectra)
    if not spectra:
        raise EmptySelectionError("no spectra given")
    d = spectra[0].eigenvectors.shape[0]
    if any(s.eigenvectors.shape[0] != d for s in spectra):
        raise DimensionError("spectra have different dimensions")
    rows, prov = [], []
    for s in spectra:
        lam = s.eigenvalues
        psi = s.eigenvectors
        cls = -1 if s.class_id == TOTAL else int(s.class_id)
        for mu in range(min(_prefix_length(np.clip(lam, 0.0, None), policy.variance_threshold), d)):
            v = psi[:, mu]
            if rows and np.max(np.abs(np.asarray(rows) @ v)) > policy.overlap_cutoff:
                continue
            rows.append(v)
            prov.append((cls, mu, float(lam[mu])))
    if policy.max_filters is not None and len(rows) > policy.max_filters:
        keep = sorted(np.argsort([-p[2] for p in prov], kind="stable")[: policy.max_filters])
        rows = [rows[i] for i in keep]
        prov = [prov[i] for i in keep]
    if not rows:
        raise EmptySelectionError("selection policy retained no filters")
    filters = np.ascontiguousarray(np.asarray(rows))
    provenance = np.array(prov, dtype=DmnLayer.dtype_provenance)
    return filters, provenance


def layer_from_accumulator(acc, k, in_channels, policy, meta=None):
    if policy.supervised:
        spectra = acc.class_spectra()
    else:
        spectra = [acc.spectrum(TOTAL)]
    filters, prov = select_filters(spectra, policy)
    return DmnLayer(filters, prov, k, in_channels, dict(meta or {}))


def propagate(x, layers, chunk=2000, out_dtype=np.float32):
    """Push a batch through frozen DMN layers (conv, ReLU, maxpool each)."""
    maps = np.asarray(getattr(x, "images", x))
    if not layers:
        return maps
    shape = maps.shape[1:]
    for layer in layers:
        shape = layer.output_shape(shape)
    out = np.empty((maps.shape[0],) + shape, dtype=out_dtype)
    for start in range(0, maps.shape[0], chunk):
        h = maps[start : start + chunk]
        for layer in layers:
            h = layer.forward(h, out_dtype=out_dtype)
        out[start : start + chunk] = h
    return out


def _density_for(maps, labels, n_classes, k, policy):
    if not policy.supervised:
        labels = np.zeros(maps.shape[0], dtype=np.int64)
        n_classes = 1
    acc = DensityAccumulator(maps.shape[1] * k * k, n_classes)
    return acc.accumulate_maps(maps, k, labels=labels)


def build_first_layer(batch, k=3, policy=SelectionPolicy(), split=None):
    """First DMN layer from the raw images of ``batch``.

    ``split`` optionally subsamples the batch first; its fraction and seed are
    recorded in ``layer.meta``.
    """
    return build_next_layer(batch, [], k, policy, split)


def build_next_layer(batch, prev, k=3, policy=SelectionPolicy(), split=None, return_density=False):
    """DMN layer on top of ``prev``, built from the pooled outputs of those layers."""
    t0 = time.perf_counter()
    split = split or SplitSpec(1.0)
    sub = subsample(batch, split)
    maps = propagate(sub, prev)
    _, c, h, w = maps.shape
    if k > h or k > w:
        raise DimensionError(f"feature map {h}x{w} is smaller than kernel {k}")
    acc = _density_for(maps, sub.labels, batch.n_classes, k, policy)
    meta = {
        "dataset": batch.name,
        "fraction": split.train_fraction_for_density,
        "seed": split.seed,
        "n_images": len(sub),
        "depth": len(prev) + 1,
        "policy": policy.key(),
    }
    layer = layer_from_accumulator(acc, k, c, policy, meta)
    layer.meta["build_seconds"] = time.perf_counter() - t0
    return (layer, acc) if return_density else layer


def build_stack(batch, policies, k=3, split=None):
    layers = []
    for policy in policies:
        layers.append(build_next_layer(batch, layers, k, policy, split))
    return layers
