"""Per-class second-moment ("density") matrices of patch vectors.

``S_c`` is the raw, uncentred sum of outer products of class-``c`` patches
and ``rho_c = S_c / n_c`` with ``n_c`` the class patch count.  The pooled
matrix is ``sum_c S_c / sum_c n_c``.
"""
from dataclasses import dataclass
import math
import warnings

import numpy as np

from .datasets import fisher_yates_permutation
from .errors import DimensionError, InsufficientStatisticsError
from .linalg import symmetric_eig
from .patching import iter_patch_chunks

TOTAL = "total"


@dataclass(frozen=True)
class DensitySpectrum:
    class_id: object
    spectrum: object
    count: int

    @property
    def eigenvalues(self):
        return self.spectrum.eigenvalues

    @property
    def eigenvectors(self):
        return self.spectrum.eigenvectors


class DensityAccumulator:
    """Mergeable per-class sums of patch outer products."""

    def __init__(self, d, n_classes=1):
        self.d = int(d)
        self.n_classes = int(n_classes)
        self.sums = np.zeros((self.n_classes, self.d, self.d))
        self.counts = np.zeros(self.n_classes, dtype=np.int64)

    def __repr__(self):
        return f"DensityAccumulator(d={self.d}, n_classes={self.n_classes}, patches={self.total_count})"

    @property
    def total_count(self):
        return int(self.counts.sum())

    def add_rows(self, rows, cls=0):
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != self.d:
            raise DimensionError(f"rows must be n x {self.d}, got {rows.shape}")
        if rows.shape[0]:
            self.sums[cls] += rows.T @ rows
            self.counts[cls] += rows.shape[0]
        return self

    def accumulate(self, patches):
        """Add a PatchMatrix; rows are routed to the class of their source sample."""
        if patches.dim != self.d:
            raise DimensionError(f"patch dim {patches.dim} != accumulator dim {self.d}")
        if patches.count == 0:
            return self
        labels = patches.sample_labels
        if labels is None:
            return self.add_rows(patches.data, 0)
        per = patches.patches_per_sample
        blocks = patches.data.reshape(labels.shape[0], per, self.d)
        for c in np.unique(labels):
            rows = blocks[labels == c].reshape(-1, self.d)
            self.add_rows(rows, int(c))
        return self

    def accumulate_maps(self, x, k, labels=None):
        """Stream every ``k x k`` window of a batch or feature map into the sums."""
        for chunk in iter_patch_chunks(x, k, labels=labels):
            self.accumulate(chunk)
        return self

    def merge(self, other):
        if (other.d, other.n_classes) != (self.d, self.n_classes):
            raise DimensionError("accumulators have different shapes")
        out = DensityAccumulator(self.d, self.n_classes)
        out.sums = self.sums + other.sums
        out.counts = self.counts + other.counts
        return out

    def copy(self):
        out = DensityAccumulator(self.d, self.n_classes)
        out.sums = self.sums.copy()
        out.counts = self.counts.copy()
        return out

    def density(self, cls=TOTAL):
        if cls == TOTAL:
            n = self.total_count
            s = self.sums.sum(axis=0)
        else:
            n = int(self.counts[cls])
            s = self.sums[cls]
        if n == 0:
            raise InsufficientStatisticsError(f"class {cls} has no patches")
        return s / n

    def spectrum(self, cls=TOTAL):
        rho = self.density(cls)
        n = self.total_count if cls == TOTAL else int(self.counts[cls])
        return DensitySpectrum(cls, symmetric_eig(rho), n)

    def class_spectra(self):
        """Spectra of every non-empty class, in ascending class order."""
        return [self.spectrum(c) for c in range(self.n_classes) if self.counts[c] > 0]


def accumulate_batch(x, k, labels=None, n_classes=None):
    maps = getattr(x, "images", x)
    if labels is None:
        labels = getattr(x, "labels", None)
    if n_classes is None:
        n_classes = getattr(x, "n_classes", None) or (1 if labels is None else int(np.max(labels)) + 1)
    d = maps.shape[1] * k * k
    return DensityAccumulator(d, n_classes).accumulate_maps(maps, k, labels=labels)


# ---------------------------------------------------------------------------
# fluctuations of the spectrum as data accumulate


@dataclass(frozen=True)
class FluctuationSeries:
    """Eigenvalue fluctuation statistic ``sigma_mu * sqrt(N / lambda_mu)`` per window.

    Arrays are indexed ``[window, group, mu]`` where a group is a class (or
    the single pooled matrix).  Entries are NaN until ``span`` windows exist
    and for groups or eigenvalues that are still empty.
    """

    window: int
    span: int
    estimator: str
    images_seen: np.ndarray
    group_images: np.ndarray
    eigenvalues: np.ndarray
    sigma: np.ndarray
    statistic: np.ndarray

    @property
    def mean(self):
        with np.errstate(all="ignore"):
            flat = self.statistic.reshape(self.statistic.shape[0], -1)
            valid = np.isfinite(flat).any(axis=1)
            out = np.full(flat.shape[0], np.nan)
            out[valid] = np.nanmean(flat[valid], axis=1)
        return out

    @property
    def spread(self):
        """Standard deviation of the statistic across eigenvalues (and groups)."""
        flat = self.statistic.reshape(self.statistic.shape[0], -1)
        out = np.full(flat.shape[0], np.nan)
        for i, row in enumerate(flat):
            row = row[np.isfinite(row)]
            if row.size > 1:
                out[i] = row.std(ddof=1)
        return out

    def valid(self):
        m = self.mean
        ok = np.isfinite(m)
        return self.images_seen[ok], m[ok]

    def second_half_drift(self):
        """Fitted change of the mean statistic over the second half, relative to its mean."""
        return relative_drift(*self.valid())

    def burn_in(self, band=0.1, smooth=5):
        """Images seen when the smoothed mean first comes within ``band`` of the plateau."""
        return burn_in(*self.valid(), band=band, smooth=smooth)


def relative_drift(n, m):
    """Least-squares slope of ``m`` against ``n`` over the second half, times its span, over its mean."""
    n, m = np.asarray(n, dtype=np.float64), np.asarray(m, dtype=np.float64)
    h = len(m) // 2
    n, m = n[h:], m[h:]
    if len(m) < 2:
        raise InsufficientStatisticsError("need at least two windows in the second half")
    slope = np.polyfit(n, m, 1)[0]
    return float(slope * (n[-1] - n[0]) / np.mean(m))


def burn_in(n, m, band=0.1, smooth=5):
    """First ``n`` at which the trailing ``smooth``-window average of ``m`` is within ``band`` of the plateau.

    The plateau is the mean of the second half of the series.  Returns
    ``None`` if the smoothed series never enters the band.
    """
    n, m = np.asarray(n), np.asarray(m, dtype=np.float64)
    if len(m) < smooth:
        raise InsufficientStatisticsError("series shorter than the smoothing span")
    plateau = float(np.mean(m[len(m) // 2 :]))
    sm = np.convolve(m, np.ones(smooth) / smooth, mode="valid")
    ns = n[smooth - 1 :]
    inside = np.abs(sm / plateau - 1.0) <= band
    return int(ns[np.argmax(inside)]) if inside.any() else None


def fluctuation_series(x, k=3, labels=None, window=20, span=5, per_class=True,
                       n_classes=None, estimator="standard_error"):
    """Eigenvalue fluctuations while images are streamed in order.

    Images are consumed in non-overlapping windows of ``window`` images.
    After each window the spectrum of every density matrix is recorded.

    ``estimator="standard_error"`` rescales each snapshot increment to the
    deviation of the window's own second moment from the running value,
    ``r = (N / dN) * (lambda(N) - lambda(N - dN))``, and takes
    ``sigma = std(r over the last span windows) * sqrt(dN / N)``: the
    standard error of ``lambda(N)``.  ``estimator="window_std"`` uses the
    plain standard deviation of the last ``span`` snapshots instead.
    """
    if estimator not in ("standard_error", "window_std"):
        raise ValueError(f"unknown estimator {estimator!r}")
    maps = np.asarray(getattr(x, "images", x))
    if labels is None:
        labels = getattr(x, "labels", None)
    if per_class and labels is None:
        raise ValueError("per-class fluctuations need labels")
    if window < 2:
        raise InsufficientStatisticsError("window must hold at least two images")
    n = maps.shape[0]
    n_windows = n // window
    if n_windows < 2:
        raise InsufficientStatisticsError("fewer than two windows in the stream")
    labels = np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    if per_class:
        groups = int(n_classes or getattr(x, "n_classes", None) or labels.max() + 1)
        group_of = labels
    else:
        groups = 1
        group_of = np.zeros(n, dtype=np.int64)
    d = maps.shape[1] * k * k
    acc = DensityAccumulator(d, groups)
    lam = np.full((n_windows, groups, d), np.nan)
    seen = np.zeros((n_windows, groups))
    for w in range(n_windows):
        sl = slice(w * window, (w + 1) * window)
        acc.accumulate_maps(maps[sl], k, labels=group_of[sl])
        seen[w] = np.bincount(group_of[: (w + 1) * window], minlength=groups)
        for g in range(groups):
            if acc.counts[g]:
                lam[w, g] = acc.spectrum(g).eigenvalues
    with np.errstate(all="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        lam_max = np.nanmax(lam, axis=2, keepdims=True)
        usable = lam > 1e-12 * lam_max
        sigma = np.full_like(lam, np.nan)
        if estimator == "standard_error":
            dn = np.diff(seen, axis=0)
            r = np.full_like(lam, np.nan)
            r[1:] = np.where(dn[..., None] > 0, seen[1:, :, None] / dn[..., None] * (lam[1:] - lam[:-1]), np.nan)
            dn_full = np.full_like(seen, np.nan)
            dn_full[1:] = np.where(dn > 0, dn, np.nan)
            for w in range(span, n_windows):
                seg = r[w - span + 1 : w + 1]
                good = np.isfinite(seg).sum(axis=0) >= 2
                sd = np.full(seg.shape[1:], np.nan)
                sd[good] = _nanstd(seg[:, good])
                mean_dn = _nanmean(dn_full[w - span + 1 : w + 1])
                sigma[w] = sd * np.sqrt(mean_dn / seen[w])[:, None]
        else:
            for w in range(span - 1, n_windows):
                seg = lam[w - span + 1 : w + 1]
                sigma[w] = np.std(seg, axis=0, ddof=1)
        statistic = np.where(usable, sigma * np.sqrt(seen[:, :, None] / lam), np.nan)
    images_seen = (np.arange(n_windows) + 1) * window
    return FluctuationSeries(window, span, estimator, images_seen, seen, lam, sigma, statistic)


def _nanstd(a):
    m = np.nanmean(a, axis=0)
    cnt = np.isfinite(a).sum(axis=0)
    return np.sqrt(np.nansum((a - m) ** 2, axis=0) / (cnt - 1))


def _nanmean(a):
    cnt = np.isfinite(a).sum(axis=0)
    return np.where(cnt > 0, np.nansum(a, axis=0) / np.maximum(cnt, 1), np.nan)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EigenConvergenceTable:
    fractions: tuple
    n_images: np.ndarray
    eigenvalues: np.ndarray

    def relative_error(self, top=None):
        """Relative deviation of each row from the last (largest-fraction) row."""
        ref = self.eigenvalues[-1]
        sl = slice(None) if top is None else slice(0, top)
        return np.abs(self.eigenvalues[:, sl] - ref[sl]) / np.abs(ref[sl])


def eigenvalue_convergence(x, fractions, k=3, seed=0, shuffle=True):
    """Pooled-density spectra built from growing prefixes of a shuffled batch."""
    fractions = tuple(float(f) for f in fractions)
    if any(not (0.0 < f <= 1.0) for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    if list(fractions) != sorted(fractions):
        raise ValueError("fractions must be ascending")
    maps = np.asarray(getattr(x, "images", x))
    n = maps.shape[0]
    order = fisher_yates_permutation(n, seed) if shuffle else np.arange(n)
    acc = DensityAccumulator(maps.shape[1] * k * k, 1)
    done = 0
    counts, rows = [], []
    for f in fractions:
        target = math.ceil(f * n)
        if target > done:
            acc.accumulate_maps(maps[np.sort(order[done:target])], k)
            done = target
        counts.append(target)
        rows.append(acc.spectrum(TOTAL).eigenvalues)
    return EigenConvergenceTable(fractions, np.asarray(counts), np.vstack(rows))
