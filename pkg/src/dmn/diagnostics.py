"""Training and spectrum diagnostics, plus CSV export of every result.

* :func:`layer_convergence` - distance of each layer's weights to their final
  value, per epoch, and which layer settles first.
* :func:`norm_ratio_probe` - first-layer output relative to filter norm times
  input-block norm, per epoch.
* :func:`relaxation_probe` - spread of SGD end points of a linear model along
  the eigenvectors of its input covariance.

Fluctuation and eigenvalue-convergence series live in :mod:`dmn.density`;
they are exported here as well.
"""
from dataclasses import dataclass
import csv
import os

import numpy as np

from .density import EigenConvergenceTable, FluctuationSeries
from .errors import InsufficientStatisticsError
from .patching import im2col, kernel_size_for

#: normalised distance below which a layer counts as converged
CONVERGENCE_THRESHOLD = 0.2
MIN_EPOCHS = 20
MIN_REPEATS = 30


# ---------------------------------------------------------------------------
# layer convergence


@dataclass(frozen=True)
class ConvergenceCurve:
    """``distance[t] = ||w(t) - w(T)||_2`` and the same divided by its value at t=0."""

    layer: int
    epochs: np.ndarray
    distance: np.ndarray
    normalized: np.ndarray

    def crossing_epoch(self, threshold=CONVERGENCE_THRESHOLD):
        below = np.nonzero(self.normalized < threshold)[0]
        return int(self.epochs[below[0]]) if below.size else None


@dataclass(frozen=True)
class ConvergenceVerdict:
    threshold: float
    crossing: tuple
    passed: bool


def convergence_curves(snapshots):
    """Curves from ``snapshots[t][layer]`` weight arrays, t = 0 .. T."""
    if len(snapshots) < 2:
        raise InsufficientStatisticsError("need snapshots for at least two epochs")
    n_layers = len(snapshots[0])
    if any(len(s) != n_layers for s in snapshots):
        raise InsufficientStatisticsError("snapshots are missing layers")
    epochs = np.arange(len(snapshots))
    curves = []
    for layer in range(n_layers):
        final = np.asarray(snapshots[-1][layer], dtype=np.float64)
        dist = np.array([np.linalg.norm(np.asarray(s[layer], dtype=np.float64) - final) for s in snapshots])
        dist[-1] = 0.0
        # a layer that never moved has converged from the start
        normalized = dist / dist[0] if dist[0] > 0 else np.zeros_like(dist)
        curves.append(ConvergenceCurve(layer + 1, epochs, dist, normalized))
    return curves


def layer_convergence(snapshots, threshold=CONVERGENCE_THRESHOLD, min_epochs=MIN_EPOCHS):
    """Per-layer convergence curves and whether layer 1 crosses ``threshold`` first.

    Parameters
    ----------
    snapshots : sequence of sequences of ndarray
        ``snapshots[t][l]`` are the weights of layer ``l`` after epoch ``t``,
        ``t = 0`` being the initialisation.
    threshold : float
        Fraction of the initial distance that counts as reaching the final
        basin.

    Returns
    -------
    curves : list of ConvergenceCurve
    verdict : ConvergenceVerdict
        ``crossing[l]`` is the first epoch whose normalised distance is below
        ``threshold``; ``passed`` is true when layer 1's epoch is no later
        than any other layer's.
    """
    if len(snapshots) < 2 or len(snapshots[0]) < 2:
        raise InsufficientStatisticsError("need at least two layers of snapshots")
    if len(snapshots) - 1 < min_epochs:
        raise InsufficientStatisticsError(f"need at least {min_epochs} epochs, got {len(snapshots) - 1}")
    curves = convergence_curves(snapshots)
    crossing = tuple(c.crossing_epoch(threshold) for c in curves)
    first = crossing[0]
    others = [c for c in crossing[1:] if c is not None]
    passed = first is not None and all(first <= c for c in others)
    return curves, ConvergenceVerdict(threshold, crossing, passed)


# ---------------------------------------------------------------------------
# activation norm ratio


@dataclass(frozen=True)
class NormRatioSeries:
    epochs: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    per_filter: np.ndarray

    @property
    def lower(self):
        return self.mean - self.std

    @property
    def upper(self):
        return self.mean + self.std


def norm_ratio(x, weights, bias=None, noise=1e-6, seed=0):
    """Mean over blocks of ``relu(w . x + b) / (||w|| ||x||)`` for every filter."""
    maps = np.asarray(getattr(x, "images", x), dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    k = kernel_size_for(weights, maps.shape[1])
    cols = im2col(maps, k)
    if noise:
        cols = cols + np.random.default_rng(seed).normal(scale=noise, size=cols.shape)
    bias = np.zeros(weights.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
    h = np.maximum(cols @ weights.T + bias, 0.0)
    block = np.linalg.norm(cols, axis=1)
    wn = np.linalg.norm(weights, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = h / (block[:, None] * wn[None, :])
    r[~np.isfinite(r)] = 0.0
    return r.mean(axis=0)


def norm_ratio_probe(snapshots, x, biases=None, noise=1e-6, seed=0):
    """Norm ratio per epoch for first-layer weight snapshots.

    ``snapshots[t]`` is either the first-layer weight matrix or a sequence
    whose first element is.  The same noise draw is used for every epoch.
    """
    rows = []
    for t, s in enumerate(snapshots):
        w = s if isinstance(s, np.ndarray) else s[0]
        b = None if biases is None else biases[t]
        rows.append(norm_ratio(x, w, b, noise, seed))
    per = np.vstack(rows)
    std = per.std(axis=1, ddof=1) if per.shape[1] > 1 else np.zeros(per.shape[0])
    return NormRatioSeries(np.arange(len(rows)), per.mean(axis=1), std, per)


# ---------------------------------------------------------------------------
# relaxation probe


@dataclass(frozen=True)
class RelaxationProbeResult:
    """Spread of SGD end points along each covariance eigenvector.

    ``predicted`` is ``lr * noise_std * sqrt(lambda / N)``; only its ratios
    across directions and sample sizes are meaningful.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    spreads: np.ndarray
    predicted: np.ndarray
    n_samples: int
    lr: float
    repeats: int

    @property
    def ratio(self):
        return self.spreads / self.predicted


def relaxation_probe(eigenvalues, n_samples, lr=0.05, repeats=200, seed=0, basis=None, noise_std=1.0):
    """Monte-Carlo spread of the weights of a linear model after one SGD pass.

    Inputs ``x ~ N(0, Q diag(lambda) Q^T)`` with ``Q = basis`` (identity by
    default), targets ``y = w* . x + noise``.  Each repeat starts at ``w*``,
    draws a fresh training set of ``n_samples`` points and takes one pass of
    single-sample SGD with step ``lr / n_samples``.  The weights then sit in
    the relaxation regime around ``w*``, and their spread along eigenvector
    ``q_mu`` is expected to scale as ``sqrt(lambda_mu / N)``.

    Repeats run side by side with independent generators spawned from
    ``seed``, so the result depends only on the arguments.
    """
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if repeats < MIN_REPEATS:
        raise InsufficientStatisticsError(f"need at least {MIN_REPEATS} repeats, got {repeats}")
    if np.any(lam <= 0):
        raise ValueError("eigenvalues must be positive")
    d = lam.shape[0]
    q = np.eye(d) if basis is None else np.asarray(basis, dtype=np.float64)
    if q.shape != (d, d) or not np.allclose(q.T @ q, np.eye(d), atol=1e-10):
        raise ValueError("basis must be an orthogonal d x d matrix")
    root = np.random.SeedSequence(seed)
    w_star = np.random.default_rng(root.spawn(1)[0]).normal(size=d)
    gens = [np.random.default_rng(s) for s in root.spawn(repeats + 1)[1:]]
    scale = np.sqrt(lam)
    w = np.tile(w_star, (repeats, 1))
    step = lr / n_samples
    for _ in range(n_samples):
        z = np.vstack([g.normal(size=d + 1) for g in gens])
        xs = (z[:, :d] * scale) @ q.T
        err = np.einsum("rd,rd->r", xs, w - w_star) - noise_std * z[:, d]
        w -= step * err[:, None] * xs
    proj = (w - w_star) @ q
    spreads = proj.std(axis=0, ddof=1)
    predicted = lr * noise_std * np.sqrt(lam / n_samples)
    return RelaxationProbeResult(lam, q, spreads, predicted, int(n_samples), float(lr), int(repeats))


# ---------------------------------------------------------------------------
# CSV export


def figure_path(out_dir, name, dataset):
    return os.path.join(out_dir, f"fig_{name}_{dataset}.csv")


CONVERGENCE_HEADER = ("layer", "epoch", "distance", "normalized")


def _table(result):
    if isinstance(result, (list, tuple)) and all(isinstance(c, ConvergenceCurve) for c in result):
        rows = [(c.layer, int(e), float(d), float(n))
                for c in result for e, d, n in zip(c.epochs, c.distance, c.normalized)]
        return CONVERGENCE_HEADER, rows
    if isinstance(result, FluctuationSeries):
        spread = result.spread
        rows = [(int(n), float(m), float(s)) for n, m, s in zip(result.images_seen, result.mean, spread)]
        return ("images", "mean", "std"), rows
    if isinstance(result, EigenConvergenceTable):
        d = result.eigenvalues.shape[1]
        head = ("fraction", "n_images") + tuple(f"lambda_{i + 1}" for i in range(d))
        rows = [(f, int(n)) + tuple(float(v) for v in lam)
                for f, n, lam in zip(result.fractions, result.n_images, result.eigenvalues)]
        return head, rows
    if isinstance(result, NormRatioSeries):
        rows = [(int(e), float(m), float(lo), float(hi))
                for e, m, lo, hi in zip(result.epochs, result.mean, result.lower, result.upper)]
        return ("epoch", "mean", "lower", "upper"), rows
    if isinstance(result, RelaxationProbeResult):
        rows = [(mu + 1, float(l), float(s), float(p), float(r))
                for mu, (l, s, p, r) in enumerate(zip(result.eigenvalues, result.spreads,
                                                      result.predicted, result.ratio))]
        return ("mu", "eigenvalue", "spread", "predicted", "ratio"), rows
    raise TypeError(f"no CSV layout for {type(result).__name__}")


def emit_figure_csv(result, path):
    """Write a diagnostic result as CSV with a header row; returns ``path``.

    Floats are written with ``repr`` so the file parses back to identical
    values.  An empty curve list gives a header-only file.
    """
    header, rows = _table(result)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    os.replace(tmp, path)
    return path


def read_figure_csv(path):
    """Header and float rows of a file written by :func:`emit_figure_csv`."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = tuple(next(r))
        rows = [tuple(float(v) for v in row) for row in r]
    return header, rows
