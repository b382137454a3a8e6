"""Dense matrix helpers and a cyclic Jacobi symmetric eigensolver.

Matrices are plain 2-D ``float64`` numpy arrays.  ``matmul`` keeps a fixed
per-element summation order (ascending inner index) so that its result is
reproducible bit for bit; the rest of the package uses BLAS where throughput
matters and this module where determinism does.
"""
from dataclasses import dataclass
import math

import numpy as np

from . import _accel
from ._accel import njit
from .errors import DimensionError, NumericalError

#: convergence threshold on the off-diagonal Frobenius mass, relative to ||m||_F
JACOBI_RTOL = 1e-12
JACOBI_MAX_SWEEPS = 100
#: relative asymmetry accepted before symmetrizing by averaging
SYMMETRY_RTOL = 1e-9
#: eigenvalues closer than this (relative to max |lambda|) count as tied
TIE_RTOL = 1e-12


@dataclass(frozen=True)
class Spectrum:
    """Eigenpairs of a symmetric matrix.

    ``eigenvalues`` are sorted descending and ``eigenvectors[:, mu]`` is the
    unit eigenvector for ``eigenvalues[mu]``; the largest-magnitude component
    of every eigenvector is positive.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    sweeps: int = 0

    def __len__(self):
        return self.eigenvalues.shape[0]

    def reconstruct(self):
        lam, psi = self.eigenvalues, self.eigenvectors
        return (psi * lam) @ psi.T


def as_matrix(m, name="matrix"):
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def _check_finite(a, name):
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"{name} contains non-finite entries")


# ---------------------------------------------------------------------------
# matmul


@njit
def _matmul_nb(a, b):
    m, kk = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for k in range(kk):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def _matmul_np(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def matmul(a, b):
    """Product ``a @ b`` with a fixed ascending-``k`` summation order."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    _check_finite(a, "a")
    _check_finite(b, "b")
    kernel = _accel.dispatch(_matmul_nb, _matmul_np)
    return kernel(np.ascontiguousarray(a), np.ascontiguousarray(b))


def frobenius_norm(m):
    a = np.asarray(m, dtype=np.float64)
    return float(math.sqrt(np.sum(a * a)))


def dot(u, v):
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise DimensionError(f"length mismatch: {u.size} vs {v.size}")
    return float(np.dot(u, v))


def axpy(alpha, u, v):
    """Return ``alpha * u + v``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionError(f"length mismatch: {u.shape} vs {v.shape}")
    return alpha * u + v


# ---------------------------------------------------------------------------
# Jacobi eigensolver


def _rotation_py(app, aqq, apq):
    theta = (aqq - app) / (2.0 * apq)
    if abs(theta) > 1e150:
        t = 0.5 / theta
    else:
        t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
        if theta < 0.0:
            t = -t
    c = 1.0 / math.sqrt(t * t + 1.0)
    return c, t * c


_rotation = njit(_rotation_py)


@njit
def _off_norm_nb(a):
    n = a.shape[0]
    s = 0.0
    for p in range(n):
        for q in range(p + 1, n):
            s += a[p, q] * a[p, q]
    return math.sqrt(2.0 * s)


@njit
def _jacobi_nb(a, v, tol, max_sweeps):
    n = a.shape[0]
    for sweep in range(max_sweeps):
        if _off_norm_nb(a) <= tol:
            return sweep
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                c, s = _rotation(a[p, p], a[q, q], apq)
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    if _off_norm_nb(a) <= tol:
        return max_sweeps
    return -1


def _jacobi_np(a, v, tol, max_sweeps):
    n = a.shape[0]
    iu = np.triu_indices(n, 1)

    def off():
        return math.sqrt(2.0 * float(np.sum(a[iu] ** 2)))

    for sweep in range(max_sweeps):
        if off() <= tol:
            return sweep
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                c, s = _rotation_py(a[p, p], a[q, q], apq)
                cp = a[:, p].copy()
                cq = a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = 0.0
                a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return max_sweeps if off() <= tol else -1


def _canonical_order(lam, psi):
    """Descending eigenvalues, positive dominant components, ties by pivot index."""
    pivots = np.argmax(np.abs(psi), axis=0)
    signs = np.where(psi[pivots, np.arange(psi.shape[1])] < 0.0, -1.0, 1.0)
    psi = psi * signs
    order = list(np.argsort(-lam, kind="stable"))
    scale = float(np.max(np.abs(lam))) if lam.size else 0.0
    tol = TIE_RTOL * scale
    out = []
    i = 0
    while i < len(order):
        j = i + 1
        while j < len(order) and lam[order[i]] - lam[order[j]] <= tol:
            j += 1
        group = sorted(order[i:j], key=lambda idx: (pivots[idx], idx))
        out.extend(group)
        i = j
    out = np.asarray(out, dtype=np.intp)
    return lam[out].copy(), np.ascontiguousarray(psi[:, out])


def symmetric_eig(m, rtol=JACOBI_RTOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.

    Parameters
    ----------
    m : array_like, shape (n, n)
        Symmetric input.  Asymmetry up to ``1e-9 * max|m|`` is removed by
        averaging with the transpose; larger asymmetry is an error.
    rtol : float
        Sweeps stop once the off-diagonal Frobenius norm is at most
        ``rtol * ||m||_F``.
    max_sweeps : int
        Hard cap on the number of full sweeps.

    Returns
    -------
    Spectrum
    """
    a = as_matrix(m)
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"matrix must be square, got {a.shape}")
    _check_finite(a, "matrix")
    n = a.shape[0]
    if n == 0:
        return Spectrum(np.zeros(0), np.zeros((0, 0)))
    amax = float(np.max(np.abs(a)))
    if float(np.max(np.abs(a - a.T))) > SYMMETRY_RTOL * amax:
        raise ValueError("matrix is not symmetric")
    a = np.ascontiguousarray(0.5 * (a + a.T))
    v = np.eye(n)
    tol = rtol * frobenius_norm(a)
    kernel = _accel.dispatch(_jacobi_nb, _jacobi_np)
    sweeps = kernel(a, v, tol, max_sweeps)
    if sweeps < 0:
        raise NumericalError(f"Jacobi did not converge in {max_sweeps} sweeps")
    lam, psi = _canonical_order(np.diag(a).copy(), v)
    if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(psi))):
        raise NumericalError("eigendecomposition produced non-finite values")
    return Spectrum(lam, psi, int(sweeps))
