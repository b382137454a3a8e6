"""Patch extraction, valid convolution, ReLU and 2x2 max pooling.

Feature maps are ``(N, C, H, W)`` arrays.  A patch row is the channel-major
flattening of one ``k x k x C`` window: index ``c*k*k + dy*k + dx``.  This is
also the layout of every filter row in the package and in the cache files.
"""
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _accel
from ._accel import njit
from .errors import DimensionError

#: patch rows materialised at once by the chunked helpers
CHUNK_ELEMENTS = 1 << 23


def _as_maps(x):
    images = getattr(x, "images", x)
    a = np.asarray(images)
    if a.ndim != 4:
        raise DimensionError(f"expected N x C x H x W, got shape {a.shape}")
    return a


def out_extent(size, k, stride=1):
    return (size - k) // stride + 1


# ---------------------------------------------------------------------------
# im2col


@njit
def _im2col_nb(x, k, stride, out):
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    for s in range(n):
        for oy in range(ho):
            for ox in range(wo):
                row = (s * ho + oy) * wo + ox
                col = 0
                for ch in range(c):
                    for dy in range(k):
                        y = oy * stride + dy
                        for dx in range(k):
                            out[row, col] = x[s, ch, y, ox * stride + dx]
                            col += 1
    return out


def _im2col_np(x, k, stride, out):
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    out[...] = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return out


def im2col(x, k, stride=1, dtype=np.float64):
    """Patch rows of ``x`` ordered by (sample, y, x)."""
    x = _as_maps(x)
    n, c, h, w = x.shape
    if k > h or k > w:
        raise DimensionError(f"kernel {k} exceeds image extent {h}x{w}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ho, wo = out_extent(h, k, stride), out_extent(w, k, stride)
    out = np.empty((n * ho * wo, c * k * k), dtype=dtype)
    if n == 0:
        return out
    kernel = _accel.dispatch(_im2col_nb, _im2col_np)
    return kernel(np.ascontiguousarray(x, dtype=dtype), k, stride, out)


@dataclass(frozen=True)
class PatchMatrix:
    """Flattened ``k x k x C`` windows of a batch, one row per patch.

    ``sample_labels`` holds one class per *source sample*; per-patch classes
    and origins are derived from the window grid instead of being stored.
    """

    data: np.ndarray
    k: int
    stride: int
    geometry: tuple
    sample_labels: np.ndarray = None

    @property
    def dim(self):
        return self.data.shape[1]

    @property
    def count(self):
        return self.data.shape[0]

    @property
    def grid(self):
        _, h, w = self.geometry
        return out_extent(h, self.k, self.stride), out_extent(w, self.k, self.stride)

    @property
    def patches_per_sample(self):
        ho, wo = self.grid
        return ho * wo

    @property
    def origin(self):
        """``(count, 3)`` array of (sample, y, x) top-left coordinates."""
        ho, wo = self.grid
        idx = np.arange(self.count)
        sample, rem = np.divmod(idx, ho * wo)
        oy, ox = np.divmod(rem, wo)
        return np.stack([sample, oy * self.stride, ox * self.stride], axis=1)

    @property
    def class_of_patch(self):
        if self.sample_labels is None:
            return None
        return np.repeat(self.sample_labels, self.patches_per_sample)


def extract_patches(x, k, stride=1, labels=None):
    """Extract every ``k x k`` window of an ImageBatch or feature map."""
    if labels is None:
        labels = getattr(x, "labels", None)
    maps = _as_maps(x)
    data = im2col(maps, k, stride)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
    return PatchMatrix(data, k, stride, tuple(maps.shape[1:]), labels)


def iter_patch_chunks(x, k, labels=None, max_elements=CHUNK_ELEMENTS):
    """Yield PatchMatrix chunks over consecutive samples to bound memory."""
    maps = _as_maps(x)
    if labels is None:
        labels = getattr(x, "labels", None)
    n, c, h, w = maps.shape
    per_sample = out_extent(h, k) * out_extent(w, k) * c * k * k
    step = max(1, max_elements // max(per_sample, 1))
    for start in range(0, n, step):
        sl = slice(start, start + step)
        lab = None if labels is None else np.asarray(labels)[sl]
        yield extract_patches(maps[sl], k, labels=lab)


# ---------------------------------------------------------------------------
# convolution and activation


def relu(x):
    return np.maximum(x, 0)


def kernel_size_for(filters, channels):
    d = filters.shape[1]
    k = int(round((d / channels) ** 0.5))
    if k * k * channels != d:
        raise DimensionError(f"filter dim {d} is not C*k^2 for C={channels}")
    return k


def conv_forward(x, filters, bias=None, activation="relu", out_dtype=np.float64,
                 max_elements=CHUNK_ELEMENTS):
    """Valid, stride-1 convolution of ``x`` with filter rows ``filters`` (F x C*k*k)."""
    maps = _as_maps(x)
    filters = np.asarray(filters, dtype=np.float64)
    if filters.ndim != 2:
        raise DimensionError("filters must be F x d")
    n, c, h, w = maps.shape
    k = kernel_size_for(filters, c)
    if activation not in ("relu", "linear"):
        raise ValueError(f"unknown activation {activation!r}")
    f = filters.shape[0]
    bias = np.zeros(f) if bias is None else np.asarray(bias, dtype=np.float64)
    if bias.shape != (f,):
        raise DimensionError("one bias per filter required")
    ho, wo = out_extent(h, k), out_extent(w, k)
    out = np.empty((n, f, ho, wo), dtype=out_dtype)
    step = max(1, max_elements // max(ho * wo * c * k * k, 1))
    wt = filters.T
    for start in range(0, n, step):
        chunk = maps[start : start + step]
        cols = im2col(chunk, k)
        z = cols @ wt
        z += bias
        if activation == "relu":
            np.maximum(z, 0.0, out=z)
        out[start : start + step] = z.reshape(chunk.shape[0], ho, wo, f).transpose(0, 3, 1, 2)
    return out


@njit
def _col2im_nb(cols, n, c, h, w, k):
    ho = h - k + 1
    wo = w - k + 1
    out = np.zeros((n, c, h, w))
    for s in range(n):
        for oy in range(ho):
            for ox in range(wo):
                row = (s * ho + oy) * wo + ox
                col = 0
                for ch in range(c):
                    for dy in range(k):
                        for dx in range(k):
                            out[s, ch, oy + dy, ox + dx] += cols[row, col]
                            col += 1
    return out


def _col2im_np(cols, n, c, h, w, k):
    ho, wo = h - k + 1, w - k + 1
    blocks = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h, w))
    for dy in range(k):
        for dx in range(k):
            out[:, :, dy : dy + ho, dx : dx + wo] += blocks[:, :, dy, dx]
    return out


def col2im(cols, input_shape, k):
    """Scatter-add patch rows back onto an ``input_shape`` map (adjoint of im2col)."""
    n, c, h, w = input_shape
    kernel = _accel.dispatch(_col2im_nb, _col2im_np)
    return kernel(np.ascontiguousarray(cols, dtype=np.float64), n, c, h, w, k)


# ---------------------------------------------------------------------------
# pooling


@njit
def _maxpool2_nb(x):
    n, c, h, w = x.shape
    ho = h // 2
    wo = w // 2
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.int8)
    for s in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    best = x[s, ch, 2 * oy, 2 * ox]
                    bi = 0
                    for j in range(1, 4):
                        v = x[s, ch, 2 * oy + j // 2, 2 * ox + j % 2]
                        if v > best:
                            best = v
                            bi = j
                    out[s, ch, oy, ox] = best
                    arg[s, ch, oy, ox] = bi
    return out, arg


def _maxpool2_np(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    blocks = x[:, :, : 2 * ho, : 2 * wo].reshape(n, c, ho, 2, wo, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    arg = np.argmax(blocks, axis=-1).astype(np.int8)
    out = np.take_along_axis(blocks, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2(x):
    """2x2 max pooling with stride 2; odd trailing rows/cols are dropped.

    Returns ``(pooled, argmax)`` where ``argmax`` is the row-major offset
    ``2*dy + dx`` of the winning element inside each block (first maximum
    wins on ties).
    """
    x = _as_maps(x)
    kernel = _accel.dispatch(_maxpool2_nb, _maxpool2_np)
    return kernel(np.ascontiguousarray(x))


@njit
def _maxpool2_backward_nb(grad, arg, h, w):
    n, c, ho, wo = grad.shape
    out = np.zeros((n, c, h, w))
    for s in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    j = arg[s, ch, oy, ox]
                    out[s, ch, 2 * oy + j // 2, 2 * ox + j % 2] = grad[s, ch, oy, ox]
    return out


def _maxpool2_backward_np(grad, arg, h, w):
    n, c, ho, wo = grad.shape
    blocks = np.zeros((n, c, ho, wo, 4))
    np.put_along_axis(blocks, arg[..., None].astype(np.intp), grad[..., None], axis=-1)
    out = np.zeros((n, c, h, w))
    out[:, :, : 2 * ho, : 2 * wo] = (
        blocks.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    )
    return out


def maxpool2_backward(grad, argmax, input_shape):
    """Route pooled gradients to the stored argmax positions."""
    _, _, h, w = input_shape
    kernel = _accel.dispatch(_maxpool2_backward_nb, _maxpool2_backward_np)
    return kernel(np.ascontiguousarray(grad, dtype=np.float64), np.ascontiguousarray(argmax), h, w)


def argmax_coords(argmax):
    """Split block offsets into (dy, dx)."""
    a = np.asarray(argmax)
    return a // 2, a % 2
