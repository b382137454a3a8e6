import numpy as np
import pytest

from dmn import _accel
from dmn.errors import DimensionError
from dmn.patching import (col2im, conv_forward, extract_patches, im2col, iter_patch_chunks, maxpool2,
                          maxpool2_backward, relu)

BACKENDS = [pytest.param(True, id="numba"), pytest.param(False, id="numpy")]


@pytest.fixture(params=BACKENDS)
def backend(request):
    with _accel.use_numba(request.param):
        yield request.param


def sliding_window(x, filters, bias):
    n, c, h, w = x.shape
    k = int(round((filters.shape[1] / c) ** 0.5))
    out = np.zeros((n, filters.shape[0], h - k + 1, w - k + 1))
    for s in range(n):
        for f in range(filters.shape[0]):
            wf = filters[f].reshape(c, k, k)
            for i in range(h - k + 1):
                for j in range(w - k + 1):
                    out[s, f, i, j] = np.sum(x[s, :, i : i + k, j : j + k] * wf) + bias[f]
    return out


def test_patch_counts(backend):
    p = extract_patches(np.arange(16.0).reshape(1, 1, 4, 4), 3)
    assert (p.count, p.dim) == (4, 9)
    np.testing.assert_array_equal(p.data[0], [0, 1, 2, 4, 5, 6, 8, 9, 10])
    np.testing.assert_array_equal(p.origin[-1], [0, 1, 1])
    whole = extract_patches(np.ones((3, 2, 5, 5)), 5)
    assert whole.count == 3 and whole.dim == 50
    mnist_like = extract_patches(np.zeros((2, 1, 28, 28)), 3)
    assert mnist_like.patches_per_sample == 676


def test_channel_major_layout(backend):
    x = np.zeros((1, 2, 3, 3))
    x[0, 1, 0, 2] = 5.0
    row = im2col(x, 3)[0]
    assert row[1 * 9 + 0 * 3 + 2] == 5.0 and row.sum() == 5.0


def test_stride_and_labels(backend):
    p = extract_patches(np.zeros((2, 1, 7, 7)), 3, stride=2, labels=[4, 1])
    assert p.grid == (3, 3) and p.count == 18
    assert p.class_of_patch.tolist() == [4] * 9 + [1] * 9
    assert p.origin[:, 1:].max() <= 4


def test_kernel_too_big(backend):
    with pytest.raises(DimensionError):
        extract_patches(np.zeros((1, 1, 2, 2)), 3)


def test_conv_matches_sliding_window(backend):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 1, 5, 5))
    f = rng.normal(size=(2, 9))
    b = rng.normal(size=2)
    np.testing.assert_allclose(conv_forward(x, f, b, "linear"), sliding_window(x, f, b), atol=1e-12)
    x = rng.normal(size=(3, 2, 6, 7))
    f = rng.normal(size=(4, 18))
    ref = sliding_window(x, f, np.zeros(4))
    np.testing.assert_allclose(conv_forward(x, f, activation="relu"), np.maximum(ref, 0), atol=1e-12)


def test_conv_equals_im2col_matmul(backend):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 3, 9, 8))
    f = rng.normal(size=(5, 27))
    z = conv_forward(x, f, activation="linear")
    alt = (im2col(x, 3) @ f.T).reshape(4, 7, 6, 5).transpose(0, 3, 1, 2)
    assert np.max(np.abs(z - alt)) <= 1e-12


def test_conv_chunking_is_transparent(backend):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(9, 1, 6, 6))
    f = rng.normal(size=(3, 9))
    assert np.array_equal(conv_forward(x, f, max_elements=50), conv_forward(x, f))


def test_delta_kernel_and_negatives(backend):
    x = np.random.default_rng(3).random((2, 1, 6, 6))
    delta = np.zeros((1, 9))
    delta[0, 4] = 1.0
    np.testing.assert_array_equal(conv_forward(x, delta, activation="linear")[:, 0], x[:, 0, 1:-1, 1:-1])
    assert np.all(conv_forward(x, -np.ones((1, 9)), activation="relu") == 0)


def test_conv_dimension_errors(backend):
    with pytest.raises(DimensionError):
        conv_forward(np.zeros((1, 2, 5, 5)), np.zeros((1, 10)))
    with pytest.raises(DimensionError):
        conv_forward(np.zeros((1, 1, 5, 5)), np.zeros((2, 9)), bias=np.zeros(3))


def test_relu_properties():
    x = np.random.default_rng(4).normal(size=100)
    r = relu(x)
    assert np.all(r >= 0) and np.array_equal(r[x > 0], x[x > 0])


def test_maxpool_cases(backend):
    const = np.full((1, 1, 4, 4), 2.5)
    out, _ = maxpool2(const)
    np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 2.5))
    np.testing.assert_array_equal(maxpool2(out)[0], np.full((1, 1, 1, 1), 2.5))
    block = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out, arg = maxpool2(block)
    assert out.item() == 4.0 and arg.item() == 3  # offset 2*dy + dx for (1, 1)
    assert maxpool2(np.zeros((1, 1, 5, 5)))[0].shape == (1, 1, 2, 2)


def test_maxpool_first_max_wins(backend):
    x = np.ones((1, 1, 2, 2))
    assert maxpool2(x)[1].item() == 0


def test_maxpool_backends_agree():
    x = np.random.default_rng(5).normal(size=(3, 4, 9, 8))
    with _accel.use_numba(True):
        a, ia = maxpool2(x)
        g = maxpool2_backward(a, ia, x.shape)
    with _accel.use_numba(False):
        b, ib = maxpool2(x)
        h = maxpool2_backward(b, ib, x.shape)
    assert np.array_equal(a, b) and np.array_equal(ia, ib) and np.array_equal(g, h)


def test_maxpool_backward_routes_to_argmax(backend):
    x = np.random.default_rng(6).normal(size=(2, 3, 6, 6))
    out, arg = maxpool2(x)
    g = maxpool2_backward(np.ones_like(out), arg, x.shape)
    assert g.sum() == out.size
    np.testing.assert_array_equal(x[g == 1].size, out.size)
    assert np.all(np.sort(x[g == 1]) == np.sort(out.ravel()))


def test_col2im_is_adjoint_of_im2col(backend):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 3, 6, 5))
    c = im2col(x, 3)
    y = rng.normal(size=c.shape)
    lhs = np.sum(c * y)
    rhs = np.sum(x * col2im(y, x.shape, 3))
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def test_patch_chunks_cover_all(backend):
    x = np.random.default_rng(8).random((7, 1, 6, 6))
    chunks = list(iter_patch_chunks(x, 3, labels=np.arange(7), max_elements=200))
    assert len(chunks) > 1
    np.testing.assert_array_equal(np.vstack([c.data for c in chunks]), im2col(x, 3))
