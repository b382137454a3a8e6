import numpy as np
import pytest

from dmn.builder import (DmnLayer, SelectionPolicy, build_first_layer, build_next_layer, build_stack,
                         propagate, select_filters)
from dmn.datasets import ImageBatch, SplitSpec
from dmn.density import TOTAL, accumulate_batch
from dmn.errors import DimensionError, EmptySelectionError
from dmn.patching import extract_patches


def _random_batch(n=40, classes=2, size=8, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    return ImageBatch(rng.random((n, 1, size, size)), labels, classes, "random")


def test_two_identical_classes_keep_only_the_first():
    rng = np.random.default_rng(0)
    x = rng.random((10, 1, 6, 6))
    batch = ImageBatch(np.concatenate([x, x]), np.repeat([0, 1], 10), 2, "twins")
    layer = build_first_layer(batch, policy=SelectionPolicy(0.95, 0.9))
    assert set(layer.provenance["cls"].tolist()) == {0}
    alone = build_first_layer(ImageBatch(x, np.zeros(10, np.int64), 1), policy=SelectionPolicy(0.95, 0.9))
    np.testing.assert_allclose(layer.filters, alone.filters, atol=1e-12)


def test_full_variance_full_cutoff_gives_complete_basis():
    batch = _random_batch()
    layer = build_first_layer(batch, policy=SelectionPolicy(1.0, 1.0, supervised=False))
    assert layer.n_filters == layer.dim == 9
    np.testing.assert_allclose(layer.filters @ layer.filters.T, np.eye(9), atol=1e-10)
    p = extract_patches(batch.images, 3).data
    np.testing.assert_allclose(np.linalg.norm(p @ layer.filters.T, axis=1), np.linalg.norm(p, axis=1), rtol=1e-10)


def test_per_class_rows_orthonormal_and_variance_retained():
    batch = _random_batch(classes=3, seed=1)
    acc = accumulate_batch(batch.images, 3, batch.labels, n_classes=3)
    policy = SelectionPolicy(0.9, 0.9)
    f, prov = select_filters(acc.class_spectra(), policy)
    for c in range(3):
        rows = f[prov["cls"] == c]
        np.testing.assert_allclose(rows @ rows.T, np.eye(rows.shape[0]), atol=1e-10)
    # with no overlap pruning each class keeps at least the requested share
    f, prov = select_filters(acc.class_spectra(), SelectionPolicy(0.9, 1.0))
    for c in range(3):
        lam = acc.spectrum(c).eigenvalues
        kept = prov["eigenvalue"][prov["cls"] == c].sum()
        assert kept / lam.sum() >= 0.9 - 1e-12


def test_filter_count_monotone_in_variance():
    batch = _random_batch(seed=2)
    counts = [build_first_layer(batch, policy=SelectionPolicy(v, 0.9, supervised=False)).n_filters
              for v in (0.5, 0.7, 0.9, 0.95, 0.99, 1.0)]
    assert counts == sorted(counts)


def test_single_image_batch():
    batch = ImageBatch(np.random.default_rng(3).random((1, 1, 5, 5)), np.array([4]), 10)
    layer = build_first_layer(batch)
    assert layer.n_filters >= 1 and set(layer.provenance["cls"].tolist()) == {4}


def test_delta_filter_composition():
    x = np.random.default_rng(4).normal(size=(2, 1, 6, 6))
    delta = np.zeros((1, 9))
    delta[0, 4] = 1.0
    layer = DmnLayer(delta, np.array([(0, 0, 1.0)], DmnLayer.dtype_provenance), 3, 1)
    inner = np.maximum(x[:, 0, 1:-1, 1:-1], 0.0)
    ref = inner.reshape(2, 2, 2, 2, 2).max(axis=(2, 4))
    out = propagate(x, [layer], out_dtype=np.float64)
    np.testing.assert_array_equal(out[:, 0], ref)
    assert layer.output_shape((1, 6, 6)) == (1, 2, 2)


def test_filters_are_frozen():
    layer = build_first_layer(_random_batch())
    with pytest.raises(ValueError):
        layer.filters[0, 0] = 1.0
    assert not layer.bias.any()


def test_empty_selection_and_policy_validation():
    acc = accumulate_batch(np.random.default_rng(5).random((4, 1, 5, 5)), 3, n_classes=1)
    with pytest.raises(EmptySelectionError):
        select_filters([acc.spectrum(TOTAL)], SelectionPolicy(max_filters=0))
    with pytest.raises(EmptySelectionError):
        select_filters([], SelectionPolicy())
    with pytest.raises(ValueError):
        SelectionPolicy(variance_threshold=0.0)
    with pytest.raises(ValueError):
        SelectionPolicy(overlap_cutoff=1.5)


def test_max_filters_keeps_largest_eigenvalues():
    batch = _random_batch(classes=3, seed=6)
    full = build_first_layer(batch, policy=SelectionPolicy(0.99, 0.9))
    capped = build_first_layer(batch, policy=SelectionPolicy(0.99, 0.9, max_filters=4))
    assert capped.n_filters == 4
    top = np.sort(full.provenance["eigenvalue"])[::-1][:4]
    np.testing.assert_allclose(np.sort(capped.provenance["eigenvalue"])[::-1], top)


def test_second_layer_uses_pooled_maps():
    batch = _random_batch(n=30, size=12, seed=7)
    first = build_first_layer(batch, policy=SelectionPolicy(0.9, 0.9, supervised=False))
    second = build_next_layer(batch, [first], policy=SelectionPolicy(0.9, 0.9, supervised=False))
    assert second.in_channels == first.n_filters and second.dim == 9 * first.n_filters
    assert second.meta["depth"] == 2
    # unsupervised bank cannot exceed the patch dimension
    assert second.n_filters <= second.dim
    with pytest.raises(DimensionError):
        build_stack(batch, [SelectionPolicy()] * 3)


def test_split_recorded_in_meta():
    batch = _random_batch(n=50)
    layer = build_first_layer(batch, split=SplitSpec(0.4, seed=3))
    assert layer.meta["n_images"] == 20 and layer.meta["fraction"] == 0.4 and layer.meta["seed"] == 3


def test_mnist_sample_filter_counts(mnist_sample):
    train, _ = mnist_sample
    counts = {v: build_first_layer(train, policy=SelectionPolicy(v, 0.9)).n_filters for v in (0.9, 0.95, 0.99)}
    # regression values on the 4000-image sample
    assert counts == MNIST_SAMPLE_COUNTS


MNIST_SAMPLE_COUNTS = {0.9: 5, 0.95: 9, 0.99: 16}


def test_second_layer_spectrum_through_delta_filter():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(10, 1, 6, 6))
    batch = ImageBatch(x, np.arange(10) % 2, 2)
    delta = np.zeros((1, 9))
    delta[0, 4] = 1.0
    first = DmnLayer(delta, np.array([(0, 0, 1.0)], DmnLayer.dtype_provenance), 3, 1)
    _, acc = build_next_layer(batch, [first], k=2, return_density=True)
    pooled = np.maximum(x[:, :, 1:-1, 1:-1], 0.0).reshape(10, 1, 2, 2, 2, 2).max(axis=(3, 5))
    ref = accumulate_batch(pooled.astype(np.float32), 2, batch.labels, n_classes=2)
    for c in range(2):
        np.testing.assert_allclose(acc.spectrum(c).eigenvalues, ref.spectrum(c).eigenvalues,
                                   rtol=1e-12, atol=1e-14)
