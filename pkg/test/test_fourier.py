import itertools
import logging

import numpy as np
import pytest

from pda_lab.analysis.fourier import (
    centred,
    conjugate_index,
    fourier_basis,
    fourier_heatmap,
    heatmap_cell,
    perturbation_for_basis,
)
from pda_lab.analysis.gradviz import grad_visualization, minmax_normalize
from pda_lab.data.datasets import gen_shapes
from pda_lab.metrics import error_rate
from pda_lab.nn import build_model, predict


@pytest.fixture(scope="module")
def toy():
    data = gen_shapes(12, size=8, seed=6)
    return build_model("cnn_small", (1, 8, 8), 4, seed=2), data


def test_dc_mode_is_constant():
    np.testing.assert_allclose(fourier_basis(4, 6, 0, 0), np.full((4, 6), 1. / np.sqrt(24)), atol=1e-15)


@pytest.mark.parametrize("i,j", [(0, 1), (3, 5), (4, 4), (7, 0), (2, 6)])
def test_basis_has_unit_norm(i, j):
    assert np.linalg.norm(fourier_basis(8, 8, i, j)) == pytest.approx(1., abs=1e-12)


def test_distinct_modes_are_orthogonal():
    bases = {(i, j): fourier_basis(8, 8, i, j) for i in range(8) for j in range(8)}
    for a, b in itertools.combinations(bases, 2):
        if b == conjugate_index(8, 8, *a):
            np.testing.assert_allclose(bases[a], bases[b], atol=1e-12)
            continue
        assert abs(np.sum(bases[a] * bases[b])) < 1e-10, (a, b)


def test_basis_index_range():
    with pytest.raises(ValueError):
        fourier_basis(8, 8, 8, 0)


@pytest.mark.parametrize("channels", [1, 3])
def test_perturbation_norm(channels):
    x = np.random.default_rng(1).uniform(size=(channels, 8, 8))
    v = perturbation_for_basis(x, fourier_basis(8, 8, 2, 3), 0.1, sign=-1.)
    assert np.linalg.norm(v) == pytest.approx(0.1 * np.linalg.norm(x), rel=1e-12)


def test_zero_radius_gives_clean_error(toy):
    model, data = toy
    clean = error_rate(predict(model, data.images), data.labels)
    heatmap = fourier_heatmap(model, data, r=0., seed=1)
    assert heatmap.shape == (8, 8)
    np.testing.assert_array_equal(heatmap, np.full((8, 8), clean))


def test_heatmap_is_reproducible(toy):
    model, data = toy
    first = fourier_heatmap(model, data, r=0.3, seed=4)
    np.testing.assert_array_equal(first, fourier_heatmap(model, data, r=0.3, seed=4, workers=4))
    assert first[2, 5] == heatmap_cell(model, data, 2, 5, r=0.3, seed=4)
    assert centred(first)[4, 4] == first[0, 0]


def test_minmax_normalize():
    v = np.stack([np.arange(4.).reshape(1, 2, 2), np.full((1, 2, 2), 3.)])
    out = minmax_normalize(v)
    np.testing.assert_allclose(out[0, 0], [[0., 1 / 3], [2 / 3, 1.]])
    np.testing.assert_array_equal(out[1], np.full((1, 2, 2), 0.5))


def test_grad_visualization(toy):
    model, data = toy
    single = grad_visualization(model, data.images[0], data.labels[0])
    batch = grad_visualization(model, data.images[:3], data.labels[:3])
    assert single.shape == (1, 8, 8) and batch.shape == (3, 1, 8, 8)
    assert batch.min() >= 0. and batch.max() <= 1.
    zero = build_model("linear", (1, 8, 8), 4, init="zeros")
    np.testing.assert_array_equal(grad_visualization(zero, data.images[0], 1), np.full((1, 8, 8), 0.5))


def test_constant_gradient_images_are_logged(toy, caplog):
    _, data = toy
    zero = build_model("linear", (1, 8, 8), 4, init="zeros")
    with caplog.at_level(logging.DEBUG, logger="pda_lab.analysis.gradviz"):
        grad_visualization(zero, data.images[:2], data.labels[:2])
    assert "2 of 2 gradient images are constant" in caplog.text
