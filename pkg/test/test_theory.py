import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pda_lab.analysis.theory import (
    AssumptionError,
    BoundProbe,
    covering_number,
    estimate_constants,
    logit_gradient,
    logit_hessian,
    logit_loss,
    spectral_norm,
    perturbation_bound_check,
    perturbation_bound_check_logits,
    generalization_bound,
    generalization_bound_from_points,
    theorem1_check,
    theorem2_bound,
)
from pda_lab.data.datasets import gen_blobs
from pda_lab.nn import build_model

BOUND = dict(empirical_loss=0.4, n=1000, gamma=0.1, lam=2., M0=2.5, M1=1.2, L0=0.8, L1=0.5, p=0.05, cover_size=30)


def test_two_class_hessian_norm():
    np.testing.assert_allclose(logit_hessian(np.zeros(2)), [[0.25, -0.25], [-0.25, 0.25]])
    assert spectral_norm(logit_hessian(np.zeros(2))) == pytest.approx(0.5)


def test_logit_gradient_matches_finite_differences():
    z, y, h = np.array([0.3, -1.2, 2.]), 1, 1e-6
    numeric = [(logit_loss(z + h * e, y) - logit_loss(z - h * e, y)) / (2 * h) for e in np.eye(3)]
    np.testing.assert_allclose(logit_gradient(z, y), numeric, atol=1e-8)


def test_perturbation_bound_at_uniform_logits():
    result = perturbation_bound_check_logits(np.zeros(3), 0, BoundProbe(radius=0.5, samples=64, steps=50, seed=1))
    assert result.applicable
    assert result.lhs <= 0.5 + 1e-12
    assert result.rhs >= result.pinv_term
    assert result.holds == (result.lhs <= result.rhs)
    assert logit_loss(result.z_star, 0) >= logit_loss(np.zeros(3), 0)


def test_flat_hessian_is_reported():
    z0 = np.array([100., -100.])
    result = perturbation_bound_check_logits(z0, 0, BoundProbe(samples=16, steps=5))
    assert result.holds is None and not result.applicable
    assert result.rhs == np.inf
    with pytest.raises(AssumptionError):
        perturbation_bound_check_logits(z0, 0, BoundProbe(samples=16, steps=5), strict=True)


def test_bound_grows_with_maximizer_slack():
    z0 = np.array([0.4, -0.3, 1.1])
    results = [perturbation_bound_check_logits(z0, 2, BoundProbe(eps=eps, samples=64, steps=30, seed=2))
               for eps in (0., 1e-3, 1e-2, 0.1, 1.)]
    rhs = [r.rhs for r in results]
    assert all(a <= b for a, b in zip(rhs, rhs[1:])), rhs
    assert len({(r.C, r.K, r.pinv_term) for r in results}) == 1


def test_probe_validation():
    with pytest.raises(ValueError):
        BoundProbe(radius=0.)


def test_perturbation_bound_on_model():
    data = gen_blobs(20, d=2, seed=3)
    model = build_model("mlp", (2,), 2, seed=1)
    result = perturbation_bound_check(model, data.images[0], data.labels[0], BoundProbe(samples=32, steps=20))
    assert result.z_star.shape == (2,)
    assert result.lhs <= 1. + 1e-12


def test_covering_trivial_cases():
    points = np.random.default_rng(0).uniform(size=(15, 3))
    distances = np.linalg.norm(points[:, None] - points[None], axis=2)
    assert covering_number(points, distances.max()) == 1
    assert covering_number(points, distances[distances > 0].min() / 2.) == 15
    with pytest.raises(ValueError):
        covering_number(points, 0.)


def minimal_cover(points, gamma):
    distances = np.linalg.norm(points[:, None] - points[None], axis=2) <= gamma
    for size in range(1, len(points) + 1):
        for centres in itertools.combinations(range(len(points)), size):
            if distances[list(centres)].any(axis=0).all():
                return size


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 16), st.floats(0.05, 0.8))
def test_greedy_cover_bounds_minimal_cover(seed, gamma):
    points = np.random.default_rng(seed).uniform(size=(7, 2))
    greedy = covering_number(points, gamma)
    assert minimal_cover(points, gamma) <= greedy <= len(points)
    # centres of a greedy cover are pairwise further apart than gamma, so a cover at gamma / 2 needs as many balls
    assert greedy <= minimal_cover(points, gamma / 2.)


@pytest.mark.parametrize("seed", range(5))
def test_cover_shrinks_as_radius_doubles(seed):
    points = gen_blobs(200, d=2, classes=3, seed=seed).images
    sizes = [covering_number(points, gamma) for gamma in (0.05, 0.1, 0.2, 0.4, 0.8, 1.6, 3.2)]
    assert all(a >= b for a, b in zip(sizes, sizes[1:])), sizes
    assert sizes[0] > sizes[-1]


def test_generalization_bound_hand_value():
    expected = (0.4 + 0.1 * (0.8 + (2 * 1.2 * 0.5 + 1) / 2.) + 2.5 * np.sqrt((2 * 30 * np.log(2) - 2 * np.log(0.05))
                                                                          / 1000) + 1.2 ** 2 / (2. - 0.5))
    assert generalization_bound(**BOUND) == pytest.approx(expected, rel=1e-12)


def test_generalization_bound_sample_size_scaling():
    def root_term(n):
        return generalization_bound(**{**BOUND, "n": n}) - generalization_bound(**{**BOUND, "n": n, "M0": 0.})
    assert root_term(4000) == pytest.approx(root_term(1000) / 2., rel=1e-12)


def test_generalization_bound_limits_and_monotonicity():
    tight = generalization_bound(**{**BOUND, "gamma": 1e-15})
    limit = 0.4 + 2.5 * np.sqrt((2 * 30 * np.log(2) - 2 * np.log(0.05)) / 1000) + 1.2 ** 2 / 1.5
    assert tight == pytest.approx(limit, abs=1e-12)
    assert generalization_bound(**{**BOUND, "gamma": 0.2}) > generalization_bound(**BOUND)
    assert generalization_bound(**{**BOUND, "cover_size": 60}) > generalization_bound(**BOUND)
    assert generalization_bound(**{**BOUND, "p": 0.01}) > generalization_bound(**BOUND)


def test_generalization_bound_preconditions():
    with pytest.raises(AssumptionError):
        generalization_bound(**{**BOUND, "lam": 0.5})
    with pytest.raises(ValueError):
        generalization_bound(**{**BOUND, "p": 1.})
    with pytest.raises(ValueError):
        generalization_bound(**{**BOUND, "n": 0})


def test_bound_from_points_uses_half_radius():
    points = np.random.default_rng(2).uniform(size=(50, 2))
    kwargs = {k: v for k, v in BOUND.items() if k not in ("n", "cover_size")}
    expected = generalization_bound(n=50, cover_size=covering_number(points, 0.05), **kwargs)
    assert generalization_bound_from_points(points, **kwargs) == expected


def test_operation_aliases():
    assert theorem1_check is perturbation_bound_check
    assert theorem2_bound(**BOUND) == generalization_bound(**BOUND)


def test_constants_of_a_constant_model():
    data = gen_blobs(30, d=2, classes=3, seed=0)
    model = build_model("mlp", (2,), 3, init="zeros")
    constants = estimate_constants(model, data.images, data.labels, pairs=200)
    assert constants.M0 == pytest.approx(np.log(3.))
    assert (constants.M1, constants.L0, constants.L1) == (0., 0., 0.)
    assert not constants.certified


def test_constants_of_a_random_model():
    data = gen_blobs(30, d=2, classes=3, seed=0)
    constants = estimate_constants(build_model("mlp", (2,), 3, seed=4), data.images, data.labels, pairs=300,
                                   batch_size=64)
    assert constants.M0 > 0 and constants.M1 > 0 and constants.L0 > 0
