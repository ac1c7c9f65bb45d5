import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pda_lab.attacks import (
    AttackSpec,
    attack_dataset,
    cw_l2,
    evaluate_attack,
    fgsm,
    input_gradient,
    normalize_l2,
    parse_norm,
    per_example_norm,
    pgd_attack,
    project,
)
from pda_lab.data.datasets import gen_blobs
from pda_lab.nn import build_model, evaluate
from pda_lab.training import TrainPlan, natural_train


@pytest.fixture
def cnn():
    return build_model("cnn_small", (1, 8, 8), 3, seed=4)


@pytest.fixture
def batch():
    rng = np.random.default_rng(12)
    return rng.uniform(0.1, 0.9, size=(6, 1, 8, 8)), rng.integers(0, 3, size=6)


def logistic_model(w):
    """Two-class linear model whose logit difference z1 - z0 is w·x."""
    model = build_model("linear", (len(w),), 2, init="zeros")
    model.params["dense0.weight"].data = np.stack([np.zeros(len(w)), w], axis=1)
    return model


def test_fgsm_zero_budget_is_identity(cnn, batch):
    x, y = batch
    np.testing.assert_array_equal(fgsm(cnn, x, y, 0.), x)


def test_fgsm_follows_logistic_gradient_sign():
    w = np.array([0.7, -1.2, 0.3, -0.05])
    x = np.random.default_rng(2).uniform(0.2, 0.8, size=(5, 4))
    y = np.zeros(5, dtype=np.int64)
    out = fgsm(logistic_model(w), x, y, 0.1)
    np.testing.assert_allclose(out, np.clip(x + 0.1 * np.sign(w), 0., 1.), atol=1e-15)


@pytest.mark.parametrize("spec", [
    AttackSpec("fgsm", eps=8 / 255),
    AttackSpec("pgd", norm=np.inf, eps=8 / 255, alpha=2 / 255, steps=10, seed=3),
    AttackSpec("pgd", norm=2., eps=0.5, alpha=0.1, steps=10, seed=3),
])
def test_attacks_respect_budget(cnn, batch, spec):
    x, y = batch
    out = attack_dataset(cnn, x, y, spec)
    assert out.min() >= 0. and out.max() <= 1.
    assert np.all(per_example_norm(out - x, spec.norm) <= spec.eps + 1e-12)


def test_single_step_pgd_equals_fgsm(cnn, batch):
    x, y = batch
    eps = 8 / 255
    spec = AttackSpec("pgd", eps=eps, alpha=eps, steps=1, random_init=False)
    np.testing.assert_array_equal(pgd_attack(cnn, x, y, spec), fgsm(cnn, x, y, eps))


def test_pgd_increases_loss(cnn, batch):
    x, y = batch
    spec = AttackSpec("pgd", eps=16 / 255, alpha=4 / 255, steps=5, random_init=False)
    adv = pgd_attack(cnn, x, y, spec)
    assert evaluate(cnn, adv, y)[0] > evaluate(cnn, x, y)[0]


def test_pgd_random_start_is_seeded(cnn, batch):
    x, y = batch
    spec = AttackSpec("pgd", eps=8 / 255, alpha=2 / 255, steps=3, seed=21)
    np.testing.assert_array_equal(attack_dataset(cnn, x, y, spec, batch_size=4),
                                  attack_dataset(cnn, x, y, spec, batch_size=4))


def test_cw_with_zero_constant_keeps_input(cnn, batch):
    x, y = batch
    np.testing.assert_array_equal(cw_l2(cnn, x, y, c=0., steps=20), x)


def test_cw_on_misclassified_input_keeps_input():
    model = logistic_model(np.array([1., 1.]))
    x = np.array([[0.6, 0.7]])
    np.testing.assert_array_equal(cw_l2(model, x, np.array([0]), c=50., steps=20), x)


def cw_objective(model, x, y, delta, c):
    z = model.forward(x + delta).data[0]
    margin = z[y] - np.max(np.delete(z, y))
    return float(np.sum(delta ** 2) + c * max(margin, 0.))


def test_cw_matches_grid_search():
    model = build_model("linear", (2,), 2, init="zeros")
    model.params["dense0.weight"].data = np.array([[1., 0.], [0., 0.]])
    model.params["dense0.bias"].data = np.array([-0.3, 0.])
    x, y, c = np.array([[0.5, 0.5]]), 0, 10.

    grid = np.linspace(-0.5, 0.5, 201)
    best = min(cw_objective(model, x, y, np.array([[a, b]]), c) for a in grid for b in grid)

    out = cw_l2(model, x, np.array([y]), c=c, steps=300, lr=1e-4)
    found = cw_objective(model, x, y, out - x, c)
    assert found <= best * 1.05
    assert found >= best - 1e-6


def test_cw_max_norm(cnn, batch):
    x, y = batch
    out = cw_l2(cnn, x, y, c=100., steps=10, lr=0.05, max_norm=0.2)
    assert np.all(per_example_norm(out - x, 2.) <= 0.2 + 1e-12)


def test_input_gradient_of_zero_model():
    model = build_model("mlp", (3,), 2, init="zeros")
    np.testing.assert_array_equal(input_gradient(model, np.ones((2, 3)), np.array([0, 1])), np.zeros((2, 3)))


def test_input_gradient_scale(cnn, batch):
    x, y = batch
    np.testing.assert_allclose(input_gradient(cnn, x, y, scale=2.), 2. * input_gradient(cnn, x, y), rtol=1e-12)


def test_normalize_and_project():
    g = np.array([[3., 4.], [0., 0.]])
    np.testing.assert_allclose(normalize_l2(g), [[0.6, 0.8], [0., 0.]])
    x = np.zeros((1, 2))
    np.testing.assert_allclose(project(np.array([[3., 4.]]), x, 1., 2.), [[0.6, 0.8]])
    np.testing.assert_allclose(project(np.array([[3., -4.]]), x, 1., np.inf), [[1., -1.]])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-10., 10.)), st.floats(0.01, 2.),
       st.sampled_from([2., np.inf]))
def test_projection_lands_in_ball(delta, eps, norm):
    x = np.full((3, 5), 0.5)
    projected = project(x + delta, x, eps, norm)
    assert np.all(per_example_norm(projected - x, norm) <= eps * (1. + 1e-12))
    np.testing.assert_allclose(project(projected, x, eps, norm), projected, atol=1e-12)


def test_spec_labels_and_norms():
    assert AttackSpec("fgsm").label == "FGSM"
    assert AttackSpec("pgd", steps=20).label == "PGD-20"
    assert AttackSpec("pgd", norm="l2", steps=7).label == "PGD-7-L2"
    assert AttackSpec("cw").label == "CW-L2"
    assert parse_norm("linf") == np.inf and parse_norm(2) == 2.
    with pytest.raises(ValueError):
        AttackSpec("deepfool")
    with pytest.raises(ValueError):
        parse_norm("l1")


def test_evaluate_attack_reports(cnn, batch):
    x, y = batch
    result = evaluate_attack(cnn, x, y, AttackSpec("fgsm", eps=4 / 255))
    assert result.count == 6
    assert result.attack == "FGSM"
    assert 0. <= result.adversarial_accuracy <= 1.
    assert result.mean_linf <= 4 / 255 + 1e-12


@pytest.fixture(scope="module")
def blob_model():
    data = gen_blobs(300, d=2, classes=2, separation=3., seed=4)
    model, _ = natural_train(build_model("mlp", (2,), 2, seed=1), data,
                             TrainPlan("natural", epochs=5, batch_size=30, learning_rate=0.1, seed=2))
    return model, data


def test_stronger_attacks_raise_the_loss(blob_model):
    model, data = blob_model
    x, y = data.images, data.labels
    clean = evaluate(model, x, y)[0]
    single = evaluate(model, fgsm(model, x, y, 0.3, clip=False), y)[0]
    spec = AttackSpec("pgd", eps=0.3, alpha=0.3 / 4, steps=20, random_init=False, clip=False)
    iterated = evaluate(model, pgd_attack(model, x, y, spec), y)[0]
    assert clean <= single <= iterated + 1e-3, (clean, single, iterated)


def test_pgd_loss_grows_with_steps(blob_model):
    model, data = blob_model
    x, y = data.images, data.labels
    losses = []
    for steps in (1, 5, 20):
        spec = AttackSpec("pgd", eps=0.3, alpha=0.3 / 4, steps=steps, random_init=False, clip=False)
        losses.append(evaluate(model, pgd_attack(model, x, y, spec), y)[0])
    assert all(a <= b + 1e-3 for a, b in zip(losses, losses[1:])), losses


def test_unclipped_attacks_leave_the_unit_box():
    w = np.array([1., -1.])
    x, y = np.array([[0.95, 0.05]]), np.array([0])
    np.testing.assert_allclose(fgsm(logistic_model(w), x, y, 0.2, clip=False), [[1.15, -0.15]], atol=1e-15)
    spec = AttackSpec("pgd", eps=0.2, alpha=0.1, steps=3, random_init=False, clip=False)
    np.testing.assert_allclose(pgd_attack(logistic_model(w), x, y, spec), [[1.15, -0.15]], atol=1e-15)
