"""
Desk-scale reproductions of the robustness orderings. Slow; run with `pytest -m experiment`.
"""
import os

import numpy as np
import pytest

from pda_lab.analysis.theory import BoundProbe, perturbation_bound_check
from pda_lab.attacks import AttackSpec, attack_dataset, evaluate_attack
from pda_lab.cli import cli_dispatch
from pda_lab.config import derive_seed
from pda_lab.corruptions import build_corruption_suite, load_corruption_suite
from pda_lab.data.datasets import gen_blobs, gen_shapes
from pda_lab.metrics import build_report, category_set, evaluate_error_table, mixed_test
from pda_lab.nn import build_model, evaluate
from pda_lab.training import TrainPlan, train

pytestmark = pytest.mark.experiment

EPS = 8 / 255
PDA_EPS = 2.


@pytest.fixture(scope="module")
def shapes():
    data = gen_shapes(2500, size=16, seed=1)
    train_set = data.subset(range(2000))
    test_set = data.subset(range(2000, 2500), split="test")
    return train_set, test_set


@pytest.fixture(scope="module")
def trained(shapes):
    train_set, _ = shapes
    plans = {
        "natural": TrainPlan("natural", arch="cnn_small", epochs=14, batch_size=64, steps_per_batch=3, seed=0),
        "pda": TrainPlan("pda", arch="cnn_small", epochs=14, batch_size=64, k=3, eps=PDA_EPS, seed=0),
        "pgd_at": TrainPlan("pgd_at", arch="cnn_small", epochs=14, batch_size=64, eps=EPS, alpha=2 / 255, steps=5,
                            seed=0),
    }
    models, histories = {}, {}
    for name, plan in plans.items():
        model = build_model(plan.arch, train_set.input_shape, train_set.num_classes, seed=derive_seed(0, "init"))
        models[name], histories[name] = train(model, train_set, plan)
    return models, histories


@pytest.fixture(scope="module")
def suite(shapes, tmp_path_factory):
    _, test_set = shapes
    out = str(tmp_path_factory.mktemp("suite"))
    build_corruption_suite(test_set, seed=2, out_dir=out)
    return load_corruption_suite(out)


def pgd20(model, data):
    spec = AttackSpec("pgd", eps=EPS, alpha=2 / 255, steps=20, seed=5)
    return evaluate_attack(model, data.images, data.labels, spec)


def test_cnn_learns_shapes(shapes, trained):
    _, test_set = shapes
    models, _ = trained
    assert evaluate(models["natural"], test_set.images, test_set.labels)[1] >= 0.95


def test_adversarial_training_orderings(shapes, trained):
    _, test_set = shapes
    models, _ = trained
    natural, pda, pgd_at = (pgd20(models[k], test_set) for k in ("natural", "pda", "pgd_at"))
    assert pda.adversarial_accuracy >= natural.adversarial_accuracy + 0.15
    assert pgd_at.adversarial_accuracy >= natural.adversarial_accuracy + 0.15
    assert pda.clean_accuracy >= pgd_at.clean_accuracy - 0.02


def test_pda_lowers_corruption_error(trained, suite):
    models, _ = trained
    baseline = evaluate_error_table(models["natural"], suite, "Natural")
    assert build_report(baseline, baseline).mce == 1.
    assert build_report(evaluate_error_table(models["pda"], suite, "PDA-3-2.0"), baseline).mce < 1.


def test_pda_is_cheaper_than_pgd_training(trained):
    _, histories = trained
    pda = np.mean([r.wall_ms for r in histories["pda"].records[:5]])
    pgd_at = np.mean([r.wall_ms for r in histories["pgd_at"].records[:5]])
    assert pda < pgd_at


def test_mixed_test_ordering(trained, suite):
    models, _ = trained
    clean = suite.clean
    corrupted = category_set(suite)
    spec = AttackSpec("pgd", eps=4 / 255, alpha=1 / 255, steps=20, seed=7)
    accuracy = {}
    for name in ("natural", "pda"):
        model = models[name]
        adversarial = clean.with_images(attack_dataset(model, clean.images, clean.labels, spec))
        accuracy[name] = mixed_test(model, clean, adversarial, corrupted, seed=3)
    assert accuracy["pda"] > accuracy["natural"]


def test_damage_grows_with_severity_on_a_sample(suite):
    clean = suite.clean.images[:100]
    for kind in suite.kinds:
        errors = [np.mean((suite.get(kind, s).images[:100] - clean) ** 2) for s in range(1, 6)]
        assert all(a < b for a, b in zip(errors, errors[1:])), (kind, errors)


def test_perturbation_bound_on_trained_blobs():
    data = gen_blobs(400, d=2, classes=3, separation=6., seed=11)
    model = build_model("mlp", (2,), 3, seed=1)
    model, _ = train(model, data, TrainPlan("natural", epochs=10, batch_size=32, learning_rate=0.1, seed=1))
    anchors = np.random.default_rng(0).permutation(len(data))[:50]
    checked = 0
    for i in anchors:
        result = perturbation_bound_check(model, data.images[i], int(data.labels[i]), BoundProbe(seed=int(i)))
        if result.C >= 1e-3:
            checked += 1
            assert result.holds, (i, result.lhs, result.rhs)
    assert checked > 0


def test_command_line_corruption_ordering(tmp_path):
    paths = {name: str(tmp_path / name) for name in ("train.bin", "test.bin", "natural.cfg", "pda.cfg", "natural",
                                                     "pda", "suite", "report.csv")}
    with open(paths["natural.cfg"], "w") as f:
        f.write("strategy=natural\narch=cnn_small\nepochs=14\nbatch=64\nsteps_per_batch=3\n")
    with open(paths["pda.cfg"], "w") as f:
        f.write("strategy=pda\narch=cnn_small\nepochs=14\nbatch=64\nk=3\neps=2.0\n")
    assert cli_dispatch(["gen-data", "--data", "shapes:n=2000,size=16,seed=1", "--out", paths["train.bin"]]) == 0
    assert cli_dispatch(["gen-data", "--data", "shapes:n=500,size=16,seed=2", "--split", "test",
                         "--out", paths["test.bin"]]) == 0
    for name in ("natural", "pda"):
        assert cli_dispatch(["train", "--plan", paths[name + ".cfg"], "--data", paths["train.bin"],
                             "--out", paths[name]]) == 0
    assert cli_dispatch(["corrupt", "--data", paths["test.bin"], "--out", paths["suite"], "--seed", "2"]) == 0
    assert cli_dispatch(["eval-corruption", "--model", paths["pda"], "--baseline", paths["natural"],
                         "--suite", paths["suite"], "--out", paths["report.csv"]]) == 0
    assert os.path.exists(paths["report.csv"])
    with open(paths["report.csv"]) as f:
        rows = [line.split(",") for line in f.read().splitlines()]
    mce = [float(r[4]) for r in rows if r[0] == "mCE"]
    assert len(mce) == 1 and mce[0] < 1.
