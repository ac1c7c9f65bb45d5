"""
White-box adversarial example generators: FGSM, PGD (L∞ and L2) and a simplified C&W L2 attack.

Image inputs live on the [0, 1] scale and are clipped back to it after every step; feature-vector inputs (blob data)
are attacked with `clip=False`. Budgets `eps` and step sizes `alpha` are absolute here; the CLI converts its /255
flags.
"""
from typing import Optional

from dataclasses import dataclass

import numpy as np

from pda_lab.config import derive_seed
from pda_lab.nn import Model, predict
from pda_lab.tensor import Tape, Tensor, backward, relu, softmax_logloss, square

import logging
logger = logging.getLogger(__name__)


FAMILIES = ("fgsm", "pgd", "cw_l2")
NORM_TOLERANCE = 1e-12


def parse_norm(value: object) -> float:
    """Accepts 'inf', 'linf', 2, '2', 'l2'."""
    text = str(value).lower().lstrip("l")
    if text in ("inf", "infinity"):
        return np.inf
    if text in ("2", "2.0"):
        return 2.
    raise ValueError("unsupported norm '{}' (use 2 or inf)".format(value))


@dataclass
class AttackSpec:
    """
    Attack description.

    :param family: "fgsm", "pgd" or "cw_l2"
    :param norm: 2 or np.inf (fgsm is always L∞)
    :param eps: budget on the [0, 1] pixel scale
    :param alpha: step size of pgd
    :param steps: iteration count (fgsm: forced to 1)
    :param c: C&W trade-off constant
    :param lr: C&W gradient-descent step size
    :param random_init: pgd starts from a uniform point of the ε-ball
    :param seed: random start seed
    :param clip: keep adversarial inputs in [0, 1]
    """
    family: str = "pgd"
    norm: float = np.inf
    eps: float = 8. / 255.
    alpha: float = 2. / 255.
    steps: int = 20
    c: float = 500.
    lr: float = 0.01
    random_init: bool = True
    seed: int = 0
    clip: bool = True

    def __post_init__(self):
        if self.family == "cw":
            self.family = "cw_l2"
        if self.family not in FAMILIES:
            raise ValueError("unknown attack family '{}' (choose from {})".format(self.family, ", ".join(FAMILIES)))
        self.norm = parse_norm(self.norm) if not isinstance(self.norm, float) else self.norm
        if self.norm not in (2., np.inf):
            raise ValueError("unsupported norm {}".format(self.norm))
        if self.eps < 0:
            raise ValueError("eps must be non-negative, got {}".format(self.eps))
        if self.family == "fgsm":
            self.steps = 1
            self.norm = np.inf
        if self.steps < 1:
            raise ValueError("steps must be >= 1, got {}".format(self.steps))
        if self.family == "pgd" and self.alpha <= 0:
            raise ValueError("alpha must be positive, got {}".format(self.alpha))
        if self.family == "cw_l2" and (self.c < 0 or self.lr <= 0):
            raise ValueError("C&W needs c >= 0 and lr > 0, got c={}, lr={}".format(self.c, self.lr))

    @property
    def label(self) -> str:
        if self.family == "fgsm":
            return "FGSM"
        if self.family == "pgd":
            return "PGD-{}".format(self.steps) + ("" if self.norm == np.inf else "-L2")
        return "CW-L2"


def input_gradient(model: Model, x: np.ndarray, y: np.ndarray, scale: float = 1.) -> np.ndarray:
    """
    Exact gradient of the (scaled) mean log-loss with respect to the input batch.

    :param model: classifier
    :param x: input batch
    :param y: labels
    :param scale: constant multiplying the loss
    :return: array shaped like `x`
    """
    with Tape() as tape:
        xt = Tensor(x)
        tape.watch(xt)
        loss = softmax_logloss(model.forward(xt), y)
        if scale != 1.:
            loss = loss * scale
        grads = backward(loss)
    return grads[xt]


def per_example_norm(v: np.ndarray, norm: float = 2.) -> np.ndarray:
    flat = v.reshape(len(v), -1)
    if norm == np.inf:
        return np.abs(flat).max(axis=1)
    return np.sqrt((flat * flat).sum(axis=1))


def _expand(per_example: np.ndarray, like: np.ndarray) -> np.ndarray:
    return per_example.reshape((-1,) + (1,) * (like.ndim - 1))


def normalize_l2(g: np.ndarray, floor: float = NORM_TOLERANCE) -> np.ndarray:
    """
    Per-example unit-L2 rescaling; examples with norm below `floor` map to zero.
    """
    norms = per_example_norm(g, 2.)
    safe = np.where(norms < floor, 1., norms)
    return np.where(_expand(norms < floor, g), 0., g / _expand(safe, g))


def project(x_adv: np.ndarray, x: np.ndarray, eps: float, norm: float) -> np.ndarray:
    """Project onto the ε-ball of the given norm around `x`."""
    if norm == np.inf:
        return np.clip(x_adv, x - eps, x + eps)
    delta = x_adv - x
    norms = per_example_norm(delta, 2.)
    factor = np.where(norms > eps, eps / np.where(norms > 0, norms, 1.), 1.)
    return x + delta * _expand(factor, delta)


def random_start(x: np.ndarray, eps: float, norm: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample of the ε-ball around each example."""
    if norm == np.inf:
        return x + rng.uniform(-eps, eps, size=x.shape)
    direction = normalize_l2(rng.standard_normal(x.shape))
    dim = x[0].size
    radius = eps * rng.uniform(0., 1., size=len(x)) ** (1. / dim)
    return x + direction * _expand(radius, x)


def _in_domain(x: np.ndarray, clip: bool) -> np.ndarray:
    return np.clip(x, 0., 1.) if clip else x


def fgsm(model: Model, x: np.ndarray, y: np.ndarray, eps: float, clip: bool = True) -> np.ndarray:
    """
    Fast Gradient Sign Method: x' = clip(x + ε sign(∇_x ℓ), 0, 1).
    """
    x = np.asarray(x, dtype=np.float64)
    g = input_gradient(model, x, y)
    return _in_domain(x + eps * np.sign(g), clip)


def pgd_attack(model: Model, x: np.ndarray, y: np.ndarray, spec: AttackSpec) -> np.ndarray:
    """
    Projected gradient ascent: `spec.steps` steps of α·sign(g) (L∞) or α·g/‖g‖₂ (L2), each followed by
    projection onto the ε-ball around `x` and, when `spec.clip` is set, clipping to [0, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    if spec.random_init and spec.eps > 0:
        rng = np.random.default_rng(spec.seed)
        x_adv = _in_domain(project(random_start(x, spec.eps, spec.norm, rng), x, spec.eps, spec.norm), spec.clip)
    else:
        x_adv = x.copy()
    for _ in range(spec.steps):
        g = input_gradient(model, x_adv, y)
        if spec.norm == np.inf:
            x_adv = x_adv + spec.alpha * np.sign(g)
        else:
            x_adv = x_adv + spec.alpha * normalize_l2(g)
        x_adv = _in_domain(project(x_adv, x, spec.eps, spec.norm), spec.clip)
    return x_adv


def _cw_objective(model: Model, x: np.ndarray, delta: Tensor, y: np.ndarray, c: float) -> Tensor:
    """Per-example ‖δ‖₂² + c·max(z_y − max_{i≠y} z_i, 0)."""
    z = model.forward(Tensor(x) + delta)
    onehot = np.eye(z.shape[1])[y]
    true_logit = (z * onehot).sum(axis=1)
    best_other = (z + onehot * -1e9).max(axis=1)
    distortion = square(delta).reshape(len(x), -1).sum(axis=1)
    return distortion + relu(true_logit - best_other) * c


def cw_l2(model: Model, x: np.ndarray, y: np.ndarray, c: float = 500., steps: int = 100, lr: float = 0.01,
          max_norm: Optional[float] = None, clip: bool = True) -> np.ndarray:
    """
    Simplified Carlini-Wagner L2 attack: gradient descent on ‖δ‖₂² + c·max(z_y − max_{i≠y} z_i, 0) with a
    fixed constant `c` (no binary search) and, when `clip` is set, direct clipping of x + δ to [0, 1] (no tanh
    reparameterisation). The best iterate per example (lowest objective, δ = 0 included) is returned.

    :param max_norm: optional L2 radius onto which δ is projected after each step
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    delta = np.zeros_like(x)
    best_delta = delta.copy()
    best_objective = np.full(len(x), np.inf)
    for step in range(steps + 1):
        with Tape() as tape:
            dt = Tensor(delta)
            tape.watch(dt)
            objective = _cw_objective(model, x, dt, y, c)
            grads = backward(objective.sum())
        improved = objective.data < best_objective
        best_objective = np.where(improved, objective.data, best_objective)
        best_delta[improved] = delta[improved]
        if step == steps:
            break
        delta = delta - lr * grads[dt]
        delta = _in_domain(x + delta, clip) - x
        if max_norm is not None:
            delta = project(x + delta, x, max_norm, 2.) - x
    logger.debug("C&W: mean best objective {:.6f}".format(float(best_objective.mean())))
    return x + best_delta


def run_attack(model: Model, x: np.ndarray, y: np.ndarray, spec: AttackSpec) -> np.ndarray:
    if spec.family == "fgsm":
        return fgsm(model, x, y, spec.eps, spec.clip)
    if spec.family == "pgd":
        return pgd_attack(model, x, y, spec)
    return cw_l2(model, x, y, spec.c, spec.steps, spec.lr, clip=spec.clip)


@dataclass
class AttackResult:
    attack: str
    eps: float
    clean_accuracy: float
    adversarial_accuracy: float
    mean_l2: float
    mean_linf: float
    count: int


def attack_dataset(model: Model, images: np.ndarray, labels: np.ndarray, spec: AttackSpec,
                   batch_size: int = 256) -> np.ndarray:
    """
    Adversarial copy of a whole array; batch `b` uses the random-start seed derive_seed(spec.seed, "batch<b>").
    """
    out = []
    for b, start in enumerate(range(0, len(images), batch_size)):
        batch_spec = AttackSpec(**{**spec.__dict__, "seed": derive_seed(spec.seed, "batch{}".format(b))})
        out.append(run_attack(model, images[start:start + batch_size], labels[start:start + batch_size],
                              batch_spec))
    return np.concatenate(out, axis=0)


def evaluate_attack(model: Model, images: np.ndarray, labels: np.ndarray, spec: AttackSpec,
                    batch_size: int = 256) -> AttackResult:
    labels = np.asarray(labels)
    adversarial = attack_dataset(model, images, labels, spec, batch_size)
    clean_acc = float(np.mean(predict(model, images, batch_size) == labels))
    adv_acc = float(np.mean(predict(model, adversarial, batch_size) == labels))
    diff = adversarial - images
    result = AttackResult(spec.label, spec.eps, clean_acc, adv_acc, float(per_example_norm(diff, 2.).mean()),
                          float(per_example_norm(diff, np.inf).mean()), len(images))
    logger.info("{} (eps={:.6f}): clean accuracy {:.4f}, adversarial accuracy {:.4f}".format(
        result.attack, spec.eps, clean_acc, adv_acc))
    return result
