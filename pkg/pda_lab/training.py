"""
Training strategies behind one interface: natural training, Gaussian data augmentation (GDA), PGD adversarial
training (PGD-AT) and Progressive Data Augmentation (PDA).

PDA, per batch and epoch t::

    δ⁰ = 0, x⁰ = clean batch, g = ∇_x ℓ(θ; x⁰, y)
    for j = 1..k:
        δ^j = (1 - λ) δ^{j-1} + (ε^t / k) g / ‖g‖₂          (per example)
        x^j = clip(x^{j-1} + δ^j, 0, 1)                  (image data)
        (∇_θ, g) = ∇ ℓ(θ; x^j, y)                        (one backward sweep)
        θ  ← θ − η ∇_θ

with ε^t following the palindromic schedule {0, ε/3, ε/2, ε, ε/2, ε/3, 0} over seven contiguous epoch segments.
The PDA magnitude ε is an L2 norm per example (PDA-3-2.0 means ε = 2.0), while PGD budgets and step sizes are
L∞ pixel values written in /255 units (PGD-5-1 means α = 1/255).
"""
from typing import Callable, List, Mapping, Optional, Sequence, Tuple

from dataclasses import dataclass, field, asdict

import csv
import re
import time

import numpy as np

from pda_lab.attacks import AttackSpec, input_gradient, normalize_l2, pgd_attack, evaluate_attack
from pda_lab.config import derive_seed, parse_eps, read_config, rng_for
from pda_lab.data.datasets import Dataset
from pda_lab.nn import SGD, Model, evaluate, joint_gradients, loss_and_gradients, sgd_step
from pda_lab.tensor import softmax_logloss

import logging
logger = logging.getLogger(__name__)


STRATEGIES = ("natural", "gda", "pgd_at", "pda")
SCHEDULE_FRACTIONS = (0., 1. / 3., 1. / 2., 1., 1. / 2., 1. / 3., 0.)
DEFAULT_PDA_EPS = 2.
DEFAULT_PGD_EPS = 8. / 255.

# plan.cfg keys
PLAN_KEYS = ("strategy", "arch", "epochs", "batch", "lr", "momentum", "seed", "eps", "lambda", "k", "sigma",
             "alpha", "steps", "steps_per_batch", "clip", "track_eps")

StepCallback = Callable[[int, int, int, np.ndarray, np.ndarray], None]


@dataclass
class TrainPlan:
    """
    Training strategy descriptor. Only the fields of the chosen strategy are used.

    :param strategy: "natural", "gda", "pgd_at" or "pda"
    :param arch: model architecture used by the CLI
    :param epochs: number of epochs T
    :param batch_size: mini-batch size
    :param learning_rate: SGD step size η
    :param momentum: SGD momentum
    :param seed: seed for shuffling, noise and attack starts
    :param eps: pda overall L2 magnitude ε per example (default 2.0) or pgd_at L∞ budget (default 8/255)
    :param lam: pda decay/regularisation factor λ in [0, 1]
    :param k: pda progressive steps per batch
    :param sigma: gda noise standard deviation
    :param alpha: pgd_at step size
    :param steps: pgd_at attack steps
    :param steps_per_batch: natural training optimizer steps per batch (k matches pda)
    :param clip: clip augmented and adversarial training inputs to [0, 1] (image data only)
    :param track_eps: if > 0, record PGD-20 accuracy at this budget on the evaluation set after each epoch
    """
    strategy: str = "natural"
    arch: str = "mlp"
    epochs: int = 14
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.
    seed: int = 0
    eps: Optional[float] = None
    lam: float = 1.
    k: int = 3
    sigma: float = 0.1
    alpha: float = 1. / 255.
    steps: int = 5
    steps_per_batch: int = 1
    clip: bool = True
    track_eps: float = 0.

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError("unknown strategy '{}' (choose from {})".format(self.strategy, ", ".join(STRATEGIES)))
        if self.eps is None:
            self.eps = DEFAULT_PDA_EPS if self.strategy == "pda" else DEFAULT_PGD_EPS
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1, got {}".format(self.epochs))
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1, got {}".format(self.batch_size))
        if self.k < 1:
            raise ValueError("pda k must be >= 1, got {}".format(self.k))
        if not 0. <= self.lam <= 1.:
            raise ValueError("pda lambda must lie in [0, 1], got {}".format(self.lam))
        if self.sigma < 0:
            raise ValueError("gda sigma must be >= 0, got {}".format(self.sigma))
        if self.eps < 0:
            raise ValueError("eps must be >= 0, got {}".format(self.eps))
        if self.steps < 1 or self.steps_per_batch < 1:
            raise ValueError("step counts must be >= 1")

    @property
    def name(self) -> str:
        """Model name in the PDA-k-ε / PGD-k-α / GDA-σ / Natural notation (ε in L2 units, α in /255 units)."""
        if self.strategy == "pda":
            return "PDA-{}-{}".format(self.k, _format_magnitude(self.eps))
        if self.strategy == "pgd_at":
            return "PGD-{}-{}".format(self.steps, _format_units(self.alpha))
        if self.strategy == "gda":
            return "GDA-{:g}".format(self.sigma)
        return "Natural"

    @classmethod
    def from_name(cls, name: str, **kwargs) -> "TrainPlan":
        """
        Parse "PDA-3-2.0", "PGD-5-1", "GDA-0.1" or "Natural". The PDA magnitude is read as an L2 norm as written;
        the PGD step size follows :func:`pda_lab.config.parse_eps`.
        """
        m = re.fullmatch(r"(?i)(pda|pgd|gda|natural)(?:-([0-9.]+))?(?:-([0-9.]+))?", name.strip())
        if m is None:
            raise ValueError("cannot parse plan name '{}'".format(name))
        kind, first, second = m.group(1).lower(), m.group(2), m.group(3)
        if kind == "natural":
            return cls(strategy="natural", **kwargs)
        if kind == "gda":
            if first is None or second is not None:
                raise ValueError("GDA names look like GDA-<sigma>, got '{}'".format(name))
            return cls(strategy="gda", sigma=float(first), **kwargs)
        if first is None or second is None:
            raise ValueError("{} names look like {}-<k>-<magnitude>, got '{}'".format(kind.upper(), kind.upper(),
                                                                                    name))
        if kind == "pda":
            return cls(strategy="pda", k=int(first), eps=float(second), **kwargs)
        alpha = parse_eps(second)
        return cls(strategy="pgd_at", steps=int(first), alpha=alpha, **kwargs)

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "TrainPlan":
        """
        Plan from plan.cfg keys. `eps` is an L2 magnitude for pda and a /255-style budget otherwise.
        """
        eps_convert = float if str(values.get("strategy", "")).strip().lower() == "pda" else parse_eps
        converters = {
            "strategy": ("strategy", str), "arch": ("arch", str), "epochs": ("epochs", int),
            "batch": ("batch_size", int), "lr": ("learning_rate", float), "momentum": ("momentum", float),
            "seed": ("seed", int), "eps": ("eps", eps_convert), "lambda": ("lam", float), "k": ("k", int),
            "sigma": ("sigma", float), "alpha": ("alpha", parse_eps), "steps": ("steps", int),
            "steps_per_batch": ("steps_per_batch", int), "clip": ("clip", _parse_bool),
            "track_eps": ("track_eps", parse_eps),
        }
        kwargs = dict()
        for key, value in values.items():
            if key not in converters:
                raise ValueError("unknown plan key '{}'".format(key))
            attr, convert = converters[key]
            try:
                kwargs[attr] = convert(value)
            except ValueError:
                raise ValueError("bad value for plan key '{}': '{}'".format(key, value))
        return cls(**kwargs)

    @classmethod
    def from_config(cls, path: str) -> "TrainPlan":
        return cls.from_mapping(read_config(path, PLAN_KEYS))


def _format_units(value: float) -> str:
    return "{:g}".format(round(value * 255., 6))


def _format_magnitude(value: float) -> str:
    text = "{:g}".format(round(value, 6))
    return text if any(c in text for c in ".e") else text + ".0"


def _parse_bool(value: str) -> bool:
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(value)


@dataclass
class EpochRecord:
    epoch: int
    eps_t: float
    clean_loss: float
    clean_acc: float
    wall_ms: float
    attack_acc: Optional[float] = None


@dataclass
class TrainingHistory:
    plan_name: str
    records: List[EpochRecord] = field(default_factory=list)

    def write_csv(self, path: str):
        """Columns: epoch, eps_t, clean_loss, clean_acc, wall_ms (+ attack_acc when tracked)."""
        tracked = any(r.attack_acc is not None for r in self.records)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            header = ["epoch", "eps_t", "clean_loss", "clean_acc", "wall_ms"] + (["attack_acc"] if tracked else [])
            writer.writerow(header)
            for r in self.records:
                row = [r.epoch, "{:.6f}".format(r.eps_t), "{:.6f}".format(r.clean_loss),
                       "{:.6f}".format(r.clean_acc), "{:.1f}".format(r.wall_ms)]
                if tracked:
                    row.append("" if r.attack_acc is None else "{:.6f}".format(r.attack_acc))
                writer.writerow(row)

    def mean_wall_ms(self) -> float:
        return float(np.mean([r.wall_ms for r in self.records])) if self.records else 0.


def schedule_segments(T: int) -> List[int]:
    """
    Lengths of the seven contiguous schedule segments covering T epochs; the first T mod 7 are one epoch longer.
    For T < 7 the trailing segments are empty.

    The sequence of segment values is palindromic for every T. The per-epoch sequence is palindromic only when
    T is a multiple of 7, since the extra epochs go to the leading segments (T = 8 gives 0, 0, ε/3, ε/2, ε, ε/2,
    ε/3, 0).
    """
    if T < 1:
        raise ValueError("number of epochs must be >= 1, got {}".format(T))
    base, extra = divmod(T, len(SCHEDULE_FRACTIONS))
    return [base + (1 if i < extra else 0) for i in range(len(SCHEDULE_FRACTIONS))]


def epsilon_schedule(t: int, T: int, eps: float) -> float:
    """
    Perturbation magnitude ε^t of epoch t (0-based) out of T.
    """
    segments = schedule_segments(T)
    if not 0 <= t < T:
        raise ValueError("epoch index {} outside [0, {})".format(t, T))
    end = 0
    for fraction, length in zip(SCHEDULE_FRACTIONS, segments):
        end += length
        if t < end:
            return eps * fraction
    raise AssertionError("unreachable")


def schedule_values(T: int, eps: float) -> List[float]:
    return [epsilon_schedule(t, T, eps) for t in range(T)]


def pda_delta_update(delta_prev: np.ndarray, grad_x: np.ndarray, eps_t: float, k: int, lam: float) -> np.ndarray:
    """
    Progressive perturbation update δ = (1 − λ) δ_prev + (ε^t / k) g / ‖g‖₂ with the norm taken per example;
    an example whose gradient norm is below 1e-12 contributes a zero step.
    """
    delta_prev = np.asarray(delta_prev, dtype=np.float64)
    grad_x = np.asarray(grad_x, dtype=np.float64)
    if delta_prev.shape != grad_x.shape:
        raise ValueError("shape mismatch in pda_delta_update: {} vs {}".format(delta_prev.shape, grad_x.shape))
    return (1. - lam) * delta_prev + (eps_t / k) * normalize_l2(grad_x)


def surrogate_loss(model: Model, x: np.ndarray, y: np.ndarray, delta: np.ndarray, lam: float) -> float:
    """
    ℓ(θ; x + δ, y) − (λ / 2) ‖δ‖₂², both terms averaged over the batch.
    """
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != x.shape:
        raise ValueError("shape mismatch in surrogate_loss: {} vs {}".format(x.shape, delta.shape))
    loss = softmax_logloss(model.forward(x + delta), y).item()
    penalty = float(np.mean((delta.reshape(len(delta), -1) ** 2).sum(axis=1)))
    return loss - 0.5 * lam * penalty


def gaussian_augment(x: np.ndarray, sigma: float, rng: np.random.Generator, clip: bool = True) -> np.ndarray:
    """clip(x + n, 0, 1) with n ~ N(0, σ² I); `clip=False` leaves x + n unbounded."""
    noisy = x + rng.normal(0., sigma, size=x.shape)
    return np.clip(noisy, 0., 1.) if clip else noisy


def _clips(plan: TrainPlan, data: Dataset) -> bool:
    return plan.clip and data.bounded


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _epoch_loop(model: Model, data: Dataset, plan: TrainPlan,
                batch_fn: Callable[[int, int, np.ndarray, np.ndarray, SGD], None],
                eval_data: Optional[Dataset] = None) -> TrainingHistory:
    opt = SGD(plan.learning_rate, plan.momentum)
    shuffle_rng = rng_for(plan.seed, "shuffle")
    history = TrainingHistory(plan.name)
    for epoch in range(plan.epochs):
        start = time.perf_counter()
        for b, index in enumerate(_batches(len(data), plan.batch_size, shuffle_rng)):
            batch_fn(epoch, b, data.images[index], data.labels[index], opt)
        wall_ms = 1e3 * (time.perf_counter() - start)
        loss, acc = evaluate(model, data.images, data.labels)
        eps_t = epsilon_schedule(epoch, plan.epochs, plan.eps) if plan.strategy == "pda" else \
            (plan.eps if plan.strategy == "pgd_at" else 0.)
        record = EpochRecord(epoch, eps_t, loss, acc, wall_ms)
        if plan.track_eps > 0 and eval_data is not None:
            spec = AttackSpec("pgd", eps=plan.track_eps, alpha=plan.track_eps / 4., steps=20,
                              seed=derive_seed(plan.seed, "track{}".format(epoch)), clip=eval_data.bounded)
            record.attack_acc = evaluate_attack(model, eval_data.images, eval_data.labels, spec).adversarial_accuracy
        history.records.append(record)
        logger.info("{} epoch {}/{}: eps_t {:.5f}, clean loss {:.4f}, clean acc {:.4f}, {:.0f} ms".format(
            plan.name, epoch + 1, plan.epochs, eps_t, loss, acc, wall_ms))
    return history


def natural_train(model: Model, data: Dataset, plan: TrainPlan,
                  eval_data: Optional[Dataset] = None) -> Tuple[Model, TrainingHistory]:
    """
    Plain empirical-risk minimisation; `plan.steps_per_batch` optimizer steps on each batch.
    """
    def batch_fn(epoch, b, x, y, opt):
        for _ in range(plan.steps_per_batch):
            _, grads = loss_and_gradients(model, x, y)
            sgd_step(opt, model, grads)
    return model, _epoch_loop(model, data, plan, batch_fn, eval_data)


def gda_train(model: Model, data: Dataset, plan: TrainPlan,
              eval_data: Optional[Dataset] = None) -> Tuple[Model, TrainingHistory]:
    """
    Each batch is trained on clip(x + n, 0, 1), n ~ N(0, σ² I) drawn fresh per batch from the "gda" stream.
    """
    if plan.strategy != "gda":
        raise ValueError("gda_train needs a gda plan, got '{}'".format(plan.strategy))
    noise_rng = rng_for(plan.seed, "gda")
    clip = _clips(plan, data)

    def batch_fn(epoch, b, x, y, opt):
        _, grads = loss_and_gradients(model, gaussian_augment(x, plan.sigma, noise_rng, clip), y)
        sgd_step(opt, model, grads)
    return model, _epoch_loop(model, data, plan, batch_fn, eval_data)


def pgd_at_train(model: Model, data: Dataset, plan: TrainPlan,
                 eval_data: Optional[Dataset] = None) -> Tuple[Model, TrainingHistory]:
    """
    Each batch is replaced by a PGD (L∞, random start) adversarial batch against the current θ, then one step.
    """
    if plan.strategy != "pgd_at":
        raise ValueError("pgd_at_train needs a pgd_at plan, got '{}'".format(plan.strategy))
    clip = _clips(plan, data)

    def batch_fn(epoch, b, x, y, opt):
        spec = AttackSpec("pgd", eps=plan.eps, alpha=plan.alpha, steps=plan.steps, random_init=True,
                          seed=derive_seed(plan.seed, "pgd_at/{}/{}".format(epoch, b)), clip=clip)
        _, grads = loss_and_gradients(model, pgd_attack(model, x, y, spec), y)
        sgd_step(opt, model, grads)
    return model, _epoch_loop(model, data, plan, batch_fn, eval_data)


def pda_train(model: Model, data: Dataset, plan: TrainPlan, eval_data: Optional[Dataset] = None,
              step_callback: Optional[StepCallback] = None) -> Tuple[Model, TrainingHistory]:
    """
    Progressive Data Augmentation: k progressive perturbation updates per batch, each followed by a parameter
    update on the augmented batch.

    One backward sweep per progressive step yields both the parameter gradient at x^j and the input gradient
    that drives step j + 1; that input gradient is therefore taken at θ before the j-th parameter update. Only
    the first step of a batch pays for a separate input-gradient pass.

    :param step_callback: called as `step_callback(epoch, batch, j, x_j, delta_j)` after each progressive step
    """
    if plan.strategy != "pda":
        raise ValueError("pda_train needs a pda plan, got '{}'".format(plan.strategy))
    debug = logger.isEnabledFor(logging.DEBUG)
    clip = _clips(plan, data)

    def batch_fn(epoch, b, x, y, opt):
        eps_t = epsilon_schedule(epoch, plan.epochs, plan.eps)
        delta = np.zeros_like(x)
        x_prev = x
        g = input_gradient(model, x, y)
        for j in range(1, plan.k + 1):
            delta = pda_delta_update(delta, g, eps_t, plan.k, plan.lam)
            x_j = x_prev + delta
            if clip:
                x_j = np.clip(x_j, 0., 1.)
            if step_callback is not None:
                step_callback(epoch, b, j, x_j, delta)
            if debug:
                logger.debug("epoch {} batch {} step {}: surrogate loss {:.6f}".format(
                    epoch, b, j, surrogate_loss(model, x, y, x_j - x, plan.lam)))
            _, grads, g = joint_gradients(model, x_j, y)
            sgd_step(opt, model, grads)
            x_prev = x_j
    return model, _epoch_loop(model, data, plan, batch_fn, eval_data)


def train(model: Model, data: Dataset, plan: TrainPlan,
          eval_data: Optional[Dataset] = None) -> Tuple[Model, TrainingHistory]:
    """Dispatch on `plan.strategy`."""
    logger.info("training {} ({} model) on {} examples for {} epochs".format(plan.name, model.arch, len(data),
                                                                           plan.epochs))
    if plan.strategy == "pda":
        return pda_train(model, data, plan, eval_data)
    if plan.strategy == "gda":
        return gda_train(model, data, plan, eval_data)
    if plan.strategy == "pgd_at":
        return pgd_at_train(model, data, plan, eval_data)
    return natural_train(model, data, plan, eval_data)


@dataclass
class AblationRow:
    k: int
    clean_acc: float
    attack_acc: float
    wall_ms_per_epoch: float


def ablate_k(build: Callable[[], Model], data: Dataset, eval_data: Dataset, plan: TrainPlan,
             ks: Sequence[int] = (1, 2, 3, 4, 5, 6), attack: Optional[AttackSpec] = None) -> List[AblationRow]:
    """
    Train PDA once per progressive step count and report clean accuracy, attacked accuracy and epoch wall-clock.

    :param build: factory returning a freshly initialised model
    :param attack: evaluation attack (default PGD-20 at 8/255 with step 2/255)
    """
    attack = attack if attack is not None else AttackSpec("pgd", eps=DEFAULT_PGD_EPS, alpha=2. / 255., steps=20,
                                                          seed=plan.seed, clip=eval_data.bounded)
    rows = []
    for k in ks:
        run_plan = TrainPlan(**{**asdict(plan), "strategy": "pda", "k": int(k)})
        model, history = pda_train(build(), data, run_plan)
        result = evaluate_attack(model, eval_data.images, eval_data.labels, attack)
        rows.append(AblationRow(int(k), result.clean_accuracy, result.adversarial_accuracy, history.mean_wall_ms()))
        logger.info("k={}: clean {:.4f}, {} {:.4f}".format(k, result.clean_accuracy, attack.label,
                                                           result.adversarial_accuracy))
    return rows
