"""
Empirical probes of the perturbation bound on the logits and of the generalization bound of the surrogate loss.

The logit map z = g(θ; x) is the model output before the softmax, so the log-loss, its gradient p - onehot(y) and its
Hessian diag(p) - p pᵀ in z are analytic. Constants estimated here are empirical and not certified.
"""
from typing import Optional, Sequence

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from pda_lab.attacks import input_gradient
from pda_lab.nn import Model, logits
from pda_lab.tensor import softmax

import logging
logger = logging.getLogger(__name__)


C_FLOOR = 1e-9


class AssumptionError(ValueError):
    """A bound is evaluated outside the regime in which it applies."""
    pass


# ---------------------------------------------------------------------------------------------------------------------
# log-loss in logit space

def logit_loss(z: np.ndarray, y: int) -> float:
    z = np.asarray(z, dtype=np.float64)
    return float(logsumexp(z) - z[y])


def logit_gradient(z: np.ndarray, y: int) -> np.ndarray:
    g = softmax(np.asarray(z, dtype=np.float64)[None])[0]
    g[y] -= 1.
    return g


def logit_hessian(z: np.ndarray) -> np.ndarray:
    p = softmax(np.asarray(z, dtype=np.float64)[None])[0]
    return np.diag(p) - np.outer(p, p)


def spectral_norm(matrix: np.ndarray) -> float:
    """Largest eigenvalue magnitude of a symmetric matrix."""
    return float(np.max(np.abs(np.linalg.eigvalsh(matrix))))


def sample_ball(centre: np.ndarray, radius: float, count: int, rng: np.random.Generator) -> np.ndarray:
    """`count` points uniform in the closed L2 ball."""
    d = centre.size
    direction = rng.standard_normal((count, d))
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-300)
    radii = radius * rng.uniform(0., 1., size=(count, 1)) ** (1. / d)
    return centre[None] + direction * radii


# ---------------------------------------------------------------------------------------------------------------------
# perturbation bound

@dataclass
class BoundProbe:
    """
    Settings of the perturbation bound probe.

    :param eps: slack of the ε-maximizer
    :param radius: L2 radius of the logit neighbourhood searched and sampled
    :param samples: number of uniform samples used for C and K
    :param steps: projected gradient ascent steps for the maximizer
    :param seed: sampling seed
    """
    eps: float = 1e-3
    radius: float = 1.
    samples: int = 256
    steps: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.eps < 0 or self.radius <= 0 or self.samples < 1 or self.steps < 0:
            raise ValueError("invalid probe settings: eps={}, radius={}, samples={}, steps={}".format(
                self.eps, self.radius, self.samples, self.steps))


@dataclass
class PerturbationBoundResult:
    lhs: float
    rhs: float
    C: float
    K: float
    pinv_term: float
    holds: Optional[bool]
    z_star: np.ndarray

    @property
    def applicable(self) -> bool:
        return self.holds is not None


def ascend_logits(z0: np.ndarray, y: int, radius: float, steps: int) -> np.ndarray:
    """Projected normalized-gradient ascent of the log-loss over the ball of `radius` around `z0`; best iterate."""
    z = z0.copy()
    best, best_loss = z0.copy(), logit_loss(z0, y)
    step = radius / 10.
    for _ in range(steps):
        g = logit_gradient(z, y)
        norm = np.linalg.norm(g)
        if norm < 1e-12:
            break
        z = z + step * g / norm
        offset = z - z0
        distance = np.linalg.norm(offset)
        if distance > radius:
            z = z0 + offset * (radius / distance)
        loss = logit_loss(z, y)
        if loss > best_loss:
            best, best_loss = z.copy(), loss
    return best


def perturbation_bound_check_logits(z0: np.ndarray, y0: int, probe: Optional[BoundProbe] = None,
                                    strict: bool = False) -> PerturbationBoundResult:
    """
    Compare ||z*_ε - z0|| with K/C + sqrt(ε/C) + ||H(z0)⁺ ∇ℓ(z0)||.

    z*_ε is the best of the ascent iterate and the uniform samples of the ball; C is the smallest Hessian spectral
    norm and K the largest second-order Taylor residual of the gradient over the same points.

    :param strict: raise AssumptionError instead of reporting when C is below 1e-9
    """
    probe = BoundProbe() if probe is None else probe
    z0 = np.asarray(z0, dtype=np.float64).ravel()
    rng = np.random.default_rng(probe.seed)
    points = sample_ball(z0, probe.radius, probe.samples, rng)
    candidate = ascend_logits(z0, y0, probe.radius, probe.steps)
    points = np.vstack([points, candidate[None]])

    losses = np.array([logit_loss(z, y0) for z in points])
    loss0 = logit_loss(z0, y0)
    best = int(np.argmax(losses))
    z_star = points[best] if losses[best] > loss0 else z0.copy()

    g0 = logit_gradient(z0, y0)
    h0 = logit_hessian(z0)
    C = min(spectral_norm(logit_hessian(z)) for z in points)
    K = max(np.linalg.norm((logit_gradient(z, y0) - g0) - h0 @ (z - z0)) for z in points)
    pinv_term = float(np.linalg.norm(np.linalg.pinv(h0) @ g0))
    lhs = float(np.linalg.norm(z_star - z0))
    if C < C_FLOOR:
        if strict:
            raise AssumptionError("Hessian spectral norm {:.3e} below {:.0e}".format(C, C_FLOOR))
        logger.warning("C = {:.3e} below {:.0e}: bound not evaluated".format(C, C_FLOOR))
        return PerturbationBoundResult(lhs, np.inf, C, float(K), pinv_term, None, z_star)
    rhs = float(K / C + np.sqrt(probe.eps / C) + pinv_term)
    return PerturbationBoundResult(lhs, rhs, C, float(K), pinv_term, lhs <= rhs, z_star)


def perturbation_bound_check(model: Model, x0: np.ndarray, y0: int, probe: Optional[BoundProbe] = None,
                             strict: bool = False) -> PerturbationBoundResult:
    """Perturbation bound probe at the logits of one input `x0` (shape = model.input_shape)."""
    z0 = logits(model, np.asarray(x0, dtype=np.float64)[None])[0]
    result = perturbation_bound_check_logits(z0, int(y0), probe, strict)
    logger.debug("anchor label {}: lhs {:.6f}, rhs {:.6f}, C {:.3e}, K {:.3e}".format(y0, result.lhs, result.rhs,
                                                                                     result.C, result.K))
    return result


# ---------------------------------------------------------------------------------------------------------------------
# generalization bound

def covering_number(points: np.ndarray, gamma: float) -> int:
    """
    Greedy cover by closed γ-balls centred on data points: the first uncovered point (in array order) becomes a
    centre until every point is covered. An upper bound on the minimal cover size.
    """
    if gamma <= 0:
        raise ValueError("cover radius must be positive, got {}".format(gamma))
    points = np.asarray(points, dtype=np.float64)
    points = points.reshape(len(points), -1)
    uncovered = np.ones(len(points), dtype=bool)
    centres = 0
    while uncovered.any():
        centre = points[np.argmax(uncovered)]
        uncovered &= np.linalg.norm(points - centre, axis=1) > gamma
        centres += 1
    return centres


def generalization_bound(empirical_loss: float, n: int, gamma: float, lam: float, M0: float, M1: float, L0: float,
                         L1: float, p: float, cover_size: int) -> float:
    """
    empirical_loss + γ (L0 + (2 M1 L1 + 1) / λ) + M0 sqrt((2 N ln 2 - 2 ln p) / n) + M1² / (λ - L1)

    :param cover_size: N, the covering number at radius γ/2
    """
    if lam <= L1:
        raise AssumptionError("λ = {} must exceed L1 = {}".format(lam, L1))
    if not 0. < p < 1.:
        raise ValueError("confidence p must lie in (0, 1), got {}".format(p))
    if n < 1 or cover_size < 1 or gamma <= 0:
        raise ValueError("need n >= 1, N >= 1 and γ > 0, got n={}, N={}, γ={}".format(n, cover_size, gamma))
    return (empirical_loss
            + gamma * (L0 + (2. * M1 * L1 + 1.) / lam)
            + M0 * np.sqrt((2. * cover_size * np.log(2.) - 2. * np.log(p)) / n)
            + M1 ** 2 / (lam - L1))


def generalization_bound_from_points(points: np.ndarray, empirical_loss: float, gamma: float, lam: float, M0: float,
                                     M1: float, L0: float, L1: float, p: float) -> float:
    return generalization_bound(empirical_loss, len(points), gamma, lam, M0, M1, L0, L1, p,
                                covering_number(points, gamma / 2.))


# aliases
theorem1_check = perturbation_bound_check
theorem2_bound = generalization_bound


# ---------------------------------------------------------------------------------------------------------------------
# constants

@dataclass
class LossConstants:
    """Loss bound M0, gradient bound M1, loss Lipschitz L0 and gradient Lipschitz L1 (empirical, not certified)."""
    M0: float
    M1: float
    L0: float
    L1: float
    pairs: int
    certified: bool = False


def per_example_losses(model: Model, images: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    z = logits(model, images)
    labels = np.asarray(labels, dtype=np.int64)
    return logsumexp(z, axis=1) - z[np.arange(len(z)), labels]


def per_example_gradients(model: Model, images: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    """Input gradient of each example's own loss (the batch mean scaled back by N)."""
    return input_gradient(model, images, np.asarray(labels, dtype=np.int64), scale=float(len(images)))


def estimate_constants(model: Model, images: np.ndarray, labels: Sequence[int], pairs: int = 10000, seed: int = 0,
                       batch_size: int = 512) -> LossConstants:
    """
    Maxima of the loss, the input-gradient norm and the difference ratios over random input pairs (both members of
    a pair scored with the first member's label).
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    a = rng.integers(0, len(images), size=pairs)
    b = rng.integers(0, len(images), size=pairs)
    M0 = M1 = L0 = L1 = 0.
    for start in range(0, pairs, batch_size):
        ia, ib = a[start:start + batch_size], b[start:start + batch_size]
        y = labels[ia]
        xa, xb = images[ia], images[ib]
        loss_a, loss_b = per_example_losses(model, xa, y), per_example_losses(model, xb, y)
        grad_a = per_example_gradients(model, xa, y).reshape(len(ia), -1)
        grad_b = per_example_gradients(model, xb, y).reshape(len(ia), -1)
        distance = np.linalg.norm((xa - xb).reshape(len(ia), -1), axis=1)
        M0 = max(M0, float(np.abs(np.concatenate([loss_a, loss_b])).max()))
        M1 = max(M1, float(np.linalg.norm(np.vstack([grad_a, grad_b]), axis=1).max()))
        apart = distance > 0
        if apart.any():
            L0 = max(L0, float((np.abs(loss_a - loss_b)[apart] / distance[apart]).max()))
            L1 = max(L1, float((np.linalg.norm(grad_a - grad_b, axis=1)[apart] / distance[apart]).max()))
    constants = LossConstants(M0, M1, L0, L1, pairs)
    logger.info("estimated constants (empirical, not certified): M0={:.4f}, M1={:.4f}, L0={:.4f}, L1={:.4f}".format(
        M0, M1, L0, L1))
    return constants
