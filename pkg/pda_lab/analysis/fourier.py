"""
Fourier-basis sensitivity heat maps.

Basis indices use unshifted FFT order: (0, 0) is the constant (DC) mode, (i, j) and (-i mod H, -j mod W) are the
conjugate pair that share one real basis matrix.
"""
from typing import Tuple

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from pda_lab.data.datasets import Dataset
from pda_lab.nn import Model, predict

import logging
logger = logging.getLogger(__name__)


DEFAULT_NORM_FRACTION = 0.1


def conjugate_index(H: int, W: int, i: int, j: int) -> Tuple[int, int]:
    return (-i) % H, (-j) % W


def fourier_basis(H: int, W: int, i: int, j: int) -> np.ndarray:
    """
    Real [H, W] matrix with unit Frobenius norm whose 2-D DFT is supported on (i, j) and its conjugate index (the
    cosine of that frequency).
    """
    if not (0 <= i < H and 0 <= j < W):
        raise ValueError("basis index ({}, {}) outside {}x{}".format(i, j, H, W))
    spectrum = np.zeros((H, W), dtype=np.complex128)
    spectrum[i, j] = 1.
    spectrum[conjugate_index(H, W, i, j)] = 1.
    basis = np.real(np.fft.ifft2(spectrum))
    return basis / np.linalg.norm(basis)


def perturbation_for_basis(x: np.ndarray, basis: np.ndarray, r: float, sign: float = 1.) -> np.ndarray:
    """
    Pre-clipping perturbation sign * r * ||x||_2 * U of one [C, H, W] image; U is replicated over the channels and
    divided by sqrt(C), so the perturbation norm is exactly r * ||x||_2.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != basis.shape:
        raise ValueError("shape mismatch: image {} vs basis {}".format(x.shape, basis.shape))
    channels = x.shape[0]
    return sign * r * np.linalg.norm(x) * np.broadcast_to(basis / np.sqrt(channels), x.shape)


def perturb_images(images: np.ndarray, basis: np.ndarray, r: float, signs: np.ndarray) -> np.ndarray:
    """Batch version of :func:`perturbation_for_basis` followed by clipping to [0, 1]."""
    norms = np.sqrt((images.reshape(len(images), -1) ** 2).sum(axis=1))
    scale = (signs * r * norms / np.sqrt(images.shape[1]))[:, None, None, None]
    return np.clip(images + scale * basis[None, None], 0., 1.)


def _cell_signs(seed: int, i: int, j: int, n: int) -> np.ndarray:
    return np.where(np.random.default_rng([int(seed), i, j]).random(n) < 0.5, -1., 1.)


def heatmap_cell(model: Model, dataset: Dataset, i: int, j: int, r: float = DEFAULT_NORM_FRACTION, seed: int = 0,
                 batch_size: int = 256) -> float:
    """Top-1 error over the dataset perturbed along basis (i, j) with one random sign per image."""
    _, H, W = dataset.input_shape
    signs = _cell_signs(seed, i, j, len(dataset))
    perturbed = perturb_images(dataset.images, fourier_basis(H, W, i, j), r, signs)
    return float(np.mean(predict(model, perturbed, batch_size) != dataset.labels))


def fourier_heatmap(model: Model, dataset: Dataset, r: float = DEFAULT_NORM_FRACTION, seed: int = 0,
                    workers: int = 1, batch_size: int = 256) -> np.ndarray:
    """
    Error rate for every basis index: cell (i, j) holds the error on clip(x + v r ||x|| U_ij) with v = +-1 drawn per
    image from a stream seeded by (seed, i, j).

    :param r: perturbation norm as a fraction of each image's norm
    :param workers: evaluate cells on a thread pool of this size
    :return: [H, W] array
    """
    if len(dataset.input_shape) != 3:
        raise ValueError("heat maps need [C, H, W] images, got input shape {}".format(dataset.input_shape))
    if r < 0:
        raise ValueError("norm fraction must be non-negative, got {}".format(r))
    _, H, W = dataset.input_shape
    cells = [(i, j) for i in range(H) for j in range(W)]

    def evaluate(cell):
        return heatmap_cell(model, dataset, cell[0], cell[1], r, seed, batch_size)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            errors = list(pool.map(evaluate, cells))
    else:
        errors = [evaluate(cell) for cell in cells]
    heatmap = np.array(errors).reshape(H, W)
    logger.info("Fourier heat map {}x{} (r={}): error range [{:.4f}, {:.4f}]".format(H, W, r, heatmap.min(),
                                                                                     heatmap.max()))
    return heatmap


def centred(heatmap: np.ndarray) -> np.ndarray:
    """Heat map with the DC mode moved to the centre, the usual display layout."""
    return np.fft.fftshift(heatmap)
