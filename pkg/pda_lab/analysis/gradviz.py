"""
Input-gradient images.
"""
import numpy as np

from pda_lab.attacks import input_gradient
from pda_lab.nn import Model

import logging
logger = logging.getLogger(__name__)


def minmax_normalize(v: np.ndarray) -> np.ndarray:
    """Per-image min-max scaling to [0, 1]; an image with constant values maps to 0.5."""
    flat = v.reshape(len(v), -1)
    lo = flat.min(axis=1, keepdims=True)
    span = flat.max(axis=1, keepdims=True) - lo
    out = np.where(span > 0, (flat - lo) / np.where(span > 0, span, 1.), 0.5)
    return out.reshape(v.shape)


def grad_visualization(model: Model, x: np.ndarray, y) -> np.ndarray:
    """
    Normalized loss gradient with respect to the input, one image or a batch.

    :param x: [C, H, W] image or [N, C, H, W] batch
    :param y: label or labels
    :return: array shaped like `x` with values in [0, 1]
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == len(model.input_shape)
    batch = x[None] if single else x
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    g = input_gradient(model, batch, labels)
    flat = int(np.sum(np.ptp(g.reshape(len(g), -1), axis=1) == 0.))
    if flat:
        logger.debug("{} of {} gradient images are constant and map to 0.5".format(flat, len(g)))
    out = minmax_normalize(g)
    return out[0] if single else out
