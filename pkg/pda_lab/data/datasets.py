"""
In-memory datasets and the synthetic generators standing in for image benchmarks at desk scale.
"""
from typing import Dict, Optional, Sequence

from dataclasses import dataclass

import numpy as np

import logging
logger = logging.getLogger(__name__)


SHAPE_CLASSES = ("square", "circle", "cross", "triangle")


@dataclass
class Dataset:
    """
    Labelled inputs. Images live on the [0, 1] scale; feature vectors are unbounded.

    :param images: array [N, C, H, W] (or [N, d] feature vectors)
    :param labels: class indices [N]
    :param num_classes: number of classes m
    :param split: split tag, e.g. "train" or "test"
    :param provenance: free-form origin description
    """
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    provenance: str = ""

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        n = len(self.images)
        if n < 1:
            raise ValueError("empty dataset")
        if self.labels.shape != (n,):
            raise ValueError("shape mismatch: {} images vs labels of shape {}".format(n, self.labels.shape))
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes, got {}".format(self.num_classes))
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels outside [0, {})".format(self.num_classes))
        if not np.all(np.isfinite(self.images)):
            raise ValueError("non-finite input values")
        if self.bounded and (self.images.min() < 0. or self.images.max() > 1.):
            raise ValueError("pixel values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def input_shape(self):
        return self.images.shape[1:]

    @property
    def bounded(self) -> bool:
        """Image data, kept on [0, 1] by attacks and augmentation."""
        return self.images.ndim > 2

    def subset(self, index: Sequence[int], split: Optional[str] = None) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.images[index], self.labels[index], self.num_classes,
                       self.split if split is None else split, self.provenance)

    def with_images(self, images: np.ndarray, provenance: Optional[str] = None) -> "Dataset":
        return Dataset(images, self.labels, self.num_classes, self.split,
                       self.provenance if provenance is None else provenance)

    def class_counts(self) -> Dict[int, int]:
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}


def concat(datasets: Sequence[Dataset], split: Optional[str] = None) -> Dataset:
    if not datasets:
        raise ValueError("nothing to concatenate")
    first = datasets[0]
    for d in datasets[1:]:
        if d.input_shape != first.input_shape or d.num_classes != first.num_classes:
            raise ValueError("cannot concatenate datasets of shapes {} and {}".format(first.input_shape,
                                                                                     d.input_shape))
    return Dataset(np.concatenate([d.images for d in datasets]), np.concatenate([d.labels for d in datasets]),
                   first.num_classes, first.split if split is None else split,
                   " + ".join(d.provenance for d in datasets))


def _balanced_labels(n: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % classes)


def gen_blobs(n: int, d: int = 2, classes: int = 2, separation: float = 6., seed: int = 0) -> Dataset:
    """
    Gaussian class clusters with unit variance around centres at distance `separation` / 2 from the origin, in raw
    coordinates (not confined to [0, 1]). Class sizes differ by at most one.

    :param n: number of points (>= classes)
    :param d: feature dimension (>= 1)
    :param classes: number of classes (>= 2)
    :param separation: centre spread in units of the cluster standard deviation
    :param seed: generator seed
    """
    if classes < 2 or n < classes or d < 1 or separation < 0:
        raise ValueError("degenerate blob parameters: n={}, d={}, classes={}, separation={}".format(
            n, d, classes, separation))
    rng = np.random.default_rng(seed)
    if d == 1:
        centres = np.linspace(-separation / 2., separation / 2., classes)[:, None]
    else:
        basis, _ = np.linalg.qr(rng.standard_normal((d, 2)))
        angles = 2. * np.pi * np.arange(classes) / classes
        centres = (separation / 2.) * (np.cos(angles)[:, None] * basis[:, 0] + np.sin(angles)[:, None] * basis[:, 1])
    labels = _balanced_labels(n, classes, rng)
    points = centres[labels] + rng.standard_normal((n, d))
    return Dataset(points, labels, classes, "train",
                   "blobs(n={}, d={}, classes={}, separation={}, seed={})".format(n, d, classes, separation, seed))


def shape_mask(kind: str, size: int, cx: float, cy: float, half: float) -> np.ndarray:
    """
    Boolean raster of one shape on a `size` x `size` grid; pixel (r, c) is tested at the point (c, r).

    :param kind: "square", "circle", "cross" or "triangle" (upward, base at the bottom)
    :param cx: centre column
    :param cy: centre row
    :param half: half extent
    """
    r, c = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = np.abs(c - cx), np.abs(r - cy)
    if kind == "square":
        return (dx <= half) & (dy <= half)
    if kind == "circle":
        return dx ** 2 + dy ** 2 <= half ** 2
    if kind == "cross":
        arm = half / 3.
        return ((dx <= arm) & (dy <= half)) | ((dy <= arm) & (dx <= half))
    if kind == "triangle":
        top = cy - half
        return (r >= top) & (r <= cy + half) & (dx <= (r - top) / 2.)
    raise ValueError("unknown shape '{}'".format(kind))


def gen_shapes(n: int, size: int = 16, seed: int = 0) -> Dataset:
    """
    Grayscale images of four classes (filled square, circle, cross, triangle) with jittered position, scale and
    intensities.

    :param n: number of images
    :param size: side length in pixels (>= 8)
    :param seed: generator seed
    """
    if size < 8:
        raise ValueError("shape images need size >= 8, got {}".format(size))
    if n < len(SHAPE_CLASSES):
        raise ValueError("need at least {} images, got {}".format(len(SHAPE_CLASSES), n))
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n, len(SHAPE_CLASSES), rng)
    images = np.empty((n, 1, size, size))
    for i, label in enumerate(labels):
        half = rng.uniform(0.22, 0.34) * size
        cx, cy = rng.uniform(half, size - 1 - half, size=2)
        foreground = rng.uniform(0.7, 1.)
        background = rng.uniform(0., 0.2)
        mask = shape_mask(SHAPE_CLASSES[label], size, cx, cy, half)
        images[i, 0] = np.where(mask, foreground, background)
    return Dataset(images, labels, len(SHAPE_CLASSES), "train", "shapes(n={}, size={}, seed={})".format(n, size,
                                                                                                         seed))
