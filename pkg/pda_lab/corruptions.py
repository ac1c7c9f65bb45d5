"""
Procedural common corruptions at five severities and the builder for corrupted evaluation suites.

Images are [C, H, W] arrays on the [0, 1] scale. Every kind returns an array of the input shape, clipped to [0, 1].
Stochastic kinds draw from a generator seeded by (seed, image index, kind, severity), so the corruption of one image
does not depend on the order or content of the rest of the dataset.
"""
from typing import Dict, List, Optional, Sequence, Tuple

from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor

import hashlib
import os

import numpy as np
from PIL import Image
from scipy import fft, ndimage

from pda_lab.data.datasets import Dataset
from pda_lab.data.formats import read_dataset, write_dataset

import logging
logger = logging.getLogger(__name__)


SEVERITIES = (1, 2, 3, 4, 5)

SEVERITY_TABLE = {
    "gaussian_noise": (0.04, 0.06, 0.08, 0.10, 0.14),  # standard deviation
    "shot_noise": (60., 25., 12., 5., 3.),  # photon scale
    "impulse_noise": (0.03, 0.06, 0.09, 0.17, 0.27),  # fraction of values replaced
    "defocus_blur": (1., 2., 3., 4., 6.),  # disk radius (px)
    "motion_blur": (3., 5., 7., 9., 11.),  # streak length (px), 45 degrees
    "zoom_blur": (1.06, 1.11, 1.16, 1.21, 1.26),  # largest zoom factor
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),  # value shift
    "fog": (0.15, 0.25, 0.35, 0.45, 0.55),  # plasma blend weight
    "contrast": (0.75, 0.5, 0.4, 0.3, 0.15),  # contrast factor about 0.5
    "elastic": (1., 2., 3., 4., 6.),  # peak displacement (px)
    "pixelate": (0.75, 0.5, 0.375, 0.25, 0.125),  # downscale factor
    "jpeg": (25., 18., 15., 10., 7.),  # quality
}
KINDS = tuple(SEVERITY_TABLE)

CATEGORIES = {
    "noise": ("gaussian_noise", "shot_noise", "impulse_noise"),
    "blur": ("defocus_blur", "motion_blur", "zoom_blur"),
    "weather": ("brightness", "fog"),
    "digital": ("contrast", "elastic", "pixelate", "jpeg"),
}
CATEGORIES["other"] = CATEGORIES["weather"] + CATEGORIES["digital"]

ZOOM_SCALES = 4
ELASTIC_SMOOTHING = 0.1  # fraction of the shorter image side
FOG_DECAY = 2.

# IJG luminance quantization table
JPEG_LUMINANCE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99]], dtype=np.float64)

MANIFEST = "manifest.txt"
MANIFEST_HEADER = "# kind\tseverity\tparameter\tcount\tsha256"
CLEAN_DIR = "clean"
DATA_FILE = "data.bin"


def category_of(kind: str) -> str:
    for category in ("noise", "blur", "weather", "digital"):
        if kind in CATEGORIES[category]:
            return category
    raise ValueError("unknown corruption kind '{}'".format(kind))


def kinds_for(names: Sequence[str]) -> List[str]:
    """Expand kind and category names ("all", "noise", ...) into a de-duplicated kind list."""
    kinds = []
    for name in names:
        if name == "all":
            expanded = KINDS
        elif name in CATEGORIES:
            expanded = CATEGORIES[name]
        elif name in SEVERITY_TABLE:
            expanded = (name,)
        else:
            raise ValueError("unknown corruption kind '{}' (choose from {}, or a category: {})".format(
                name, ", ".join(KINDS), ", ".join(["all"] + list(CATEGORIES))))
        kinds.extend(k for k in expanded if k not in kinds)
    return kinds


@dataclass
class CorruptionSpec:
    """
    :param kind: corruption name (see KINDS)
    :param severity: 1 (mildest) to 5
    :param seed: suite seed
    :param parameter: overrides the severity table value when given
    """
    kind: str
    severity: int = 1
    seed: int = 0
    parameter: Optional[float] = None

    def __post_init__(self):
        if self.kind not in SEVERITY_TABLE:
            raise ValueError("unknown corruption kind '{}' (choose from {})".format(self.kind, ", ".join(KINDS)))
        if self.severity not in SEVERITIES:
            raise ValueError("severity must be in 1..5, got {}".format(self.severity))

    @property
    def value(self) -> float:
        if self.parameter is not None:
            return float(self.parameter)
        return SEVERITY_TABLE[self.kind][self.severity - 1]

    def rng(self, index: int) -> np.random.Generator:
        return np.random.default_rng([int(self.seed), int(index), KINDS.index(self.kind), self.severity])


# ---------------------------------------------------------------------------------------------------------------------
# helpers

def _per_channel(image: np.ndarray, fn) -> np.ndarray:
    return np.stack([fn(channel) for channel in image])


def disk_kernel(radius: float) -> np.ndarray:
    r = int(np.ceil(radius))
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    kernel = (x ** 2 + y ** 2 <= radius ** 2).astype(np.float64)
    return kernel / kernel.sum()


def motion_kernel(length: int) -> np.ndarray:
    """Diagonal streak (45 degrees) of `length` pixels."""
    length = max(int(length), 1)
    return np.eye(length)[::-1] / length


def plasma_fractal(size: int, rng: np.random.Generator, decay: float = FOG_DECAY) -> np.ndarray:
    """
    Diamond-square height map of side `size` (a power of two), normalized to [0, 1].
    """
    if size & (size - 1):
        raise ValueError("plasma size must be a power of two, got {}".format(size))
    heights = np.zeros((size, size))
    step = size
    wibble = 1.

    def wibbled_mean(total):
        return total / 4. + wibble * rng.uniform(-wibble, wibble, total.shape)

    while step >= 2:
        half = step // 2
        corners = heights[0:size:step, 0:size:step]
        square_sum = corners + np.roll(corners, -1, axis=0)
        square_sum = square_sum + np.roll(square_sum, -1, axis=1)
        heights[half:size:step, half:size:step] = wibbled_mean(square_sum)

        centres = heights[half:size:step, half:size:step]
        corners = heights[0:size:step, 0:size:step]
        ltsum = centres + np.roll(centres, 1, axis=0) + corners + np.roll(corners, -1, axis=1)
        heights[0:size:step, half:size:step] = wibbled_mean(ltsum)
        ttsum = centres + np.roll(centres, 1, axis=1) + corners + np.roll(corners, -1, axis=0)
        heights[half:size:step, 0:size:step] = wibbled_mean(ttsum)

        step = half
        wibble /= decay
    heights -= heights.min()
    top = heights.max()
    return heights / top if top > 0 else heights


def zoom_about_centre(channel: np.ndarray, factor: float) -> np.ndarray:
    h, w = channel.shape
    r, c = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2., (w - 1) / 2.
    coords = np.stack([cy + (r - cy) / factor, cx + (c - cx) / factor])
    return ndimage.map_coordinates(channel, coords, order=1, mode="nearest")


def jpeg_quantization_table(quality: float) -> np.ndarray:
    quality = float(np.clip(quality, 1., 100.))
    scale = 5000. / quality if quality < 50 else 200. - 2. * quality
    return np.maximum(np.floor((JPEG_LUMINANCE * scale + 50.) / 100.), 1.)


def _jpeg_channel(channel: np.ndarray, table: np.ndarray) -> np.ndarray:
    h, w = channel.shape
    ph, pw = -h % 8, -w % 8
    padded = np.pad(channel * 255. - 128., ((0, ph), (0, pw)), mode="edge")
    blocks = padded.reshape(padded.shape[0] // 8, 8, padded.shape[1] // 8, 8).transpose(0, 2, 1, 3)
    coefficients = fft.dctn(blocks, axes=(2, 3), norm="ortho")
    quantized = np.round(coefficients / table) * table
    restored = fft.idctn(quantized, axes=(2, 3), norm="ortho")
    restored = restored.transpose(0, 2, 1, 3).reshape(padded.shape)[:h, :w]
    return (restored + 128.) / 255.


def pixelate_size(side: int, factor: float) -> int:
    """Side length of the downscaled raster, at least 1 pixel."""
    return max(int(np.floor(side * factor)), 1)


def _pixelate_channel(channel: np.ndarray, factor: float) -> np.ndarray:
    h, w = channel.shape
    small = (pixelate_size(w, factor), pixelate_size(h, factor))
    im = Image.fromarray(channel.astype(np.float32))
    im = im.resize(small, Image.Resampling.BOX).resize((w, h), Image.Resampling.BOX)
    return np.asarray(im, dtype=np.float64)


# ---------------------------------------------------------------------------------------------------------------------
# corruptions

def _gaussian_noise(x, value, rng):
    return x + rng.normal(0., value, size=x.shape)


def _shot_noise(x, value, rng):
    return rng.poisson(x * value) / value


def _impulse_noise(x, value, rng):
    hit = rng.random(x.shape) < value
    salt = rng.random(x.shape) < 0.5
    return np.where(hit, salt.astype(np.float64), x)


def _defocus_blur(x, value, rng):
    kernel = disk_kernel(value)
    return _per_channel(x, lambda ch: ndimage.convolve(ch, kernel, mode="reflect"))


def _motion_blur(x, value, rng):
    kernel = motion_kernel(int(value))
    return _per_channel(x, lambda ch: ndimage.convolve(ch, kernel, mode="reflect"))


def _zoom_blur(x, value, rng):
    out = x.copy()
    for factor in np.linspace(1., value, ZOOM_SCALES + 1)[1:]:
        out += _per_channel(x, lambda ch: zoom_about_centre(ch, factor))
    return out / (ZOOM_SCALES + 1)


def _brightness(x, value, rng):
    # shifts the HSV value (channel maximum) and rescales all channels with it
    v = x.max(axis=0, keepdims=True)
    shifted = np.clip(v + value, 0., 1.)
    ratio = np.where(v > 0, shifted / np.where(v > 0, v, 1.), 0.)
    return np.where(v > 0, x * ratio, shifted)


def _fog(x, value, rng):
    h, w = x.shape[-2:]
    size = 1 << int(np.ceil(np.log2(max(h, w, 2))))
    plasma = plasma_fractal(size, rng)[:h, :w]
    return (1. - value) * x + value * plasma


def _contrast(x, value, rng):
    return (x - 0.5) * value + 0.5


def _elastic(x, value, rng):
    h, w = x.shape[-2:]
    sigma = max(ELASTIC_SMOOTHING * min(h, w), 1.)
    fields = []
    for _ in range(2):
        f = ndimage.gaussian_filter(rng.uniform(-1., 1., size=(h, w)), sigma, mode="reflect")
        peak = np.abs(f).max()
        fields.append(f / peak * value if peak > 0 else f)
    r, c = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack([r + fields[0], c + fields[1]])
    return _per_channel(x, lambda ch: ndimage.map_coordinates(ch, coords, order=1, mode="reflect"))


def _pixelate(x, value, rng):
    return _per_channel(x, lambda ch: _pixelate_channel(ch, value))


def _jpeg(x, value, rng):
    table = jpeg_quantization_table(value)
    return _per_channel(x, lambda ch: _jpeg_channel(ch, table))


_CORRUPTIONS = {
    "gaussian_noise": _gaussian_noise,
    "shot_noise": _shot_noise,
    "impulse_noise": _impulse_noise,
    "defocus_blur": _defocus_blur,
    "motion_blur": _motion_blur,
    "zoom_blur": _zoom_blur,
    "brightness": _brightness,
    "fog": _fog,
    "contrast": _contrast,
    "elastic": _elastic,
    "pixelate": _pixelate,
    "jpeg": _jpeg,
}
_POINTWISE = {"gaussian_noise", "shot_noise", "impulse_noise", "contrast"}


def corrupt(image: np.ndarray, spec: CorruptionSpec, index: int = 0) -> np.ndarray:
    """
    Apply one corruption to one image.

    :param image: [C, H, W] array in [0, 1] (pointwise kinds also accept feature vectors)
    :param spec: kind, severity and seed
    :param index: image index within its dataset (selects the random stream)
    :return: corrupted copy, same shape, in [0, 1]
    """
    x = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(x)) or x.min() < 0. or x.max() > 1.:
        raise ValueError("image values outside [0, 1]")
    if x.ndim != 3 and spec.kind not in _POINTWISE:
        raise ValueError("{} needs a [C, H, W] image, got shape {}".format(spec.kind, x.shape))
    out = _CORRUPTIONS[spec.kind](x, spec.value, spec.rng(index))
    return np.clip(out, 0., 1.)


def corrupt_images(images: np.ndarray, spec: CorruptionSpec, workers: int = 1) -> np.ndarray:
    """Corrupt a stack of images; image `i` always uses stream `i`, with or without a thread pool."""
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(lambda i: corrupt(images[i], spec, i), range(len(images))))
    else:
        out = [corrupt(images[i], spec, i) for i in range(len(images))]
    return np.stack(out)


# ---------------------------------------------------------------------------------------------------------------------
# suites

@dataclass
class SuiteEntry:
    kind: str
    severity: int
    parameter: float
    count: int
    checksum: str
    path: str


@dataclass
class CorruptionSuite:
    """
    Clean reference set plus one corrupted copy per (kind, severity).
    """
    clean: Dataset
    entries: List[SuiteEntry] = field(default_factory=list)
    datasets: Dict[Tuple[str, int], Dataset] = field(default_factory=dict)

    @property
    def kinds(self) -> List[str]:
        kinds = []
        for entry in self.entries:
            if entry.kind not in kinds:
                kinds.append(entry.kind)
        return kinds

    def get(self, kind: str, severity: int) -> Dataset:
        try:
            return self.datasets[(kind, severity)]
        except KeyError:
            raise KeyError("suite has no {} at severity {}".format(kind, severity)) from None


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def build_corruption_suite(dataset: Dataset, kinds: Sequence[str] = KINDS, seed: int = 0, out_dir: str = "suite",
                           workers: int = 1) -> List[SuiteEntry]:
    """
    Write `<out_dir>/<kind>/<severity>/data.bin` for every kind and severity, `<out_dir>/clean/data.bin`, and a
    tab-separated manifest (kind, severity, parameter, count, sha256).

    :return: manifest entries in file order
    """
    if len(dataset) == 0:
        raise ValueError("cannot corrupt an empty dataset")
    kinds = kinds_for(kinds)
    if not kinds:
        raise ValueError("no corruption kinds selected")
    os.makedirs(os.path.join(out_dir, CLEAN_DIR), exist_ok=True)
    write_dataset(os.path.join(out_dir, CLEAN_DIR, DATA_FILE), dataset)
    entries = []
    for kind in kinds:
        for severity in SEVERITIES:
            spec = CorruptionSpec(kind, severity, seed)
            images = corrupt_images(dataset.images, spec, workers)
            sub = dataset.with_images(images, "{} | {} severity {}".format(dataset.provenance, kind, severity))
            directory = os.path.join(out_dir, kind, str(severity))
            os.makedirs(directory, exist_ok=True)
            path = os.path.join(directory, DATA_FILE)
            write_dataset(path, sub)
            entries.append(SuiteEntry(kind, severity, spec.value, len(sub), _sha256(path),
                                      os.path.join(kind, str(severity), DATA_FILE)))
            logger.debug("{} severity {}: mean squared change {:.6f}".format(
                kind, severity, float(np.mean((images - dataset.images) ** 2))))
        logger.info("corrupted {} images with {}".format(len(dataset), kind))
    with open(os.path.join(out_dir, MANIFEST), "w") as f:
        f.write(MANIFEST_HEADER + "\n")
        for e in entries:
            f.write("{}\t{}\t{}\t{}\t{}\n".format(e.kind, e.severity, repr(float(e.parameter)), e.count, e.checksum))
    logger.info("wrote {} sub-datasets to {}".format(len(entries), out_dir))
    return entries


def read_suite_manifest(out_dir: str) -> List[SuiteEntry]:
    entries = []
    with open(os.path.join(out_dir, MANIFEST), "r") as f:
        for number, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError("{}:{}: expected 5 tab-separated fields, got {}".format(MANIFEST, number, len(parts)))
            kind, severity, parameter, count, checksum = parts
            entries.append(SuiteEntry(kind, int(severity), float(parameter), int(count), checksum,
                                      os.path.join(kind, severity, DATA_FILE)))
    return entries


def load_corruption_suite(out_dir: str, verify: bool = False) -> CorruptionSuite:
    """
    Read a suite written by :func:`build_corruption_suite`.

    :param verify: recompute checksums and raise ValueError on mismatch
    """
    clean = read_dataset(os.path.join(out_dir, CLEAN_DIR, DATA_FILE), split="test")
    suite = CorruptionSuite(clean)
    for entry in read_suite_manifest(out_dir):
        path = os.path.join(out_dir, entry.path)
        if verify and _sha256(path) != entry.checksum:
            raise ValueError("checksum mismatch for {}".format(path))
        data = read_dataset(path, split="test")
        if len(data) != entry.count:
            raise ValueError("{} holds {} examples, manifest says {}".format(path, len(data), entry.count))
        suite.entries.append(entry)
        suite.datasets[(entry.kind, entry.severity)] = data
    return suite
