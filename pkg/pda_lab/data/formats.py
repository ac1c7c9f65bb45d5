"""
On-disk formats: the PDAD dataset container, IDX image/label files, CSV matrices and portable any-maps (PGM/PPM).
"""
from typing import Sequence, Tuple

import csv
import struct

import numpy as np
from PIL import Image

from pda_lab.data.datasets import Dataset, gen_blobs, gen_shapes
from pda_lab.tensor import tensor_from_bytes, tensor_to_bytes

import logging
logger = logging.getLogger(__name__)


DATASET_MAGIC = b"PDAD"

# IDX type byte -> (big-endian numpy dtype, item size)
IDX_DTYPES = {
    0x08: (">u1", 1),
    0x09: (">i1", 1),
    0x0B: (">i2", 2),
    0x0C: (">i4", 4),
    0x0D: (">f4", 4),
    0x0E: (">f8", 8),
}


class FormatError(ValueError):
    """Bad magic, truncated payload or unsupported dtype."""
    pass


# ---------------------------------------------------------------------------------------------------------------------
# PDAD datasets

def dataset_to_bytes(dataset: Dataset) -> bytes:
    """
    Little-endian: magic "PDAD", u32 N, u32 m, images as a PDAT tensor, N x u32 labels, u32 length + UTF-8 provenance.
    """
    provenance = dataset.provenance.encode("utf-8")
    return b"".join([DATASET_MAGIC, struct.pack("<II", len(dataset), dataset.num_classes),
                     tensor_to_bytes(dataset.images), dataset.labels.astype("<u4").tobytes(),
                     struct.pack("<I", len(provenance)), provenance])


def dataset_from_bytes(buffer: bytes, split: str = "train") -> Dataset:
    if buffer[:4] != DATASET_MAGIC:
        raise FormatError("bad dataset magic {!r}".format(bytes(buffer[:4])))
    if len(buffer) < 12:
        raise FormatError("truncated dataset header: expected 12 bytes, got {}".format(len(buffer)))
    n, m = struct.unpack_from("<II", buffer, 4)
    try:
        images, offset = tensor_from_bytes(buffer, 12)
    except ValueError as e:
        raise FormatError(str(e)) from e
    if images.shape[0] != n:
        raise FormatError("header announces {} images, tensor holds {}".format(n, images.shape[0]))
    if len(buffer) < offset + 4 * n + 4:
        raise FormatError("truncated labels: expected {} bytes, got {}".format(4 * n + 4, len(buffer) - offset))
    labels = np.frombuffer(buffer, dtype="<u4", count=n, offset=offset).astype(np.int64)
    offset += 4 * n
    length, = struct.unpack_from("<I", buffer, offset)
    offset += 4
    if len(buffer) < offset + length:
        raise FormatError("truncated provenance: expected {} bytes, got {}".format(length, len(buffer) - offset))
    provenance = bytes(buffer[offset:offset + length]).decode("utf-8")
    return Dataset(images.data, labels, m, split, provenance)


def write_dataset(path: str, dataset: Dataset):
    with open(path, "wb") as f:
        f.write(dataset_to_bytes(dataset))
    logger.info("wrote {} examples to {}".format(len(dataset), path))


def read_dataset(path: str, split: str = "train") -> Dataset:
    with open(path, "rb") as f:
        return dataset_from_bytes(f.read(), split)


# ---------------------------------------------------------------------------------------------------------------------
# IDX

def idx_from_bytes(buffer: bytes) -> np.ndarray:
    """
    Decode an IDX file: magic bytes (0x00, 0x00, dtype, rank), rank big-endian u32 extents, big-endian payload.
    """
    if len(buffer) < 4 or buffer[0] != 0 or buffer[1] != 0:
        raise FormatError("bad IDX magic {!r}".format(bytes(buffer[:4])))
    dtype_code, rank = buffer[2], buffer[3]
    if dtype_code not in IDX_DTYPES:
        raise FormatError("unsupported IDX dtype 0x{:02X}".format(dtype_code))
    header = 4 + 4 * rank
    if len(buffer) < header:
        raise FormatError("truncated IDX header: expected {} bytes, got {}".format(header, len(buffer)))
    shape = struct.unpack_from(">{}I".format(rank), buffer, 4)
    dtype, size = IDX_DTYPES[dtype_code]
    expected = size * int(np.prod(shape, dtype=np.int64))
    if len(buffer) - header < expected:
        raise FormatError("truncated IDX payload: expected {} bytes, got {}".format(expected, len(buffer) - header))
    return np.frombuffer(buffer, dtype=dtype, count=expected // size, offset=header).reshape(shape)


def idx_to_bytes(array: np.ndarray) -> bytes:
    """Encode a u8 array (the only dtype written)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise FormatError("IDX writer supports u8 only, got {}".format(array.dtype))
    return (bytes([0, 0, 0x08, array.ndim]) + struct.pack(">{}I".format(array.ndim), *array.shape)
            + array.tobytes(order="C"))


def read_idx(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return idx_from_bytes(f.read())


def write_idx(path: str, array: np.ndarray):
    with open(path, "wb") as f:
        f.write(idx_to_bytes(array))


def load_idx(images_path: str, labels_path: str, split: str = "train") -> Dataset:
    """
    Image/label IDX pair as a dataset. u8 images are scaled by 1/255; rank-3 images [N, H, W] gain a channel axis.
    """
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.dtype == np.uint8:
        images = images.astype(np.float64) / 255.
    else:
        images = images.astype(np.float64)
    if images.ndim == 3:
        images = images[:, None, :, :]
    if labels.ndim != 1:
        raise FormatError("label file must have rank 1, got shape {}".format(labels.shape))
    return Dataset(images, labels.astype(np.int64), max(int(labels.max()) + 1, 2), split,
                   "idx({}, {})".format(images_path, labels_path))


def to_u8(images: np.ndarray) -> np.ndarray:
    return np.round(np.clip(images, 0., 1.) * 255.).astype(np.uint8)


# ---------------------------------------------------------------------------------------------------------------------
# Reports and images

def write_matrix_csv(path: str, matrix: np.ndarray):
    """Rows of comma separated values with 6 decimals."""
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows([["{:.6f}".format(v) for v in row] for row in np.atleast_2d(matrix)])


def write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence[object]]):
    """Header plus rows; floats are written with 6 decimals."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow(["{:.6f}".format(v) if isinstance(v, float) else v for v in row])


def scale_to_u8(values: np.ndarray) -> np.ndarray:
    """Linear map of [min, max] onto 0..255 (a constant array maps to mid grey)."""
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi <= lo:
        return np.full(np.shape(values), 128, dtype=np.uint8)
    return np.round((values - lo) / (hi - lo) * 255.).astype(np.uint8)


def write_pgm(path: str, image: np.ndarray):
    """Binary graymap (P5) of a [H, W] u8 array."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("PGM needs a 2-D u8 array, got shape {} dtype {}".format(image.shape, image.dtype))
    Image.fromarray(image).save(path, format="PPM")


def write_ppm(path: str, image: np.ndarray):
    """Binary pixmap (P6) of a [H, W, 3] u8 array."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError("PPM needs a [H, W, 3] u8 array, got shape {} dtype {}".format(image.shape, image.dtype))
    Image.fromarray(image).save(path, format="PPM")


def write_image(path: str, image: np.ndarray) -> str:
    """
    Write a [C, H, W] image in [0, 1]: grayscale as PGM, 3 channels as PPM, other channel counts as a PGM of the
    channel mean.

    :return: the path written (extension adjusted to .pgm/.ppm)
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    stem = path.rsplit(".", 1)[0] if path.lower().endswith((".pgm", ".ppm")) else path
    if image.shape[0] == 3:
        path = stem + ".ppm"
        write_ppm(path, to_u8(np.transpose(image, (1, 2, 0))))
    else:
        path = stem + ".pgm"
        write_pgm(path, to_u8(image.mean(axis=0)))
    return path


def read_pnm(path: str) -> Tuple[np.ndarray, str]:
    """Pixel array and Pillow mode of a PGM/PPM file."""
    with Image.open(path) as im:
        return np.asarray(im), im.mode


# ---------------------------------------------------------------------------------------------------------------------
# Dataset sources

def _parse_generator_args(text: str) -> dict:
    args = dict()
    for item in filter(None, (s.strip() for s in text.split(","))):
        if "=" not in item:
            raise ValueError("expected key=value in generator spec, got '{}'".format(item))
        key, value = (s.strip() for s in item.split("=", 1))
        args[key] = value
    return args


def resolve_dataset(source: str, split: str = "train") -> Dataset:
    """
    Dataset from a source string: a PDAD file path, `idx:<images>,<labels>`, or a generator spec
    `shapes:n=2000,size=16,seed=1` / `blobs:n=500,d=2,classes=2,separation=6,seed=1`.
    """
    kind, _, rest = source.partition(":")
    if kind == "idx" and rest:
        paths = rest.split(",")
        if len(paths) != 2:
            raise ValueError("idx source needs '<images>,<labels>', got '{}'".format(rest))
        return load_idx(paths[0], paths[1], split)
    if kind in ("shapes", "blobs") and (rest or source == kind):
        args = _parse_generator_args(rest)
        try:
            if kind == "shapes":
                allowed = {"n": int, "size": int, "seed": int}
            else:
                allowed = {"n": int, "d": int, "classes": int, "separation": float, "seed": int}
            unknown = set(args) - set(allowed)
            if unknown:
                raise ValueError("unknown {} parameter(s): {}".format(kind, ", ".join(sorted(unknown))))
            kwargs = {k: allowed[k](v) for k, v in args.items()}
        except ValueError as e:
            raise ValueError("bad dataset spec '{}': {}".format(source, e)) from e
        kwargs.setdefault("n", 1000)
        dataset = gen_shapes(**kwargs) if kind == "shapes" else gen_blobs(**kwargs)
        dataset.split = split
        return dataset
    return read_dataset(source, split)
