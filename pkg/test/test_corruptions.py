import os

import numpy as np
import pytest

from pda_lab.corruptions import (
    CATEGORIES,
    KINDS,
    SEVERITIES,
    CorruptionSpec,
    build_corruption_suite,
    category_of,
    corrupt,
    corrupt_images,
    disk_kernel,
    jpeg_quantization_table,
    kinds_for,
    load_corruption_suite,
    motion_kernel,
    pixelate_size,
    plasma_fractal,
    read_suite_manifest,
)
from pda_lab.data.datasets import gen_shapes


@pytest.fixture(scope="module")
def shape_image():
    return gen_shapes(4, size=32, seed=5).images[0]


@pytest.fixture(scope="module")
def tiny():
    return gen_shapes(4, size=8, seed=2)


def mse(a, b):
    return float(np.mean((a - b) ** 2))


def test_zero_brightness_is_identity(shape_image):
    spec = CorruptionSpec("brightness", 3, parameter=0.)
    np.testing.assert_array_equal(corrupt(shape_image, spec), shape_image)


def test_brightness_on_grayscale_is_a_shift():
    x = np.full((1, 4, 4), 0.3)
    np.testing.assert_allclose(corrupt(x, CorruptionSpec("brightness", 2)), np.full((1, 4, 4), 0.5))


@pytest.mark.parametrize("severity", SEVERITIES)
def test_impulse_fraction_is_binomial(severity):
    x = np.full((3, 32, 32), 0.5)
    spec = CorruptionSpec("impulse_noise", severity, seed=1)
    f, P = spec.value, x.size
    changed = np.mean(corrupt(x, spec) != x)
    assert abs(changed - f) <= 3 * np.sqrt(f * (1 - f) / P)


@pytest.mark.parametrize("kind", ["gaussian_noise", "contrast", "brightness", "defocus_blur", "motion_blur",
                                  "zoom_blur"])
def test_damage_grows_with_severity(kind, shape_image):
    errors = [mse(corrupt(shape_image, CorruptionSpec(kind, s, seed=3)), shape_image) for s in SEVERITIES]
    assert all(a < b for a, b in zip(errors, errors[1:])), errors


def test_pixelate_is_coarser_at_high_severity(shape_image):
    mild = mse(corrupt(shape_image, CorruptionSpec("pixelate", 1)), shape_image)
    harsh = mse(corrupt(shape_image, CorruptionSpec("pixelate", 5)), shape_image)
    assert harsh > mild


@pytest.mark.parametrize("side", [8, 16, 32])
def test_pixelate_sizes_shrink_with_severity(side):
    sizes = [pixelate_size(side, CorruptionSpec("pixelate", s).value) for s in SEVERITIES]
    assert all(a > b for a, b in zip(sizes, sizes[1:])), sizes
    assert sizes[0] < side


def test_pixelate_damage_grows_on_small_shapes():
    images = gen_shapes(100, size=16, seed=1).images
    errors = [mse(corrupt_images(images, CorruptionSpec("pixelate", s)), images) for s in SEVERITIES]
    assert all(a < b for a, b in zip(errors, errors[1:])), errors


@pytest.mark.parametrize("kind", KINDS)
def test_every_kind_keeps_shape_and_range(kind, tiny):
    for severity in (1, 5):
        out = corrupt(tiny.images[1], CorruptionSpec(kind, severity, seed=7), index=1)
        assert out.shape == tiny.images[1].shape
        assert out.min() >= 0. and out.max() <= 1.


@pytest.mark.parametrize("kind", ["gaussian_noise", "fog", "elastic"])
def test_streams_depend_on_index_only(kind, tiny):
    spec = CorruptionSpec(kind, 2, seed=11)
    batch = corrupt_images(tiny.images, spec)
    np.testing.assert_array_equal(batch[2], corrupt(tiny.images[2], spec, index=2))
    np.testing.assert_array_equal(corrupt_images(tiny.images, spec, workers=3), batch)


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        corrupt(np.full((1, 4, 4), 1.5), CorruptionSpec("contrast"))
    with pytest.raises(ValueError):
        corrupt(np.full(16, 0.5), CorruptionSpec("defocus_blur"))
    with pytest.raises(ValueError):
        CorruptionSpec("snow")
    with pytest.raises(ValueError):
        CorruptionSpec("fog", severity=6)


def test_kernels_and_tables():
    assert disk_kernel(1.).sum() == pytest.approx(1.)
    assert np.count_nonzero(disk_kernel(1.)) == 5
    k = motion_kernel(3)
    assert k.sum() == pytest.approx(1.) and k[0, 2] == k[2, 0] > 0 and k[0, 0] == 0
    assert np.all(jpeg_quantization_table(7) >= jpeg_quantization_table(25))
    plasma = plasma_fractal(16, np.random.default_rng(0))
    assert plasma.min() == 0. and plasma.max() == 1.
    with pytest.raises(ValueError):
        plasma_fractal(12, np.random.default_rng(0))


def test_categories():
    assert category_of("jpeg") == "digital"
    assert kinds_for(["noise", "gaussian_noise"]) == list(CATEGORIES["noise"])
    assert kinds_for(["all"]) == list(KINDS)
    assert len(KINDS) == 12
    with pytest.raises(ValueError):
        kinds_for(["frost"])


def test_suite_layout_and_checksums(tiny, tmp_path):
    first, second = str(tmp_path / "a"), str(tmp_path / "b")
    entries = build_corruption_suite(tiny, seed=4, out_dir=first)
    assert len(entries) == 60
    assert all(e.count == len(tiny) for e in entries)
    again = build_corruption_suite(tiny, seed=4, out_dir=second, workers=2)
    assert [e.checksum for e in entries] == [e.checksum for e in again]
    assert read_suite_manifest(first) == entries
    suite = load_corruption_suite(first, verify=True)
    assert suite.kinds == list(KINDS)
    assert len(suite.get("fog", 3)) == len(tiny)
    with pytest.raises(KeyError):
        suite.get("fog", 6)


def test_single_kind_suite(tiny, tmp_path):
    out = str(tmp_path / "suite")
    entries = build_corruption_suite(tiny, kinds=["gaussian_noise"], out_dir=out)
    assert [(e.kind, e.severity) for e in entries] == [("gaussian_noise", s) for s in SEVERITIES]
    assert sorted(os.listdir(out)) == ["clean", "gaussian_noise", "manifest.txt"]


def test_tampered_suite_fails_verification(tiny, tmp_path):
    out = str(tmp_path / "suite")
    build_corruption_suite(tiny, kinds=["contrast"], out_dir=out)
    with open(os.path.join(out, "contrast", "2", "data.bin"), "r+b") as f:
        f.seek(-1, os.SEEK_END)
        last = f.read(1)
        f.seek(-1, os.SEEK_END)
        f.write(bytes([last[0] ^ 0xFF]))
    with pytest.raises(ValueError, match="checksum"):
        load_corruption_suite(out, verify=True)
