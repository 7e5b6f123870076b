"""Synthetic data, augmentation invariants, raster I/O byte layouts."""

from __future__ import annotations

import os

import numpy as np
import pytest

from hiformer import pnm
from hiformer.data import (
    Sample,
    augment,
    augment_small_angle,
    load_dataset,
    save_dataset,
    split_dataset,
    synth_dataset,
)
from hiformer.errors import (
    BadManifest,
    CorruptHeader,
    LabelOutOfRange,
    UnsupportedFormat,
)


# -- synthetic generator ------------------------------------------------------

def test_synth_shapes_and_ranges():
    samples = synth_dataset(5, 32, 3, seed=0)
    assert len(samples) == 5
    for s in samples:
        assert s.image.shape == (1, 32, 32)
        assert s.image.dtype == np.float32
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert s.mask.shape == (32, 32)
        assert s.mask.dtype == np.int64
        assert 0 <= s.mask.min() and s.mask.max() < 3


def test_synth_has_foreground():
    for s in synth_dataset(10, 64, 2, seed=1):
        frac = (s.mask > 0).mean()
        assert 0.01 < frac < 0.5


def test_synth_deterministic():
    a = synth_dataset(3, 32, 2, seed=7)
    b = synth_dataset(3, 32, 2, seed=7)
    for sa, sb in zip(a, b):
        np.testing.assert_array_equal(sa.image, sb.image)
        np.testing.assert_array_equal(sa.mask, sb.mask)
    c = synth_dataset(3, 32, 2, seed=8)
    assert not np.array_equal(a[0].image, c[0].image)


def test_sample_validate():
    good = Sample(image=np.zeros((1, 4, 4), np.float32),
                  mask=np.zeros((4, 4), np.int64))
    good.validate(2)
    with pytest.raises(BadManifest):
        Sample(image=np.zeros((1, 4, 4), np.float32),
               mask=np.zeros((5, 4), np.int64)).validate(2)
    bad_label = Sample(image=np.zeros((1, 4, 4), np.float32),
                       mask=np.full((4, 4), 3, np.int64))
    with pytest.raises(LabelOutOfRange):
        bad_label.validate(2)


# -- augmentation -------------------------------------------------------------

def test_augment_preserves_histograms():
    sample = synth_dataset(1, 32, 3, seed=2)[0]
    rng = np.random.default_rng(0)
    for _ in range(8):
        out = augment(sample, rng)
        np.testing.assert_array_equal(
            np.sort(out.image, axis=None), np.sort(sample.image, axis=None)
        )
        np.testing.assert_array_equal(
            np.sort(out.mask, axis=None), np.sort(sample.mask, axis=None)
        )


def test_augment_moves_image_and_mask_together():
    sample = synth_dataset(1, 32, 2, seed=3)[0]
    rng = np.random.default_rng(1)
    for _ in range(8):
        out = augment(sample, rng)
        # Foreground pixels must carry their (brighter) intensities along.
        fg_mean_in = sample.image[0][sample.mask > 0].mean()
        fg_mean_out = out.image[0][out.mask > 0].mean()
        assert fg_mean_out == pytest.approx(fg_mean_in, abs=1e-6)


def test_augment_deterministic_under_seed():
    sample = synth_dataset(1, 16, 2, seed=4)[0]
    a = augment(sample, np.random.default_rng(5))
    b = augment(sample, np.random.default_rng(5))
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.mask, b.mask)


def test_small_angle_rotation_keeps_contract():
    sample = synth_dataset(1, 32, 2, seed=6)[0]
    out = augment_small_angle(sample, np.random.default_rng(0))
    assert out.image.shape == sample.image.shape
    assert out.image.dtype == np.float32
    assert out.mask.dtype == np.int64
    assert set(np.unique(out.mask)) <= {0, 1}


# -- splitting ----------------------------------------------------------------

def test_split_sizes_and_disjointness():
    samples = synth_dataset(10, 16, 2, seed=0)
    train, val = split_dataset(samples, val_frac=0.2, seed=0)
    assert len(train) == 8 and len(val) == 2
    train_ids = {id(s) for s in train}
    assert all(id(s) not in train_ids for s in val)


def test_split_deterministic():
    samples = synth_dataset(10, 16, 2, seed=0)
    a_train, a_val = split_dataset(samples, 0.2, seed=1)
    b_train, b_val = split_dataset(samples, 0.2, seed=1)
    assert [id(s) for s in a_train] == [id(s) for s in b_train]
    assert [id(s) for s in a_val] == [id(s) for s in b_val]


def test_split_rounds_up():
    samples = synth_dataset(7, 16, 2, seed=0)
    train, val = split_dataset(samples, 0.2, seed=0)
    assert len(val) == 2  # ceil(7 * 0.2)
    assert len(train) == 5


# -- raster byte layout -------------------------------------------------------

def test_p5_scaling(tmp_path):
    path = tmp_path / "g.pgm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    img = pnm.load_image(str(path))
    assert img.shape == (1, 2, 2)
    np.testing.assert_allclose(
        img[0], [[0.0, 1.0], [128 / 255, 64 / 255]], atol=1e-7
    )


def test_p6_single_pixel_byte_order(tmp_path):
    # One pixel, payload R,G,B = 10,20,30: channel order must survive.
    path = tmp_path / "c.ppm"
    path.write_bytes(b"P6\n1 1\n255\n" + bytes([10, 20, 30]))
    img = pnm.load_image(str(path))
    assert img.shape == (3, 1, 1)
    np.testing.assert_allclose(img[:, 0, 0] * 255, [10, 20, 30], atol=1e-5)


def test_header_comments(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# a comment\n2 1 # inline\n255\n" + bytes([7, 9]))
    arr, channels = pnm.read_pnm(str(path))
    assert channels == 1
    np.testing.assert_array_equal(arr, [[7, 9]])


def test_write_then_read_identical_bytes(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(3, 4, 5)).astype(np.float32) / 255.0
    path = tmp_path / "x.ppm"
    pnm.save_image(str(path), img)
    pnm.save_image(str(tmp_path / "y.ppm"), pnm.load_image(str(path)))
    assert path.read_bytes() == (tmp_path / "y.ppm").read_bytes()


def test_mask_round_trip(tmp_path):
    mask = np.random.default_rng(1).integers(0, 9, size=(6, 7)).astype(np.int64)
    path = tmp_path / "m.pgm"
    pnm.save_mask(str(path), mask)
    np.testing.assert_array_equal(pnm.load_mask(str(path)), mask)


def test_raster_error_paths(tmp_path):
    p4 = tmp_path / "a.pbm"
    p4.write_bytes(b"P4\n2 2\n")
    with pytest.raises(UnsupportedFormat):
        pnm.read_pnm(str(p4))

    deep = tmp_path / "b.pgm"
    deep.write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
    with pytest.raises(UnsupportedFormat):
        pnm.read_pnm(str(deep))

    short = tmp_path / "c.pgm"
    short.write_bytes(b"P5\n2 2\n255\n" + bytes([1, 2]))
    with pytest.raises(CorruptHeader):
        pnm.read_pnm(str(short))

    alpha = tmp_path / "d.pgm"
    alpha.write_bytes(b"P5\nxx 2\n255\n" + bytes(4))
    with pytest.raises(CorruptHeader):
        pnm.read_pnm(str(alpha))

    with pytest.raises(UnsupportedFormat):
        pnm.save_mask(str(tmp_path / "e.pgm"), np.full((2, 2), 300))


# -- directory datasets -------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    samples = synth_dataset(4, 16, 3, seed=9)
    save_dataset(samples, str(tmp_path))
    loaded = load_dataset(str(tmp_path), num_classes=3)
    assert len(loaded) == 4
    for orig, back in zip(samples, loaded):
        np.testing.assert_array_equal(orig.mask, back.mask)
        # Images pass through one byte quantization.
        assert np.abs(orig.image - back.image).max() <= 0.5 / 255 + 1e-7


def test_dataset_missing_mask(tmp_path):
    samples = synth_dataset(2, 16, 2, seed=10)
    save_dataset(samples, str(tmp_path))
    os.remove(tmp_path / "masks" / "00001.pgm")
    with pytest.raises(BadManifest):
        load_dataset(str(tmp_path), num_classes=2)


def test_dataset_orphan_mask(tmp_path):
    samples = synth_dataset(2, 16, 2, seed=11)
    save_dataset(samples, str(tmp_path))
    os.remove(tmp_path / "images" / "00000.pgm")
    with pytest.raises(BadManifest):
        load_dataset(str(tmp_path), num_classes=2)


def test_dataset_requires_layout(tmp_path):
    with pytest.raises(BadManifest):
        load_dataset(str(tmp_path), num_classes=2)
