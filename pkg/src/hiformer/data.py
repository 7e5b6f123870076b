"""Samples, synthetic ellipse data, augmentation, directory datasets.

The synthetic generator paints K-1 rotated ellipses over textured noise.
Image edges are anti-aliased; the mask is the exact pixel-center
geometry, so the learning target is crisp while the image looks soft.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import pnm
from .errors import BadManifest, LabelOutOfRange


@dataclass
class Sample:
    image: np.ndarray  # float32 (C, H, W) in [0, 1]
    mask: np.ndarray  # int64 (H, W), values in [0, K)

    def validate(self, num_classes):
        if self.image.shape[1:] != self.mask.shape:
            raise BadManifest(
                f"image {self.image.shape} vs mask {self.mask.shape}"
            )
        lo, hi = int(self.mask.min()), int(self.mask.max())
        if lo < 0 or hi >= num_classes:
            raise LabelOutOfRange(
                f"mask labels span [{lo}, {hi}] but K={num_classes}"
            )
        return self


def _texture(rng, hw):
    """Low-frequency sinusoid mix plus pixel noise, centered near 0.3."""
    yy, xx = np.meshgrid(np.arange(hw), np.arange(hw), indexing="ij")
    fy, fx = rng.uniform(0.5, 2.5, size=2)
    py, px = rng.uniform(0, 2 * np.pi, size=2)
    wave = np.sin(2 * np.pi * fy * yy / hw + py) * np.sin(2 * np.pi * fx * xx / hw + px)
    img = 0.28 + 0.06 * wave + rng.normal(0.0, 0.03, size=(hw, hw))
    return img


def synth_dataset(n, hw, num_classes, seed=0):
    """n samples of K-1 ellipse classes on a textured background."""
    rng = np.random.default_rng(seed)
    samples = []
    yy, xx = np.meshgrid(np.arange(hw), np.arange(hw), indexing="ij")
    for _ in range(n):
        img = _texture(rng, hw)
        mask = np.zeros((hw, hw), dtype=np.int64)
        for cls in range(1, num_classes):
            cy, cx = rng.uniform(0.25 * hw, 0.75 * hw, size=2)
            a = rng.uniform(0.10 * hw, 0.22 * hw)
            b = rng.uniform(0.10 * hw, 0.22 * hw)
            theta = rng.uniform(0, np.pi)
            ct, st = np.cos(theta), np.sin(theta)
            u = (xx - cx) * ct + (yy - cy) * st
            v = -(xx - cx) * st + (yy - cy) * ct
            d = (u / a) ** 2 + (v / b) ** 2
            inside = d <= 1.0
            mask[inside] = cls
            # ~1.5 px linear ramp at the rim; the mask stays exact.
            alpha = np.clip((1.0 - d) * min(a, b) / 1.5, 0.0, 1.0)
            level = 0.60 + 0.30 * cls / max(num_classes - 1, 1)
            img = img * (1 - alpha) + (level + rng.normal(0, 0.02)) * alpha
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        samples.append(Sample(image=img[None], mask=mask).validate(num_classes))
    return samples


def augment(sample, rng):
    """Random flips (p=0.5 each axis) and a k*90-degree rotation,
    applied identically to image and mask; exact, no resampling."""
    img, mask = sample.image, sample.mask
    if rng.random() < 0.5:
        img, mask = img[:, :, ::-1], mask[:, ::-1]
    if rng.random() < 0.5:
        img, mask = img[:, ::-1, :], mask[::-1, :]
    k = int(rng.integers(0, 4))
    if k:
        img = np.rot90(img, k, axes=(1, 2))
        mask = np.rot90(mask, k)
    return Sample(image=np.ascontiguousarray(img),
                  mask=np.ascontiguousarray(mask))


def augment_small_angle(sample, rng, max_degrees=15.0):
    """Optional interpolating rotation (nearest labels); off by default."""
    from scipy import ndimage

    angle = float(rng.uniform(-max_degrees, max_degrees))
    img = np.stack([
        ndimage.rotate(c, angle, reshape=False, order=1, mode="nearest")
        for c in sample.image
    ])
    mask = ndimage.rotate(sample.mask, angle, reshape=False, order=0,
                          mode="nearest")
    return Sample(image=np.clip(img, 0, 1).astype(np.float32),
                  mask=mask.astype(np.int64))


def split_dataset(samples, val_frac=0.2, seed=0):
    """Deterministic shuffle split; val gets ceil(n * val_frac)."""
    n = len(samples)
    order = np.random.default_rng([seed, 0]).permutation(n)
    n_val = max(1, int(np.ceil(n * val_frac))) if n > 1 else 0
    val_idx = set(order[:n_val].tolist())
    train = [samples[i] for i in range(n) if i not in val_idx]
    val = [samples[i] for i in range(n) if i in val_idx]
    return train, val


def save_dataset(samples, root):
    """Write images/ and masks/ rasters named by zero-padded index."""
    img_dir = os.path.join(root, "images")
    mask_dir = os.path.join(root, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    for i, s in enumerate(samples):
        stem = f"{i:05d}"
        ext = "ppm" if s.image.shape[0] == 3 else "pgm"
        pnm.save_image(os.path.join(img_dir, f"{stem}.{ext}"), s.image)
        pnm.save_mask(os.path.join(mask_dir, f"{stem}.pgm"), s.mask)


def load_dataset(root, num_classes):
    """Read images/ and masks/ pairs matched by stem; validate labels."""
    img_dir = os.path.join(root, "images")
    mask_dir = os.path.join(root, "masks")
    if not os.path.isdir(img_dir) or not os.path.isdir(mask_dir):
        raise BadManifest(f"{root} must contain images/ and masks/")
    masks = {}
    for fname in os.listdir(mask_dir):
        stem = os.path.splitext(fname)[0]
        masks[stem] = os.path.join(mask_dir, fname)
    samples = []
    for fname in sorted(os.listdir(img_dir)):
        stem = os.path.splitext(fname)[0]
        if stem not in masks:
            raise BadManifest(f"image '{fname}' has no mask with stem '{stem}'")
        image = pnm.load_image(os.path.join(img_dir, fname))
        mask = pnm.load_mask(masks.pop(stem))
        samples.append(Sample(image=image, mask=mask).validate(num_classes))
    if masks:
        raise BadManifest(f"masks without images: {sorted(masks)}")
    if not samples:
        raise BadManifest(f"{root}: no samples found")
    return samples
