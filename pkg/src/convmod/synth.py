"""Synthetic glyph datasets for desk-scale training and search experiments.

Classes are parametric grayscale shapes (disk, cross, stripes, ring,
checker) with jittered position/scale, amplitude variation and additive
pixel noise. Pairs like disk/ring and cross/stripes overlap visually, so
the task gets genuinely harder as ``noise`` grows, which is what the
weak-model experiments need.
"""

from __future__ import annotations

import numpy as np

from .store import LabeledDataset

CLASS_NAMES = ("disk", "cross", "stripes", "ring", "checker")
MAX_CLASSES = len(CLASS_NAMES)


def make_shapes_dataset(
    count: int,
    num_classes: int = 3,
    size: int = 16,
    noise: float = 0.1,
    label_noise: float = 0.0,
    seed: int = 0,
) -> LabeledDataset:
    """Balanced dataset of ``count`` single-channel size x size images."""
    if not (1 <= num_classes <= MAX_CLASSES):
        raise ValueError(f"num_classes must be in [1, {MAX_CLASSES}]")
    rng = np.random.default_rng(np.random.PCG64(seed))
    images = np.zeros((count, 1, size, size), dtype=np.float32)
    labels = np.zeros(count, dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size]
    for i in range(count):
        label = i % num_classes
        labels[i] = label
        images[i, 0] = _render(label, size, yy, xx, rng)
    if noise > 0:
        images += rng.normal(0.0, noise, size=images.shape).astype(np.float32)
        np.clip(images, 0.0, 1.0, out=images)
    if label_noise > 0:
        flip = rng.random(count) < label_noise
        labels[flip] = rng.integers(0, num_classes, size=int(flip.sum()))
    perm = rng.permutation(count)
    return LabeledDataset(images[perm], labels[perm], num_classes)


def _render(label: int, size: int, yy, xx, rng) -> np.ndarray:
    amp = rng.uniform(0.6, 1.0)
    cx = size / 2 + rng.uniform(-size / 8, size / 8)
    cy = size / 2 + rng.uniform(-size / 8, size / 8)
    img = np.zeros((size, size), dtype=np.float32)
    name = CLASS_NAMES[label]
    if name == "disk":
        r = rng.uniform(size * 0.2, size * 0.33)
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = amp
    elif name == "cross":
        t = max(1, int(rng.uniform(1, max(1.0, size / 8))))
        half = int(rng.uniform(size * 0.28, size * 0.45))
        ci, cj = int(round(cy)), int(round(cx))
        img[max(0, ci - half):ci + half, max(0, cj - t):cj + t] = amp
        img[max(0, ci - t):ci + t, max(0, cj - half):cj + half] = amp
    elif name == "stripes":
        period = rng.integers(3, 6)
        phase = rng.integers(0, period)
        img[((yy + phase) % period) < max(1, period // 2)] = amp
    elif name == "ring":
        r = rng.uniform(size * 0.25, size * 0.38)
        width = rng.uniform(1.2, 2.4)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        img[(d2 <= r * r) & (d2 >= (r - width) ** 2)] = amp
    else:  # checker
        block = rng.integers(2, 5)
        phase = rng.integers(0, 2)
        img[(((yy // block) + (xx // block) + phase) % 2) == 0] = amp
    return img
