"""Procedural segmentation-annotated corpus for desk-scale runs.

Real training uses any `images/ + masks/` corpus (COCO-stuff or ADE20K
exports).  This generator builds small textured scenes with matching label
maps so the whole pipeline can be exercised offline: a background region
plus a few random ellipses/rectangles, each with its own color and texture.
"""

from __future__ import annotations

import os

import numpy as np

from .imageops import save_image, save_label_map
from .seeds import derive_seed, make_rng


def toy_scene(size: int, rng: np.random.Generator,
              min_regions: int = 3, max_regions: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """One textured scene and its label map (labels 1..K cover every pixel)."""
    n_shapes = int(rng.integers(min_regions - 1, max_regions))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    labels = np.ones((size, size), dtype=np.int32)
    img = _textured_fill(size, rng, yy, xx)

    for shape_label in range(2, n_shapes + 2):
        mask = _random_shape(size, rng, yy, xx)
        # keep every region a workable size
        if mask.sum() < (size * size) // 50:
            continue
        fill = _textured_fill(size, rng, yy, xx)
        img[mask] = fill[mask]
        labels[mask] = shape_label
    return np.clip(img, 0.0, 1.0).astype(np.float32), labels


def _textured_fill(size, rng, yy, xx) -> np.ndarray:
    base = rng.uniform(0.2, 0.8, size=3).astype(np.float32)
    freq = rng.uniform(2.0, 8.0, size=2)
    phase = rng.uniform(0.0, 2 * np.pi, size=2)
    wave = 0.08 * np.sin(2 * np.pi * freq[0] * yy + phase[0]) \
        + 0.08 * np.sin(2 * np.pi * freq[1] * xx + phase[1])
    grain = rng.normal(0.0, 0.03, size=(size, size)).astype(np.float32)
    tint = rng.uniform(-0.08, 0.08, size=3).astype(np.float32)
    field = (wave + grain)[..., None].astype(np.float32)
    return np.clip(base + field + tint * (yy + xx)[..., None] * 0.5, 0.05, 0.95)


def _random_shape(size, rng, yy, xx) -> np.ndarray:
    cy, cx = rng.uniform(0.2, 0.8, size=2)
    if rng.random() < 0.5:
        ry, rx = rng.uniform(0.08, 0.3, size=2)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        ur = np.cos(theta) * dy + np.sin(theta) * dx
        vr = -np.sin(theta) * dy + np.cos(theta) * dx
        return (ur / ry) ** 2 + (vr / rx) ** 2 <= 1.0
    hy, hx = rng.uniform(0.08, 0.25, size=2)
    return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)


def make_toy_corpus(root, count: int = 200, size: int = 64, seed: int = 0,
                    min_regions: int = 3, max_regions: int = 5) -> str:
    """Write a toy corpus under `root/images` + `root/masks`."""
    img_dir = os.path.join(str(root), "images")
    mask_dir = os.path.join(str(root), "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    for i in range(count):
        rng = make_rng(derive_seed(seed, i))
        img, labels = toy_scene(size, rng, min_regions, max_regions)
        stem = f"toy_{i:05d}"
        save_image(os.path.join(img_dir, stem + ".png"), img)
        save_label_map(os.path.join(mask_dir, stem + ".png"), labels)
    return str(root)
