"""Synthetic training data: composite degraded inputs plus clean references.

A ground-truth photo with semantic labels is split into N region groups.
The degraded input applies an independent style-variant transformation
(color jitter + unstructured degradations) per group; each reference keeps
its group's pixels style-intact but moves them with style-invariant
transformations (rotation/translation/flips) and fills the rest of the
frame with another photo.  Everything is a pure function of (inputs, seed).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage

from . import degradations as deg
from .imageops import (
    RegionMaskSet,
    clamp01,
    load_image,
    load_label_map,
    resize,
    resize_nearest_mask,
    save_image,
    validate_image,
    validate_label_map,
)
from .seeds import derive_seed, make_rng

SVT_INCLUDE_PROB = 0.5
_MAX_RESAMPLE = 10_000


# ---------------------------------------------------------------------------
# region partitioning

def partition_regions(labels: np.ndarray, n: int, rng: np.random.Generator) -> RegionMaskSet:
    """Assign each semantic label to one of n groups, none left empty."""
    labels = validate_label_map(labels)
    ids = np.unique(labels)
    ids = ids[ids > 0]
    if n < 1:
        raise ValueError("need at least one group")
    if len(ids) < n:
        raise ValueError(f"label map has {len(ids)} regions, fewer than n={n}")
    for _ in range(_MAX_RESAMPLE):
        assign = rng.integers(0, n, size=len(ids))
        if len(np.unique(assign)) == n:
            break
    else:  # pragma: no cover - p(failure) is astronomically small
        raise RuntimeError("could not draw a non-empty group assignment")
    masks = [np.isin(labels, ids[assign == g]) for g in range(n)]
    return RegionMaskSet(masks, labels > 0)


# ---------------------------------------------------------------------------
# transformations

def apply_svt(
    img: np.ndarray,
    rng: np.random.Generator,
    include_prob: float = SVT_INCLUDE_PROB,
    jitter_magnitudes=deg.JITTER_MAGNITUDES,
    registry: dict | None = None,
    log: list | None = None,
) -> np.ndarray:
    """Style-variant transformation: color jitter then a random-order random
    subset of the registered degradations."""
    registry = deg.DEGRADATION_REGISTRY if registry is None else registry
    out = deg.color_jitter(img, rng, magnitudes=jitter_magnitudes)
    names = list(registry)
    applied = []
    for idx in rng.permutation(len(names)):
        name = names[idx]
        if rng.random() < include_prob:
            out = registry[name](out, rng)
            applied.append(name)
    if log is not None:
        log.append({"svt": applied})
    return out


def apply_sit(
    masked_img: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator,
    log: list | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Style-invariant transformation; pixels and mask move together.

    Order: 90-degree rotation (180 only for non-square frames), translation
    keeping the content in-frame, then left-right and up-down flips.  The
    output is a pure pixel permutation of the masked content.
    """
    img = np.asarray(masked_img, dtype=np.float32)
    mask = np.asarray(mask, dtype=bool)
    if img.shape[:2] != mask.shape:
        raise ValueError("mask and image sizes differ")
    entry: dict = {}

    square = img.shape[0] == img.shape[1]
    k = int(rng.choice((1, 2, 3))) if square else 2
    img = np.rot90(img, k, axes=(0, 1)).copy()
    mask = np.rot90(mask, k, axes=(0, 1)).copy()
    entry["rot90"] = k

    h, w = mask.shape
    rows, cols = np.any(mask, axis=1), np.any(mask, axis=0)
    if rows.any():
        top, bottom = int(np.argmax(rows)), int(h - 1 - np.argmax(rows[::-1]))
        left, right = int(np.argmax(cols)), int(w - 1 - np.argmax(cols[::-1]))
        dy_lo, dy_hi = -top, h - 1 - bottom
        dx_lo, dx_hi = -left, w - 1 - right
        if (dy_lo, dy_hi, dx_lo, dx_hi) != (0, 0, 0, 0):
            dy = int(rng.integers(dy_lo, dy_hi + 1))
            dx = int(rng.integers(dx_lo, dx_hi + 1))
            img = np.roll(img, (dy, dx), axis=(0, 1))
            mask = np.roll(mask, (dy, dx), axis=(0, 1))
            entry["translate"] = [dy, dx]

    if rng.random() < 0.5:
        img, mask = np.flip(img, 1).copy(), np.flip(mask, 1).copy()
        entry["fliplr"] = True
    if rng.random() < 0.5:
        img, mask = np.flip(img, 0).copy(), np.flip(mask, 0).copy()
        entry["flipud"] = True
    if log is not None:
        log.append({"sit": entry})
    return img, mask


def fill_unmasked(img: np.ndarray, mask: np.ndarray, filler: np.ndarray) -> np.ndarray:
    """Complete a masked photo with another image outside the mask."""
    img = np.asarray(img, dtype=np.float32)
    mask = np.asarray(mask, dtype=bool)
    filler = _fit_to(validate_image(filler), img.shape[0], img.shape[1])
    m = mask[..., None].astype(np.float32)
    return clamp01(m * img + (1.0 - m) * filler)


def _fit_to(filler: np.ndarray, h: int, w: int) -> np.ndarray:
    fh, fw = filler.shape[:2]
    if (fh, fw) == (h, w):
        return filler
    if fh >= h and fw >= w:
        top, left = (fh - h) // 2, (fw - w) // 2
        return filler[top:top + h, left:left + w]
    return clamp01(resize(filler, h, w, mode="bilinear"))


# ---------------------------------------------------------------------------
# samples

@dataclass
class SyntheticSample:
    content: np.ndarray            # degraded composite input
    refs: list[np.ndarray]         # style references
    gt: np.ndarray
    masks: RegionMaskSet           # partition used for the composite / refs
    ref_masks: list[np.ndarray]    # where each reference kept real content
    seed: int
    log: list = field(default_factory=list)


@dataclass
class EvalPair:
    degraded: np.ndarray
    reference: np.ndarray
    gt: np.ndarray
    masks: RegionMaskSet           # [degraded regions, untouched regions]
    ref_mask: np.ndarray           # reference's kept-content mask after SIT
    seed: int


def make_sample(gt: np.ndarray, labels: np.ndarray, filler_pool: list[np.ndarray],
                n: int, rng_or_seed, svt=None) -> SyntheticSample:
    """Build one (input, references, ground truth) sample.

    `svt` overrides the style-variant transformation (e.g. to change
    degradation parameters); it must accept (img, rng, log=...).
    """
    gt = validate_image(gt)
    labels = validate_label_map(labels, like=gt)
    rng, seed = _as_rng(rng_or_seed)
    svt = apply_svt if svt is None else svt
    if not filler_pool:
        raise ValueError("filler pool is empty")
    masks = partition_regions(labels, n, rng)
    log: list = []

    content = np.zeros_like(gt)
    for m in masks:
        content += m[..., None] * svt(gt, rng, log=log)
    unlabeled = ~masks.labeled_area
    if unlabeled.any():
        content += unlabeled[..., None] * svt(gt, rng, log=log)
    content = clamp01(content)

    refs, ref_masks = [], []
    for m in masks:
        moved, moved_mask = apply_sit(m[..., None] * gt, m, rng, log=log)
        filler = filler_pool[int(rng.integers(len(filler_pool)))]
        refs.append(fill_unmasked(moved, moved_mask, filler))
        ref_masks.append(moved_mask)
    return SyntheticSample(content=content, refs=refs, gt=gt, masks=masks,
                           ref_masks=ref_masks, seed=seed, log=log)


def make_eval_pair(gt: np.ndarray, labels: np.ndarray, filler_pool: list[np.ndarray],
                   rng_or_seed, svt=None) -> EvalPair:
    """Degrade ceil(L/2) of the regions; reference carries the untouched ones."""
    gt = validate_image(gt)
    labels = validate_label_map(labels, like=gt)
    rng, seed = _as_rng(rng_or_seed)
    svt = apply_svt if svt is None else svt
    ids = np.unique(labels)
    ids = ids[ids > 0]
    if len(ids) < 2:
        raise ValueError("need at least two labeled regions for an eval pair")
    n_sel = math.ceil(len(ids) / 2)
    selected = rng.choice(ids, size=n_sel, replace=False)
    m_sel = np.isin(labels, selected)
    m_keep = (labels > 0) & ~m_sel

    degraded = None
    for _ in range(_MAX_RESAMPLE):
        candidate = gt.copy()
        transformed = svt(gt, rng)
        candidate[m_sel] = transformed[m_sel]
        if not np.array_equal(candidate[m_sel], gt[m_sel]):
            degraded = candidate
            break
    if degraded is None:  # pragma: no cover - identity SVT has ~zero probability
        raise RuntimeError("style-variant transformation kept degenerating to identity")

    moved, moved_mask = apply_sit(m_keep[..., None] * gt, m_keep, rng)
    filler = filler_pool[int(rng.integers(len(filler_pool)))]
    reference = fill_unmasked(moved, moved_mask, filler)
    return EvalPair(degraded=degraded, reference=reference, gt=gt,
                    masks=RegionMaskSet([m_sel, m_keep], labels > 0),
                    ref_mask=moved_mask, seed=seed)


def _as_rng(rng_or_seed) -> tuple[np.random.Generator, int]:
    if isinstance(rng_or_seed, np.random.Generator):
        return rng_or_seed, -1
    seed = int(rng_or_seed)
    return make_rng(seed), seed


# ---------------------------------------------------------------------------
# corpus and dataset I/O

_IMAGE_EXTS = (".png", ".jpg", ".jpeg")


class Corpus:
    """`images/<id>.(png|jpg)` + `masks/<id>.png` directory pair."""

    def __init__(self, root, size: int | None = None):
        self.root = str(root)
        self.size = size
        img_dir = os.path.join(self.root, "images")
        mask_dir = os.path.join(self.root, "masks")
        if not os.path.isdir(img_dir) or not os.path.isdir(mask_dir):
            raise FileNotFoundError(f"{root} must contain images/ and masks/ directories")
        stems = {}
        for name in sorted(os.listdir(img_dir)):
            stem, ext = os.path.splitext(name)
            if ext.lower() in _IMAGE_EXTS:
                stems[stem] = os.path.join(img_dir, name)
        self.ids = [s for s in sorted(stems)
                    if os.path.exists(os.path.join(mask_dir, s + ".png"))]
        if not self.ids:
            raise FileNotFoundError(f"no image/mask pairs found under {root}")
        self._images = stems
        self._mask_dir = mask_dir

    def __len__(self) -> int:
        return len(self.ids)

    def load(self, stem: str) -> tuple[np.ndarray, np.ndarray]:
        img = load_image(self._images[stem])
        labels = load_label_map(os.path.join(self._mask_dir, stem + ".png"))
        if labels.shape != img.shape[:2]:
            raise ValueError(f"mask size mismatch for {stem}")
        if self.size is not None and img.shape[:2] != (self.size, self.size):
            img = clamp01(resize(img, self.size, self.size, mode="bilinear"))
            labels = resize_nearest_mask(labels, self.size, self.size)
        return img, labels

    def load_index(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.load(self.ids[i])


def draw_sample_from_corpus(corpus: Corpus, n_refs: int, seed: int,
                            kind: str = "train", svt=None):
    """Deterministically draw a usable corpus item and build a sample from it."""
    rng = make_rng(seed)
    min_regions = n_refs if kind == "train" else 2
    for _ in range(len(corpus) * 4):
        idx = int(rng.integers(len(corpus)))
        gt, labels = corpus.load_index(idx)
        ids = np.unique(labels)
        if len(ids[ids > 0]) < min_regions:
            continue
        fill_idx = int(rng.integers(len(corpus)))
        if len(corpus) > 1:
            while fill_idx == idx:
                fill_idx = int(rng.integers(len(corpus)))
        filler = [corpus.load_index(fill_idx)[0]]
        if kind == "train":
            return make_sample(gt, labels, filler, n_refs, rng, svt=svt), corpus.ids[idx]
        return make_eval_pair(gt, labels, filler, rng, svt=svt), corpus.ids[idx]
    raise RuntimeError(f"corpus has no item with >= {min_regions} labeled regions")


def write_sample(out_dir, sample: SyntheticSample, meta: dict | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_image(os.path.join(out_dir, "c.png"), sample.content)
    save_image(os.path.join(out_dir, "gt.png"), sample.gt)
    for i, (ref, mask) in enumerate(zip(sample.refs, sample.masks)):
        save_image(os.path.join(out_dir, f"ref_{i}.png"), ref)
        _save_mask(os.path.join(out_dir, f"mask_{i}.png"), mask)
    info = {"seed": sample.seed, "n_refs": len(sample.refs), "kind": "train",
            "transforms": sample.log}
    info.update(meta or {})
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(info, fh, indent=1)


def write_eval_pair(out_dir, pair: EvalPair, meta: dict | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_image(os.path.join(out_dir, "c.png"), pair.degraded)
    save_image(os.path.join(out_dir, "gt.png"), pair.gt)
    save_image(os.path.join(out_dir, "ref_0.png"), pair.reference)
    for i, mask in enumerate(pair.masks):
        _save_mask(os.path.join(out_dir, f"mask_{i}.png"), mask)
    info = {"seed": pair.seed, "n_refs": 1, "kind": "eval"}
    info.update(meta or {})
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(info, fh, indent=1)


def _save_mask(path, mask: np.ndarray) -> None:
    PILImage.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def load_mask(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def list_sample_dirs(root) -> list[str]:
    return sorted(os.path.join(root, d) for d in os.listdir(root)
                  if os.path.isdir(os.path.join(root, d)))


def load_sample_dir(path) -> dict:
    """Read one generated sample directory back into arrays."""
    out = {"content": load_image(os.path.join(path, "c.png")),
           "gt": load_image(os.path.join(path, "gt.png"))}
    refs, masks = [], []
    i = 0
    while os.path.exists(os.path.join(path, f"ref_{i}.png")):
        refs.append(load_image(os.path.join(path, f"ref_{i}.png")))
        i += 1
    i = 0
    while os.path.exists(os.path.join(path, f"mask_{i}.png")):
        masks.append(load_mask(os.path.join(path, f"mask_{i}.png")))
        i += 1
    out["refs"], out["masks"] = refs, masks
    meta_path = os.path.join(path, "meta.json")
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            out["meta"] = json.load(fh)
    return out


def generate_dataset(corpus_dir, out_dir, count: int, n_refs: int, seed: int,
                     kind: str = "train", size: int | None = None) -> list[str]:
    """Write `count` samples (or eval pairs) under out_dir; returns their paths."""
    corpus = Corpus(corpus_dir, size=size)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i in range(count):
        sample_seed = derive_seed(seed, i)
        item, stem = draw_sample_from_corpus(corpus, n_refs, sample_seed, kind=kind)
        dest = os.path.join(out_dir, f"{kind}_{i:06d}")
        if kind == "train":
            write_sample(dest, item, {"source": stem, "seed": sample_seed})
        else:
            write_eval_pair(dest, item, {"source": stem, "seed": sample_seed})
        paths.append(dest)
    return paths
