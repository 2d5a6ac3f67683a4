"""Image quality metrics and the evaluation harness.

PSNR and SSIM are implemented here from their definitions (the test suite
cross-checks them against independent reference implementations); anything
needing third-party pretrained models (LPIPS and friends) can be hooked in
through the metric registry instead.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .datagen import list_sample_dirs, load_sample_dir
from .imageops import RegionMaskSet, resize

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # 2*int(3.5*1.5+0.5)+1 = 11x11 window
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for [0,1] images; +inf when the images are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(1.0 / mse))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), averaged
    over channels; border pixels inside the window radius are excluded."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    radius = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    if min(a.shape[0], a.shape[1]) < 2 * radius + 1:
        raise ValueError(f"images smaller than the {2 * radius + 1} px ssim window")
    vals = [_ssim_channel(a[..., c], b[..., c], radius) for c in range(a.shape[2])]
    return float(np.mean(vals))


def _ssim_channel(x: np.ndarray, y: np.ndarray, radius: int) -> float:
    blur = lambda arr: gaussian_filter(arr, SSIM_SIGMA, truncate=SSIM_TRUNCATE)
    ux, uy = blur(x), blur(y)
    vx = blur(x * x) - ux * ux
    vy = blur(y * y) - uy * uy
    cxy = blur(x * y) - ux * uy
    s = ((2 * ux * uy + SSIM_C1) * (2 * cxy + SSIM_C2)) / (
        (ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
    return float(s[radius:-radius, radius:-radius].mean())


def attention_miou(weights: np.ndarray, masks: RegionMaskSet,
                   threshold: float = 0.5) -> tuple[list[float], float]:
    """IoU of thresholded per-reference attention maps against region masks.

    `weights` is R x H' x W' (normalized attention); maps are nearest-resized
    to the mask resolution and scored over the labeled area only.
    """
    weights = np.asarray(weights, dtype=np.float32)
    if weights.ndim != 3 or weights.shape[0] != len(masks):
        raise ValueError(f"expected {len(masks)} weight maps, got shape {weights.shape}")
    labeled = masks.labeled_area
    h, w = labeled.shape
    ious = []
    for wmap, mask in zip(weights, masks):
        if wmap.shape != (h, w):
            wmap = resize(wmap, h, w, mode="nearest")
        pred = (wmap >= threshold) & labeled
        target = mask & labeled
        union = (pred | target).sum()
        inter = (pred & target).sum()
        ious.append(float(inter / union) if union else 1.0)
    return ious, float(np.mean(ious))


# ---------------------------------------------------------------------------
# metric registry + report

METRIC_REGISTRY: dict[str, callable] = {"psnr": psnr, "ssim": ssim}


def register_metric(name: str, fn) -> None:
    """Plug in an extra pairwise metric (e.g. an LPIPS wrapper)."""
    if name in METRIC_REGISTRY:
        raise ValueError(f"metric {name!r} already registered")
    METRIC_REGISTRY[name] = fn


_CSV_NAMES = {"psnr": "psnr_db"}


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)
    means: dict = field(default_factory=dict)
    count: int = 0

    def summarize(self, metric_names: list[str]) -> None:
        self.count = len(self.rows)
        self.means = {m: float(np.mean([r[m] for r in self.rows])) for m in metric_names}


def evaluate(pairs_dir, model, metrics: tuple[str, ...] = ("psnr", "ssim"),
             out_dir=None) -> MetricReport:
    """Run `model(content, refs) -> image` over every pair and score it.

    Writes `report.csv` (one row per pair) and `summary.json` when `out_dir`
    is given.
    """
    for m in metrics:
        if m not in METRIC_REGISTRY:
            raise ValueError(f"unknown metric {m!r}; registered: {sorted(METRIC_REGISTRY)}")
    dirs = list_sample_dirs(pairs_dir)
    if not dirs:
        raise FileNotFoundError(f"no evaluation pairs under {pairs_dir}")
    report = MetricReport()
    for d in dirs:
        sample = load_sample_dir(d)
        output = model(sample["content"], sample["refs"])
        row = {"pair_id": os.path.basename(d)}
        for m in metrics:
            row[m] = float(METRIC_REGISTRY[m](output, sample["gt"]))
        report.rows.append(row)
    report.summarize(list(metrics))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_report(out_dir, report, list(metrics))
    return report


def _write_report(out_dir, report: MetricReport, metrics: list[str]) -> None:
    cols = ["pair_id"] + [_CSV_NAMES.get(m, m) for m in metrics]
    with open(os.path.join(out_dir, "report.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in report.rows:
            writer.writerow([row["pair_id"]] + [row[m] for m in metrics])
    summary = {"count": report.count,
               "means": {_CSV_NAMES.get(m, m): report.means[m] for m in metrics}}
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1)
