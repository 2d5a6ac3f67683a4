import csv
import json
import math
import os

import numpy as np
import pytest
from skimage.metrics import peak_signal_noise_ratio as sk_psnr
from skimage.metrics import structural_similarity as sk_ssim

from photomodern import datagen as dg
from photomodern import metrics as mx
from photomodern.imageops import RegionMaskSet

from conftest import random_image


# ---------------------------------------------------------------------------
# psnr

def test_psnr_identical_is_inf():
    img = random_image(0)
    assert mx.psnr(img, img) == math.inf


def test_psnr_constant_offset_closed_form():
    a = np.full((32, 32, 3), 0.5, dtype=np.float64)
    b = np.full((32, 32, 3), 0.6, dtype=np.float64)
    assert abs(mx.psnr(a, b) - 20.0) <= 1e-9


def test_psnr_matches_direct_formula():
    a, b = random_image(1), random_image(2)
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    assert abs(mx.psnr(a, b) - 10 * np.log10(1 / mse)) <= 1e-9


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        mx.psnr(np.zeros((8, 8, 3)), np.zeros((8, 9, 3)))


# ---------------------------------------------------------------------------
# ssim

def test_ssim_identical_is_one():
    img = random_image(3)
    assert abs(mx.ssim(img, img) - 1.0) <= 1e-12


def test_ssim_constant_patches_closed_form():
    a = np.zeros((32, 32, 3))
    b = np.ones((32, 32, 3))
    expected = mx.SSIM_C1 * mx.SSIM_C2 / ((1 + mx.SSIM_C1) * mx.SSIM_C2)
    assert abs(mx.ssim(a, b) - expected) <= 1e-12


def test_ssim_symmetric():
    a, b = random_image(4), random_image(5)
    assert abs(mx.ssim(a, b) - mx.ssim(b, a)) <= 1e-9


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        mx.ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_psnr_ssim_match_reference_implementations():
    for seed in range(10):
        a, b = random_image(100 + seed), random_image(200 + seed)
        ref_psnr = sk_psnr(a.astype(np.float64), b.astype(np.float64), data_range=1.0)
        assert abs(mx.psnr(a, b) - ref_psnr) <= 1e-6
        ref_ssim = sk_ssim(a.astype(np.float64), b.astype(np.float64), channel_axis=2,
                           gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                           data_range=1.0)
        assert abs(mx.ssim(a, b) - ref_ssim) <= 1e-4


# ---------------------------------------------------------------------------
# attention mIoU

def _two_region_masks(size=8):
    labels = np.zeros((size, size), dtype=np.int32)
    labels[:, : size // 2] = 1
    labels[:, size // 2:] = 2
    return RegionMaskSet([labels == 1, labels == 2], labels > 0)


def test_miou_perfect_prediction():
    masks = _two_region_masks()
    weights = np.stack([m.astype(np.float32) for m in masks])
    ious, mean = mx.attention_miou(weights, masks)
    assert ious == [1.0, 1.0] and mean == 1.0


def test_miou_disjoint_prediction():
    masks = _two_region_masks()
    weights = np.stack([masks[1].astype(np.float32), masks[0].astype(np.float32)])
    ious, mean = mx.attention_miou(weights, masks)
    assert mean == 0.0


def test_miou_half_overlap_toy():
    labels = np.ones((2, 2), dtype=np.int32)
    masks = RegionMaskSet([labels > 0], labels > 0)
    # prediction covers one of two target cells plus one extra -> IoU = 1/3
    target = np.array([[True, True], [False, False]])
    pred = np.array([[True, False], [True, False]], dtype=np.float32)
    masks = RegionMaskSet([target], np.ones((2, 2), dtype=bool))
    ious, _ = mx.attention_miou(pred[None], masks)
    assert abs(ious[0] - 1.0 / 3.0) <= 1e-12


def test_miou_monotone_under_dilation_toward_target():
    size = 16
    labels = np.ones((size, size), dtype=np.int32)
    target = np.zeros((size, size), dtype=bool)
    target[4:12, 4:12] = True
    masks = RegionMaskSet([target], np.ones((size, size), dtype=bool))
    previous = -1.0
    for r in (1, 2, 3, 4):  # nested predictions growing toward the target
        pred = np.zeros((size, size), dtype=np.float32)
        pred[8 - r:8 + r, 8 - r:8 + r] = 1.0
        _, mean = mx.attention_miou(pred[None], masks)
        assert mean >= previous
        previous = mean


def test_miou_upsamples_weights():
    masks = _two_region_masks(16)
    weights = np.stack([np.ones((4, 4), dtype=np.float32) * (i == 0)
                        for i in range(2)])
    ious, _ = mx.attention_miou(weights, masks)
    assert 0.0 <= ious[0] <= 1.0


# ---------------------------------------------------------------------------
# evaluation harness

@pytest.fixture(scope="module")
def pairs_dir(tmp_path_factory, toy_corpus):
    out = tmp_path_factory.mktemp("pairs")
    dg.generate_dataset(toy_corpus, out, count=4, n_refs=1, seed=3, kind="eval")
    return str(out)


def test_evaluate_identity_stub(pairs_dir, tmp_path):
    model = lambda content, refs: content
    report = mx.evaluate(pairs_dir, model, out_dir=tmp_path)
    assert report.count == 4
    for row, d in zip(report.rows, dg.list_sample_dirs(pairs_dir)):
        sample = dg.load_sample_dir(d)
        assert abs(row["psnr"] - mx.psnr(sample["content"], sample["gt"])) <= 1e-9
    assert abs(report.means["psnr"] - np.mean([r["psnr"] for r in report.rows])) <= 1e-9

    with open(os.path.join(tmp_path, "report.csv")) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["pair_id", "psnr_db", "ssim"]
    assert len(rows) == 5
    with open(os.path.join(tmp_path, "summary.json")) as fh:
        summary = json.load(fh)
    assert summary["count"] == 4


def test_evaluate_deterministic(pairs_dir):
    model = lambda content, refs: np.clip(content * 0.9, 0, 1)
    a = mx.evaluate(pairs_dir, model)
    b = mx.evaluate(pairs_dir, model)
    assert a.rows == b.rows


def test_evaluate_unknown_metric(pairs_dir):
    with pytest.raises(ValueError):
        mx.evaluate(pairs_dir, lambda c, r: c, metrics=("lpips",))


def test_register_metric(pairs_dir):
    name = "l1dist"
    if name not in mx.METRIC_REGISTRY:
        mx.register_metric(name, lambda a, b: float(np.abs(a - b).mean()))
    report = mx.evaluate(pairs_dir, lambda c, r: c, metrics=("psnr", name))
    assert name in report.means
    with pytest.raises(ValueError):
        mx.register_metric("psnr", mx.psnr)