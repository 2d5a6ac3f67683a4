import itertools
import json
import os

import numpy as np
import pytest

from photomodern import datagen as dg
from photomodern.seeds import make_rng

from conftest import random_image


def _labels_grid(values, size=16):
    """Tile the given label values into vertical bands."""
    labels = np.zeros((size, size), dtype=np.int32)
    band = size // len(values)
    for i, v in enumerate(values):
        labels[:, i * band:(i + 1) * band] = v
    labels[:, len(values) * band:] = values[-1]
    return labels


# ---------------------------------------------------------------------------
# partitioning

def test_partition_two_labels_two_groups(rng):
    labels = _labels_grid([1, 2])
    masks = dg.partition_regions(labels, 2, rng)
    counts = sorted(int(m.sum()) for m in masks)
    assert counts == sorted(((labels == 1).sum(), (labels == 2).sum()))


def test_partition_single_group(rng):
    labels = _labels_grid([1, 2, 3])
    masks = dg.partition_regions(labels, 1, rng)
    assert len(masks) == 1
    assert np.array_equal(masks[0], labels > 0)


def test_partition_too_few_labels(rng):
    with pytest.raises(ValueError):
        dg.partition_regions(_labels_grid([1, 2]), 3, rng)


def test_partition_distribution_matches_enumeration():
    # 5 labels into 2 groups: 30 valid assignments; group-0 size k has
    # C(5, k) cases for k = 1..4.
    labels = _labels_grid([1, 2, 3, 4, 5], size=20)
    sizes = {k: 0 for k in range(1, 5)}
    trials = 10_000
    rng = make_rng(99)
    for _ in range(trials):
        masks = dg.partition_regions(labels, 2, rng)
        n_labels_in_g0 = len(np.unique(labels[masks[0]]))
        sizes[n_labels_in_g0] += 1
    comb = {1: 5, 2: 10, 3: 10, 4: 5}
    for k, c in comb.items():
        p = c / 30
        expected = trials * p
        sigma = np.sqrt(trials * p * (1 - p))
        assert abs(sizes[k] - expected) <= 3 * sigma, (k, sizes)


def test_partition_valid_assignments_enumeration_sanity():
    valid = [a for a in itertools.product(range(2), repeat=5) if len(set(a)) == 2]
    assert len(valid) == 30


# ---------------------------------------------------------------------------
# style-variant transformation

def test_svt_identity_when_disabled(rng, textured_image):
    out = dg.apply_svt(textured_image, rng, include_prob=0.0,
                       jitter_magnitudes=(0.0, 0.0, 0.0, 0.0))
    assert np.abs(out - textured_image).max() <= 1e-6


def test_svt_deterministic(textured_image):
    a = dg.apply_svt(textured_image, make_rng(5))
    b = dg.apply_svt(textured_image, make_rng(5))
    assert a.tobytes() == b.tobytes()


def test_svt_alters_statistics_mostly(textured_image):
    changed = 0
    trials = 300
    for i in range(trials):
        out = dg.apply_svt(textured_image, make_rng(1000 + i))
        if (abs(out.mean() - textured_image.mean()) > 1e-7
                or abs(out.std() - textured_image.std()) > 1e-7):
            changed += 1
    assert changed / trials >= 0.95


def test_svt_logs_applied_ops(textured_image):
    log = []
    dg.apply_svt(textured_image, make_rng(8), log=log)
    assert len(log) == 1 and "svt" in log[0]


# ---------------------------------------------------------------------------
# style-invariant transformation

def test_sit_preserves_pixel_multiset(rng):
    img = random_image(0, 32, 32)
    mask = np.zeros((32, 32), dtype=bool)
    mask[4:12, 6:20] = True
    masked = mask[..., None] * img
    moved, moved_mask = dg.apply_sit(masked, mask, rng)
    assert moved_mask.sum() == mask.sum()
    orig = np.sort(masked[mask].ravel())
    new = np.sort(moved[moved_mask].ravel())
    assert np.array_equal(orig, new)
    assert np.abs(moved[~moved_mask]).max() == 0.0


def test_sit_preserves_region_stats(rng):
    img = random_image(1, 24, 24)
    mask = np.zeros((24, 24), dtype=bool)
    mask[2:20, 3:9] = True
    masked = mask[..., None] * img
    for seed in range(20):
        moved, moved_mask = dg.apply_sit(masked, mask, make_rng(seed))
        a = masked[mask].astype(np.float64)
        b = moved[moved_mask].astype(np.float64)
        assert abs(a.mean() - b.mean()) <= 1e-6
        assert abs(a.std() - b.std()) <= 1e-6


def test_sit_full_frame_mask_skips_translation(rng):
    img = random_image(2, 16, 16)
    mask = np.ones((16, 16), dtype=bool)
    moved, moved_mask = dg.apply_sit(img, mask, rng)
    assert moved_mask.all()
    assert np.array_equal(np.sort(moved.ravel()), np.sort(img.ravel()))


def test_sit_non_square_restricted_to_180(rng):
    img = random_image(3, 16, 24)
    mask = np.zeros((16, 24), dtype=bool)
    mask[2:6, 3:9] = True
    log = []
    moved, moved_mask = dg.apply_sit(mask[..., None] * img, mask, rng, log=log)
    assert moved.shape == img.shape
    assert log[0]["sit"]["rot90"] == 2


# ---------------------------------------------------------------------------
# unmasked-region fill

def test_fill_all_ones_keeps_image():
    img = random_image(4, 16, 16)
    filler = random_image(5, 16, 16)
    out = dg.fill_unmasked(img, np.ones((16, 16), dtype=bool), filler)
    assert np.allclose(out, img, atol=1e-7)


def test_fill_all_zeros_gives_filler():
    img = random_image(6, 16, 16)
    filler = random_image(7, 16, 16)
    out = dg.fill_unmasked(img, np.zeros((16, 16), dtype=bool), filler)
    assert np.allclose(out, filler, atol=1e-7)


def test_fill_checkerboard_exact():
    mask = (np.indices((16, 16)).sum(axis=0) % 2).astype(bool)
    img = np.full((16, 16, 3), 0.2, dtype=np.float32)
    filler = np.full((16, 16, 3), 0.8, dtype=np.float32)
    out = dg.fill_unmasked(img, mask, filler)
    assert np.allclose(out[mask], 0.2) and np.allclose(out[~mask], 0.8)


def test_fill_crops_or_resizes_filler():
    img = random_image(8, 16, 16)
    mask = np.zeros((16, 16), dtype=bool)
    big = random_image(9, 32, 32)
    small = random_image(10, 8, 8)
    assert dg.fill_unmasked(img, mask, big).shape == (16, 16, 3)
    assert np.allclose(dg.fill_unmasked(img, mask, big), big[8:24, 8:24], atol=1e-7)
    assert dg.fill_unmasked(img, mask, small).shape == (16, 16, 3)


# ---------------------------------------------------------------------------
# samples

def test_make_sample_identity_svt_reproduces_gt(textured_image):
    labels = _labels_grid([1, 2, 3], size=64)
    identity = lambda img, rng, log=None: img
    sample = dg.make_sample(textured_image, labels, [random_image(11)], 2, 123,
                            svt=identity)
    assert np.abs(sample.content - textured_image).max() <= 1e-6


def test_make_sample_masks_partition_and_stats(textured_image):
    labels = _labels_grid([1, 2, 3, 4], size=64)
    sample = dg.make_sample(textured_image, labels, [random_image(12)], 2, 7)
    cover = np.zeros((64, 64), dtype=int)
    for m in sample.masks:
        cover += m
    assert cover.max() == 1 and np.array_equal(cover > 0, labels > 0)
    # style-invariant references keep per-region statistics of the gt region
    for m, ref, rmask in zip(sample.masks, sample.refs, sample.ref_masks):
        a = (sample.gt * m[..., None])[m].astype(np.float64)
        b = ref[rmask].astype(np.float64)
        assert abs(a.mean() - b.mean()) <= 1e-6
        assert abs(a.std() - b.std()) <= 1e-6


def test_make_sample_deterministic(textured_image):
    labels = _labels_grid([1, 2, 3], size=64)
    pool = [random_image(13)]
    a = dg.make_sample(textured_image, labels, pool, 2, 55)
    b = dg.make_sample(textured_image, labels, pool, 2, 55)
    assert a.content.tobytes() == b.content.tobytes()
    for ra, rb in zip(a.refs, b.refs):
        assert ra.tobytes() == rb.tobytes()
    for ma, mb in zip(a.masks, b.masks):
        assert np.array_equal(ma, mb)


def test_eval_pair_degrades_exactly_selected(textured_image):
    labels = _labels_grid([1, 2, 3, 4], size=64)
    pair = dg.make_eval_pair(textured_image, labels, [random_image(14)], 31)
    m_sel, m_keep = pair.masks[0], pair.masks[1]
    assert np.array_equal(pair.degraded[m_keep], pair.gt[m_keep])
    assert not np.array_equal(pair.degraded[m_sel], pair.gt[m_sel])
    # ceil(4/2) = 2 labels selected
    assert len(np.unique(labels[m_sel])) == 2


def test_eval_pair_needs_two_regions(textured_image):
    labels = np.ones((64, 64), dtype=np.int32)
    with pytest.raises(ValueError):
        dg.make_eval_pair(textured_image, labels, [random_image(15)], 0)


def test_eval_pair_deterministic(textured_image):
    labels = _labels_grid([1, 2, 3], size=64)
    pool = [random_image(16)]
    a = dg.make_eval_pair(textured_image, labels, pool, 77)
    b = dg.make_eval_pair(textured_image, labels, pool, 77)
    assert a.degraded.tobytes() == b.degraded.tobytes()
    assert a.reference.tobytes() == b.reference.tobytes()


# ---------------------------------------------------------------------------
# corpus and dataset layout

def test_corpus_and_generate_dataset(toy_corpus, tmp_path):
    corpus = dg.Corpus(toy_corpus)
    assert len(corpus) == 8
    img, labels = corpus.load_index(0)
    assert img.shape == (64, 64, 3) and labels.shape == (64, 64)

    out = tmp_path / "data"
    paths = dg.generate_dataset(toy_corpus, out, count=3, n_refs=2, seed=5)
    assert len(paths) == 3
    for p in paths:
        for name in ("c.png", "gt.png", "ref_0.png", "ref_1.png",
                     "mask_0.png", "mask_1.png", "meta.json"):
            assert os.path.exists(os.path.join(p, name))
    sample = dg.load_sample_dir(paths[0])
    assert sample["content"].shape == (64, 64, 3)
    assert len(sample["refs"]) == 2 and len(sample["masks"]) == 2
    with open(os.path.join(paths[0], "meta.json")) as fh:
        meta = json.load(fh)
    assert meta["kind"] == "train" and "transforms" in meta


def test_generate_eval_pairs(toy_corpus, tmp_path):
    out = tmp_path / "pairs"
    paths = dg.generate_dataset(toy_corpus, out, count=2, n_refs=1, seed=6, kind="eval")
    sample = dg.load_sample_dir(paths[0])
    assert len(sample["refs"]) == 1
    assert sample["meta"]["kind"] == "eval"


def test_generate_dataset_regeneration_identical(toy_corpus, tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    dg.generate_dataset(toy_corpus, a, count=2, n_refs=2, seed=9)
    dg.generate_dataset(toy_corpus, b, count=2, n_refs=2, seed=9)
    for sub in os.listdir(a):
        for name in os.listdir(os.path.join(a, sub)):
            pa = open(os.path.join(a, sub, name), "rb").read()
            pb = open(os.path.join(b, sub, name), "rb").read()
            assert pa == pb, (sub, name)
