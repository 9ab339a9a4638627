import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttaseg.metrics import (CSV_HEADER, MetricsRow, binary_iou, boundary_pixels, dice, hd95,
                            hd95_sentinel, pearson_r, percentile_linear, read_metrics_csv,
                            summarize, write_metrics_csv)


# brute-force oracles, deliberately written as plain loops


def oracle_boundary(mask):
    h, w = mask.shape
    out = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            edge = i == 0 or i == h - 1 or j == 0 or j == w - 1
            if edge or not (mask[i - 1, j] and mask[i + 1, j] and mask[i, j - 1] and mask[i, j + 1]):
                out.append((i, j))
    return out


def oracle_percentile(values, q):
    v = sorted(values)
    pos = (len(v) - 1) * q / 100.0
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (pos - lo) * (v[hi] - v[lo])


def oracle_hd95(pred, gt):
    pb = oracle_boundary(pred)
    gb = oracle_boundary(gt)
    d_pg = [min(math.hypot(a[0] - b[0], a[1] - b[1]) for b in gb) for a in pb]
    d_gp = [min(math.hypot(a[0] - b[0], a[1] - b[1]) for a in pb) for b in gb]
    return max(oracle_percentile(d_pg, 95), oracle_percentile(d_gp, 95))


def oracle_hausdorff_exact(pred, gt):
    pb = oracle_boundary(pred)
    gb = oracle_boundary(gt)
    d_pg = [min(math.hypot(a[0] - b[0], a[1] - b[1]) for b in gb) for a in pb]
    d_gp = [min(math.hypot(a[0] - b[0], a[1] - b[1]) for a in pb) for b in gb]
    return max(max(d_pg), max(d_gp))


def random_mask(rng, side=16, p=0.2):
    mask = rng.uniform(size=(side, side)) < p
    if not mask.any():
        mask[rng.integers(side), rng.integers(side)] = True
    return mask


def test_dice_trivials():
    gt = np.zeros((4, 4), dtype=bool)
    gt[1:3, 1:3] = True
    assert dice(gt, gt) == 1.0
    other = np.zeros((4, 4), dtype=bool)
    other[0, 0] = True
    assert dice(other, gt) == 0.0
    assert dice(np.zeros((4, 4), dtype=bool), np.zeros((4, 4), dtype=bool)) == 1.0


def test_dice_hand_case():
    pred = np.array([[True, True], [False, False]])
    gt = np.array([[False, True], [False, True]])
    assert dice(pred, gt) == 0.5


def test_dice_symmetric_random():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = random_mask(rng), random_mask(rng)
        assert dice(a, b) == dice(b, a)


def test_binary_iou_values():
    pred = np.array([[True, True], [False, False]])
    gt = np.array([[False, True], [False, True]])
    assert binary_iou(pred, gt) == 1.0 / 3.0
    empty = np.zeros((2, 2), dtype=bool)
    assert binary_iou(empty, empty) == 1.0


def test_boundary_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(30):
        mask = random_mask(rng, side=12, p=0.4)
        got = {tuple(p) for p in boundary_pixels(mask)}
        assert got == set(oracle_boundary(mask))


def test_hd95_identical_masks_zero():
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:6, 3:7] = True
    assert hd95(mask, mask) == 0.0


def test_hd95_three_four_five_offset():
    a = np.zeros((10, 10), dtype=bool)
    b = np.zeros((10, 10), dtype=bool)
    a[1, 1] = True
    b[4, 5] = True  # offset (3, 4) -> distance 5
    assert hd95(a, b) == 5.0


def test_hd95_matches_bruteforce_oracle():
    rng = np.random.default_rng(2)
    for _ in range(60):
        pred, gt = random_mask(rng), random_mask(rng)
        assert hd95(pred, gt) == oracle_hd95(pred, gt)


def test_hd95_never_exceeds_exact_hausdorff():
    rng = np.random.default_rng(3)
    for _ in range(40):
        pred, gt = random_mask(rng), random_mask(rng)
        assert hd95(pred, gt) <= oracle_hausdorff_exact(pred, gt) + 1e-12


def test_hd95_symmetric():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a, b = random_mask(rng), random_mask(rng)
        assert hd95(a, b) == hd95(b, a)


def test_hd95_empty_mask_sentinel():
    empty = np.zeros((16, 16), dtype=bool)
    full = ~empty
    sentinel = hd95_sentinel((16, 16))
    assert hd95(empty, full) == sentinel
    assert hd95(full, empty) == sentinel
    # sentinel is strictly beyond any achievable lattice distance
    assert sentinel > math.hypot(15, 15)


def test_percentile_linear_matches_numpy_and_oracle():
    rng = np.random.default_rng(5)
    for _ in range(20):
        vals = rng.uniform(0, 50, size=rng.integers(1, 40))
        q = float(rng.uniform(0, 100))
        assert abs(percentile_linear(vals, q) - np.percentile(vals, q)) <= 1e-10
        assert abs(percentile_linear(vals, q) - oracle_percentile(vals, q)) <= 1e-10


def test_pearson_affine_and_hand_cases():
    x = np.array([0.1, 0.4, 0.2, 0.9])
    assert abs(pearson_r(x, 2 * x + 1) - 1.0) <= 1e-12
    assert abs(pearson_r(x, -x) + 1.0) <= 1e-12
    assert abs(pearson_r([1, 2, 3], [1, 3, 2]) - 0.5) <= 1e-12


def test_pearson_affine_invariance():
    rng = np.random.default_rng(6)
    x = rng.normal(size=30)
    y = rng.normal(size=30)
    base = pearson_r(x, y)
    assert abs(pearson_r(3.7 * x + 11.0, y) - base) <= 1e-12


def test_pearson_degenerate_inputs():
    with pytest.raises(ValueError, match="zero variance"):
        pearson_r([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError, match="two points"):
        pearson_r([1.0], [2.0])


@given(seed=st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_dice_and_iou_agree_on_ordering(seed):
    # dice = 2*iou/(1+iou) is monotone in iou
    rng = np.random.default_rng(seed)
    a, b = random_mask(rng), random_mask(rng)
    d, i = dice(a, b), binary_iou(a, b)
    assert abs(d - 2 * i / (1 + i)) <= 1e-12


def _rows():
    return [
        MetricsRow(0, 0.9, 1.5, 0.8, 0.85, 0.2, 0.1, 0.05, 1.0),
        MetricsRow(1, 0.7, 3.0, 0.6, 0.65, 0.4, 0.2, 0.10, 0.8),
        MetricsRow(2, 0.5, hd95_sentinel((16, 16)), float("nan"), 0.4, float("nan"),
                   float("nan"), float("nan"), float("nan")),
    ]


def test_csv_roundtrip(tmp_path):
    path = tmp_path / "metrics.csv"
    rows = _rows()
    write_metrics_csv(rows, path)
    back = read_metrics_csv(path)
    assert len(back) == len(rows)
    for a, b in zip(rows, back):
        for key in CSV_HEADER:
            va, vb = getattr(a, key), getattr(b, key)
            assert (va == vb) or (math.isnan(va) and math.isnan(vb))


def test_summary_single_row_equals_row():
    row = MetricsRow(0, 0.9, 1.5, 0.8, 0.85, 0.2, 0.1, 0.05, 1.0)
    s = summarize([row], sentinel=hd95_sentinel((16, 16)))
    assert s["mean_dice"] == row.dice
    assert s["mean_hd95"] == row.hd95
    assert s["pearson_r"] is None  # single point: undefined


def test_summary_excludes_sentinel_and_matches_column_pearson(tmp_path):
    rows = _rows()
    s = summarize(rows, sentinel=hd95_sentinel((16, 16)))
    assert s["hd95_excluded"] == 1
    assert s["mean_hd95"] == (1.5 + 3.0) / 2
    assert abs(s["pearson_r"] - pearson_r([0.8, 0.6], [0.85, 0.65])) <= 1e-15


def test_csv_header_pinned(tmp_path):
    path = tmp_path / "metrics.csv"
    write_metrics_csv(_rows(), path)
    assert path.read_text().splitlines()[0] == ",".join(CSV_HEADER)
