"""Evaluation metrics: Dice, 95th-percentile Hausdorff distance, true IoU,
and the Pearson correlation between predicted and true IoU.

HD95 runs on boundary pixels (foreground with a 4-neighbor background or
image-edge contact), with unit pixel spacing and linearly interpolated
percentiles. Undefined distances (an empty mask on either side) are
recorded as a sentinel equal to the image diagonal, which is strictly
larger than any achievable distance, and excluded from aggregates.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

CSV_HEADER = ["index", "dice", "hd95", "pred_iou", "true_iou", "l_icm", "l_dpc", "l_ifc", "lambda_dpc"]


@dataclass
class MetricsRow:
    index: int
    dice: float
    hd95: float
    pred_iou: float
    true_iou: float
    l_icm: float
    l_dpc: float
    l_ifc: float
    lambda_dpc: float


def _as_bool(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    return mask if mask.dtype == bool else mask > 0.5


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P&G| / (|P|+|G|); two empty masks count as a perfect match."""
    pred, gt = _as_bool(pred), _as_bool(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"dice: shape mismatch {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / total


def binary_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """|P&G| / |P|G|; defined as 1 when both masks are empty."""
    pred, gt = _as_bool(pred), _as_bool(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"binary_iou: shape mismatch {pred.shape} vs {gt.shape}")
    union = int((pred | gt).sum())
    if union == 0:
        return 1.0
    return int((pred & gt).sum()) / union


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Coordinates of foreground pixels 4-adjacent to background or the edge."""
    mask = _as_bool(mask)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(mask & ~interior)


def percentile_linear(values: np.ndarray, q: float) -> float:
    """Inclusive linear-interpolation percentile on sorted order statistics.

    The exact expression is pinned so independent implementations agree
    bit for bit at f64: pos = (n-1) * q / 100, and the result is
    v[floor(pos)] + (pos - floor(pos)) * (v[floor(pos) + 1] - v[floor(pos)]).
    """
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("percentile_linear: empty input")
    pos = (v.size - 1) * q / 100.0
    lo = int(math.floor(pos))
    frac = pos - lo
    if frac == 0.0:
        return float(v[lo])
    return float(v[lo] + frac * (v[lo + 1] - v[lo]))


def hd95_sentinel(shape) -> float:
    return float(np.hypot(*shape))


def hd95(pred: np.ndarray, gt: np.ndarray) -> float:
    """Symmetric 95th-percentile boundary distance; sentinel when undefined."""
    pred, gt = _as_bool(pred), _as_bool(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"hd95: shape mismatch {pred.shape} vs {gt.shape}")
    if not pred.any() or not gt.any():
        return hd95_sentinel(pred.shape)
    pb = boundary_pixels(pred).astype(np.float64)
    gb = boundary_pixels(gt).astype(np.float64)
    d_pg = cKDTree(gb).query(pb)[0]
    d_gp = cKDTree(pb).query(gb)[0]
    return max(percentile_linear(d_pg, 95.0), percentile_linear(d_gp, 95.0))


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson_r: inputs must be equal-length 1-D series")
    if x.size < 2:
        raise ValueError("pearson_r: need at least two points")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(xc @ xc)
    sy = float(yc @ yc)
    if sx == 0.0 or sy == 0.0:
        raise ValueError("pearson_r: zero variance, correlation undefined")
    return float(xc @ yc) / math.sqrt(sx * sy)


# -- reporting ----------------------------------------------------------------


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow([r.index] + [repr(getattr(r, k)) for k in CSV_HEADER[1:]])


def read_metrics_csv(path) -> list:
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"metrics csv {path}: unexpected header {reader.fieldnames}")
        for rec in reader:
            rows.append(MetricsRow(index=int(rec["index"]),
                                   **{k: float(rec[k]) for k in CSV_HEADER[1:]}))
    return rows


def summarize(rows, sentinel: float) -> dict:
    """Aggregate a run: mean Dice, mean HD95 over defined rows, Pearson r
    between predicted and true IoU over rows where both are finite."""
    if not rows:
        raise ValueError("summarize: no rows")
    dices = [r.dice for r in rows]
    defined = [r.hd95 for r in rows if math.isfinite(r.hd95) and r.hd95 < sentinel]
    pairs = [(r.pred_iou, r.true_iou) for r in rows
             if math.isfinite(r.pred_iou) and math.isfinite(r.true_iou)]
    try:
        r_val = pearson_r([p for p, _ in pairs], [t for _, t in pairs]) if len(pairs) >= 2 else None
    except ValueError:
        r_val = None
    return {
        "n": len(rows),
        "mean_dice": float(np.mean(dices)),
        "mean_hd95": float(np.mean(defined)) if defined else None,
        "hd95_excluded": len(rows) - len(defined),
        "pearson_r": r_val,
    }


def format_summary(summary: dict) -> str:
    hd = "undefined" if summary["mean_hd95"] is None else f"{summary['mean_hd95']:.4f}"
    r = "undefined" if summary["pearson_r"] is None else f"{summary['pearson_r']:.4f}"
    return (f"n={summary['n']} mean_dice={summary['mean_dice']:.4f} "
            f"mean_hd95={hd} (excluded {summary['hd95_excluded']}) pearson_r={r}")
