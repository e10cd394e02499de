"""Independent reference computations used as test oracles.

None of these call into the code paths they check; they count pixels, sweep
thresholds or enumerate assignments directly.
"""
from __future__ import annotations

import itertools
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction

import numpy as np


def round_half_up(x: Fraction) -> int:
    return int((Decimal(x.numerator) / Decimal(x.denominator)).quantize(Decimal(1), ROUND_HALF_UP))


def letterbox_geometry(src_w, src_h, target):
    """(content_w, content_h, pad_x, pad_y) from exact rational arithmetic."""
    scale = min(Fraction(target, src_w), Fraction(target, src_h))
    # a side never collapses below one pixel
    cw = max(1, round_half_up(src_w * scale))
    ch = max(1, round_half_up(src_h * scale))
    return cw, ch, (target - cw) // 2, (target - ch) // 2


def pixel_counts(pred, gt):
    """(tp, tn, fp, fn) by histogramming the 2-bit code 2*pred + gt."""
    code = 2 * np.asarray(pred, dtype=np.int64).ravel() + np.asarray(gt, dtype=np.int64).ravel()
    tn, fn, fp, tp = np.bincount(code, minlength=4)
    return int(tp), int(tn), int(fp), int(fn)


def seg_metrics_exact(pred, gt):
    tp, tn, fp, fn = pixel_counts(pred, gt)
    dice = Fraction(1) if tp + fp + fn == 0 else Fraction(2 * tp, 2 * tp + fp + fn)
    iou = Fraction(1) if tp + fp + fn == 0 else Fraction(tp, tp + fp + fn)
    return {
        "dice": dice,
        "iou": iou,
        "pixel_accuracy": Fraction(tp + tn, tp + tn + fp + fn),
        "sensitivity": Fraction(1) if tp + fn == 0 else Fraction(tp, tp + fn),
        "specificity": Fraction(1) if tn + fp == 0 else Fraction(tn, tn + fp),
    }


def raster_box_iou(a, b, grid: int):
    """IoU of two (x0, y0, x1, y1) unit-square boxes by counting grid-cell centers."""
    c = (np.arange(grid) + 0.5) / grid
    xs, ys = c[None, :], c[:, None]

    def fill(box):
        return (xs >= box[0]) & (xs < box[2]) & (ys >= box[1]) & (ys < box[3])

    ma, mb = fill(a), fill(b)
    union = np.count_nonzero(ma | mb)
    return 0.0 if union == 0 else np.count_nonzero(ma & mb) / union


def sweep_ap(ranked, n_gt):
    """AP by evaluating every distinct confidence threshold and integrating the
    interpolated precision over recall segments."""
    points = []
    for c in sorted({r[0] for r in ranked}, reverse=True):
        admitted = [r for r in ranked if r[0] >= c]
        tp = sum(1 for r in admitted if r[1])
        points.append((Fraction(tp, n_gt), Fraction(tp, len(admitted))))
    levels = sorted({Fraction(0)} | {r for r, _ in points})
    area = Fraction(0)
    for lo, hi in zip(levels, levels[1:]):
        area += (hi - lo) * max(p for r, p in points if r >= hi)
    return area


def best_assignment_weight(weights, minimum):
    """Maximum total weight of a one-to-one matching using only entries >= minimum."""
    n_rows = len(weights)
    n_cols = len(weights[0]) if weights else 0
    best = 0.0
    cols = list(range(n_cols)) + [None] * n_rows
    for perm in itertools.permutations(cols, n_rows):
        total = 0.0
        used = [c for c in perm if c is not None]
        if len(used) != len(set(used)):
            continue
        for r, c in enumerate(perm):
            if c is not None and weights[r][c] >= minimum:
                total += weights[r][c]
        best = max(best, total)
    return best


def nearest_upscale(arr, factor_y, factor_x):
    """Integer-factor nearest-neighbour upscale by explicit pixel replication."""
    h, w = arr.shape[:2]
    out = np.zeros((h * factor_y, w * factor_x) + arr.shape[2:], dtype=arr.dtype)
    for y in range(h):
        for x in range(w):
            out[y * factor_y:(y + 1) * factor_y, x * factor_x:(x + 1) * factor_x] = arr[y, x]
    return out


def disk_mask(side, cx, cy, r):
    yy, xx = np.mgrid[0:side, 0:side]
    return (((xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2) <= r * r).astype(np.uint8)
