"""Segmentation and detection metrics, clinical categories and reports."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .imaging import NormalizedBox
from .inference import Detection, box_iou

EXCELLENT, GOOD, MODERATE, POOR = "Excellent", "Good", "Moderate", "Poor"
CATEGORIES = (EXCELLENT, GOOD, MODERATE, POOR)

# lower edges of Excellent, Good, Moderate; anything below is Poor
BANDS = {
    "seg": (0.8, 0.7, 0.5),
    "det": (0.9, 0.8, 0.6),
}
METRIC_KIND = {"dice": "seg", "iou": "seg", "precision": "det", "recall": "det"}
HIST_BINS = 20


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _pair(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricsError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred.astype(bool), gt.astype(bool)


def confusion_counts(pred, gt) -> ConfusionCounts:
    p, g = _pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p)) - tp
    fn = int(np.count_nonzero(g)) - tp
    return ConfusionCounts(tp, p.size - tp - fp - fn, fp, fn)


def dice(pred, gt) -> float:
    p, g = _pair(pred, gt)
    denom = int(np.count_nonzero(p)) + int(np.count_nonzero(g))
    if denom == 0:
        return 1.0
    return 2 * int(np.count_nonzero(p & g)) / denom


def jaccard(pred, gt) -> float:
    p, g = _pair(pred, gt)
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(p & g)) / union


def pixel_accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise MetricsError("pixel accuracy of an empty mask")
    return (c.tp + c.tn) / c.total


def sensitivity(c: ConfusionCounts) -> float:
    return c.tp / (c.tp + c.fn) if c.tp + c.fn else 1.0


def specificity(c: ConfusionCounts) -> float:
    return c.tn / (c.tn + c.fp) if c.tn + c.fp else 1.0


def bce(pred, gt, epsilon: float = 1e-7) -> float:
    """Mean pixelwise binary cross-entropy with probabilities clamped to [eps, 1-eps]."""
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if p.shape != y.shape:
        raise MetricsError(f"shapes differ: {p.shape} vs {y.shape}")
    pos = np.clip(p, epsilon, 1 - epsilon)
    neg = np.clip(1 - p, epsilon, 1 - epsilon)
    return float(np.mean(-(y * np.log(pos) + (1 - y) * np.log(neg))))


def segmentation_scores(pred, gt, sample_id: str = "") -> dict:
    c = confusion_counts(pred, gt)
    return {
        "id": sample_id,
        "dice": dice(pred, gt),
        "iou": jaccard(pred, gt),
        "pixel_accuracy": pixel_accuracy(c),
        "sensitivity": sensitivity(c),
        "specificity": specificity(c),
    }


# -- detection -------------------------------------------------------------

@dataclass
class MatchResult:
    """Outcome of matching one image's predictions against its ground truth.

    ``ranked`` holds ``(confidence, is_tp, iou)`` in evaluation order.
    """

    ranked: list[tuple[float, bool, float]] = field(default_factory=list)
    pairs: list[tuple[int, int, float]] = field(default_factory=list)  # (pred idx, gt idx, iou)
    n_gt: int = 0

    @property
    def tp(self) -> int:
        return sum(1 for _, ok, _ in self.ranked if ok)

    @property
    def fp(self) -> int:
        return len(self.ranked) - self.tp

    @property
    def fn(self) -> int:
        return self.n_gt - self.tp


def match_detections(preds: list[Detection], gts: list[NormalizedBox], iou_min: float = 0.5) -> MatchResult:
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, preds[i].box.xc, preds[i].box.yc))
    free = set(range(len(gts)))
    result = MatchResult(n_gt=len(gts))
    for i in order:
        d = preds[i]
        best, best_iou = None, -1.0
        for j in sorted(free):
            v = box_iou(d.box, gts[j])
            if v > best_iou:
                best, best_iou = j, v
        if best is not None and best_iou >= iou_min:
            free.discard(best)
            result.pairs.append((i, best, best_iou))
            result.ranked.append((d.confidence, True, best_iou))
        else:
            result.ranked.append((d.confidence, False, max(best_iou, 0.0)))
    return result


def precision_recall(m: MatchResult) -> tuple[float, float]:
    tp, fp, fn = m.tp, m.fp, m.fn
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        # nothing predicted: perfect only if there was nothing to find
        precision = 1.0 if fn == 0 else 0.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return precision, recall


def average_precision(ranked, n_gt: int) -> float | None:
    """All-point interpolated AP; ``None`` when the image has no ground truth.

    Predictions sharing a confidence are admitted together, as one threshold.
    """
    if n_gt <= 0:
        return None
    items = sorted(ranked, key=lambda r: -r[0])
    recalls, precisions = [0.0], []
    tp = fp = 0
    i = 0
    while i < len(items):
        conf = items[i][0]
        while i < len(items) and items[i][0] == conf:
            if items[i][1]:
                tp += 1
            else:
                fp += 1
            i += 1
        recalls.append(tp / n_gt)
        precisions.append(tp / (tp + fp))
    if not precisions:
        return 0.0
    # monotone envelope, right to left
    env = precisions[:]
    for k in range(len(env) - 2, -1, -1):
        env[k] = max(env[k], env[k + 1])
    return float(sum((recalls[k + 1] - recalls[k]) * env[k] for k in range(len(env))))


def map_at_50(aps) -> float:
    defined = [a for a in aps if a is not None]
    if not defined:
        raise MetricsError("no image has ground truth boxes; mAP undefined")
    return sum(defined) / len(defined)


def detection_scores(preds, gts, sample_id: str = "", iou_min: float = 0.5) -> dict:
    m = match_detections(preds, gts, iou_min)
    precision, recall = precision_recall(m)
    return {
        "id": sample_id,
        "precision": precision,
        "recall": recall,
        "ap50": average_precision(m.ranked, m.n_gt),
        "tp": m.tp, "fp": m.fp, "fn": m.fn,
        "matches": [{"confidence": preds[i].confidence, "iou": v} for i, _, v in m.pairs],
    }


# -- categories and reports ------------------------------------------------

def categorize(value: float, kind: str) -> str:
    try:
        excellent, good, moderate = BANDS[kind]
    except KeyError:
        raise MetricsError(f"unknown category kind {kind!r}") from None
    if value >= excellent:
        return EXCELLENT
    if value >= good:
        return GOOD
    if value >= moderate:
        return MODERATE
    return POOR


def histogram(values, bins: int = HIST_BINS) -> list[int]:
    counts = [0] * bins
    for v in values:
        counts[min(bins - 1, max(0, int(math.floor(v * bins))))] += 1
    return counts


def _correlations(xs, ys) -> dict:
    if len(xs) < 2 or len(set(xs)) < 2 or len(set(ys)) < 2:
        return {"pearson": None, "spearman": None, "n": len(xs)}
    return {"pearson": float(stats.pearsonr(xs, ys)[0]),
            "spearman": float(stats.spearmanr(xs, ys)[0]),
            "n": len(xs)}


@dataclass
class EvaluationReport:
    kind: str
    rows: list[dict]
    means: dict[str, float]
    histograms: dict[str, list[int]]
    categories: dict[str, dict[str, int]]
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n": len(self.rows), "means": self.means,
                "histograms": {"bins": HIST_BINS, **self.histograms},
                "categories": self.categories, **self.extra}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def build_report(rows: list[dict], kind: str = "seg") -> EvaluationReport:
    """Aggregate per-sample rows into means, 20-bin histograms and category tallies."""
    if not rows:
        raise MetricsError("cannot build a report from zero samples")
    metrics = [k for k, v in rows[0].items()
               if (v is None or isinstance(v, (int, float)) and not isinstance(v, bool))
               and k not in ("id", "tp", "fp", "fn")]
    means, hists, cats = {}, {}, {}
    for k in metrics:
        vals = [r[k] for r in rows if r.get(k) is not None]
        if not vals:
            continue
        means[k] = float(np.mean(vals))
        hists[k] = histogram(vals)
        if k in METRIC_KIND:
            tally = dict.fromkeys(CATEGORIES, 0)
            for v in vals:
                tally[categorize(v, METRIC_KIND[k])] += 1
            cats[k] = tally
    extra = {}
    if kind == "det":
        aps = [r.get("ap50") for r in rows]
        extra["map50"] = map_at_50(aps) if any(a is not None for a in aps) else None
        pairs = [m for r in rows for m in r.get("matches", [])]
        extra["confidence_iou_correlation"] = _correlations(
            [p["confidence"] for p in pairs], [p["iou"] for p in pairs])
    return EvaluationReport(kind, rows, means, hists, cats, extra)


def primary_metric(kind: str) -> str:
    return "dice" if kind == "seg" else "precision"
