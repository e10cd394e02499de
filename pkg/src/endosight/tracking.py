"""Multi-polyp tracking, smoothed size measurement and size-based risk class."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .imaging import PixelBox
from .inference import pixel_iou

DIMINUTIVE, SMALL, LARGE, UNKNOWN = "diminutive", "small", "large", "unknown"
SIZE_ORDER = {DIMINUTIVE: 0, SMALL: 1, LARGE: 2}


class TrackingError(ValueError):
    pass


@dataclass(frozen=True)
class MeasurementEstimate:
    area_px: float
    diameter_px: float
    area_smoothed: float
    diameter_smoothed: float
    margin_diameter: float
    window: tuple[float, ...] = ()


@dataclass(frozen=True)
class CalibrationConfig:
    """Pixel-to-millimetre scale and size class edges (mm).

    ``mm_per_px=None`` means uncalibrated: risk is reported as unknown.
    """

    mm_per_px: float | None = None
    small_from_mm: float = 5.0
    large_from_mm: float = 10.0

    def __post_init__(self):
        if self.mm_per_px is not None and self.mm_per_px <= 0:
            raise TrackingError("mm_per_px must be positive")
        if not 0 < self.small_from_mm < self.large_from_mm:
            raise TrackingError("size thresholds must be positive and strictly increasing")


@dataclass(frozen=True)
class RiskAssessment:
    size_class: str
    diameter_mm: float | None = None
    area_mm2: float | None = None
    margin_mm: float | None = None


@dataclass(frozen=True)
class Track:
    id: int
    box: PixelBox
    age: int = 1
    missed: int = 0
    last_confidence: float = 0.0
    measurement: MeasurementEstimate | None = None


@dataclass
class Assignment:
    matches: list[tuple[int, int]] = field(default_factory=list)  # (track index, det index)
    unmatched_tracks: list[int] = field(default_factory=list)
    unmatched_dets: list[int] = field(default_factory=list)


def associate(tracks, dets, iou_min: float = 0.3) -> Assignment:
    """Greedy IoU matching; ``dets`` are ``(PixelBox, confidence)`` pairs."""
    pairs = []
    for ti, t in enumerate(tracks):
        for di, (box, _) in enumerate(dets):
            v = pixel_iou(t.box, box)
            if v >= iou_min:
                pairs.append((-v, t.id, di, ti))
    pairs.sort()
    used_t, used_d = set(), set()
    out = Assignment()
    for _, _, di, ti in pairs:
        if ti in used_t or di in used_d:
            continue
        used_t.add(ti)
        used_d.add(di)
        out.matches.append((ti, di))
    out.unmatched_tracks = [i for i in range(len(tracks)) if i not in used_t]
    out.unmatched_dets = [i for i in range(len(dets)) if i not in used_d]
    return out


def update_tracks(tracks, dets, assignment: Assignment, next_id: int,
                  retire_after: int = 10) -> tuple[list[Track], int, dict[int, int]]:
    """Apply an assignment.

    Returns the surviving tracks (ordered by id), the next free id and a map
    from detection index to the id of the track that now owns it.
    """
    owner = {}
    out = []
    for ti, di in assignment.matches:
        box, conf = dets[di]
        t = tracks[ti]
        out.append(replace(t, box=box, age=t.age + 1, missed=0, last_confidence=conf))
        owner[di] = t.id
    for ti in assignment.unmatched_tracks:
        t = tracks[ti]
        if t.missed + 1 <= retire_after:
            out.append(replace(t, missed=t.missed + 1, age=t.age + 1))
    for di in assignment.unmatched_dets:
        box, conf = dets[di]
        out.append(Track(id=next_id, box=box, last_confidence=conf))
        owner[di] = next_id
        next_id += 1
    out.sort(key=lambda t: t.id)
    return out, next_id, owner


def ema_update(prev: float | None, obs: float, alpha: float = 0.3) -> float:
    if not 0 < alpha <= 1:
        raise TrackingError(f"alpha must be in (0, 1], got {alpha}")
    if prev is None:
        return obs
    return alpha * obs + (1 - alpha) * prev


def measure(mask, prev: MeasurementEstimate | None = None, alpha: float = 0.3,
            window: int = 15) -> MeasurementEstimate:
    """Equivalent-circle size of ``mask``, smoothed against ``prev``.

    The margin is the sample standard deviation of the last ``window`` raw
    diameters.
    """
    area = float(np.count_nonzero(mask))
    diameter = 2.0 * math.sqrt(area / math.pi)
    hist = deque(prev.window if prev else (), maxlen=window)
    hist.append(diameter)
    margin = float(np.std(hist, ddof=1)) if len(hist) >= 2 else 0.0
    return MeasurementEstimate(
        area_px=area,
        diameter_px=diameter,
        area_smoothed=ema_update(prev.area_smoothed if prev else None, area, alpha),
        diameter_smoothed=ema_update(prev.diameter_smoothed if prev else None, diameter, alpha),
        margin_diameter=margin,
        window=tuple(hist),
    )


def classify_risk(m: MeasurementEstimate, calib: CalibrationConfig) -> RiskAssessment:
    if calib.mm_per_px is None:
        return RiskAssessment(UNKNOWN)
    k = calib.mm_per_px
    d = m.diameter_smoothed * k
    if d < calib.small_from_mm:
        cls = DIMINUTIVE
    elif d < calib.large_from_mm:
        cls = SMALL
    else:
        cls = LARGE
    return RiskAssessment(cls, diameter_mm=d, area_mm2=m.area_smoothed * k * k,
                          margin_mm=m.margin_diameter * k)


class FpsMeter:
    """Frames per second over a sliding window of tick timestamps (seconds)."""

    def __init__(self, window: int | None = 30):
        self.ticks: deque[float] = deque(maxlen=window)

    def tick(self, t: float) -> float:
        if self.ticks and t <= self.ticks[-1]:
            raise TrackingError(f"non-monotone timestamp {t} after {self.ticks[-1]}")
        self.ticks.append(t)
        return self.fps

    @property
    def fps(self) -> float:
        if len(self.ticks) < 2:
            return 0.0
        return (len(self.ticks) - 1) / (self.ticks[-1] - self.ticks[0])


def fps_from_ticks(ticks, window: int = 30) -> float:
    meter = FpsMeter(window)
    for t in ticks:
        meter.tick(t)
    return meter.fps


class Tracker:
    """Per-stream tracker state; feed frames strictly in order."""

    def __init__(self, iou_min: float = 0.3, retire_after: int = 10,
                 alpha: float = 0.3, window: int = 15):
        self.iou_min = iou_min
        self.retire_after = retire_after
        self.alpha = alpha
        self.window = window
        self.tracks: list[Track] = []
        self.next_id = 1

    def step(self, dets, masks=None) -> dict[int, int]:
        """Advance one frame; returns detection index -> track id."""
        a = associate(self.tracks, dets, self.iou_min)
        tracks, self.next_id, owner = update_tracks(self.tracks, dets, a, self.next_id, self.retire_after)
        if masks is not None:
            by_id = {t.id: i for i, t in enumerate(tracks)}
            for di, tid in owner.items():
                mask = masks[di]
                if mask is None or not np.any(mask):
                    continue
                i = by_id[tid]
                t = tracks[i]
                tracks[i] = replace(t, measurement=measure(mask, t.measurement, self.alpha, self.window))
        self.tracks = tracks
        return owner
