"""Two-stage detect-then-segment video pipeline with tracking and rendering."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import imaging as im
from .inference import (BackendError, FrameContext, SceneSpec, SyntheticPolyp, decode_predictions,
                        make_detector, make_segmenter, nms, render_scene)
from .render import BoxOverlay, PanelRow, PanelSpec, SequenceWriter, compose, heatmap_from_prob
from .tracking import CalibrationConfig, FpsMeter, Tracker, classify_risk

ROI, FULL_FRAME = "roi", "full-frame"
WALL, SIMULATED = "wall", "simulated"


class PipelineError(RuntimeError):
    pass


@dataclass
class TrackerConfig:
    iou_min: float = 0.3
    retire_after: int = 10
    alpha: float = 0.3
    window: int = 15


@dataclass
class RenderConfig:
    heatmap_opacity: float = 0.6
    heatmap: bool = True
    panel: bool = True


@dataclass
class PipelineConfig:
    detector: str = "stub"
    segmenter: str = "stub"
    conf_threshold: float = 0.5
    nms_iou: float = 0.45
    mask_threshold: float = 0.5
    mode: str = ROI
    roi_margin: float = 0.1
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    clock: str = SIMULATED
    nominal_fps: float = 30.0
    fps_window: int = 30
    stream_id: str = "stream-0"

    def __post_init__(self):
        for name in ("conf_threshold", "nms_iou", "mask_threshold", "render.heatmap_opacity"):
            obj, attr = (self.render, "heatmap_opacity") if "." in name else (self, name)
            v = getattr(obj, attr)
            if not 0.0 <= v <= 1.0:
                raise PipelineError(f"{name}={v} outside [0, 1]")
        if self.mode not in (ROI, FULL_FRAME):
            raise PipelineError(f"mode must be {ROI!r} or {FULL_FRAME!r}, got {self.mode!r}")
        if self.clock not in (WALL, SIMULATED):
            raise PipelineError(f"clock must be {WALL!r} or {SIMULATED!r}, got {self.clock!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        nested = {"tracker": TrackerConfig, "calibration": CalibrationConfig, "render": RenderConfig}
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for k, v in doc.items():
            if k not in known:
                raise PipelineError(f"unknown config key {k!r}")
            kwargs[k] = nested[k](**v) if k in nested else v
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def override(self, **changes) -> "PipelineConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        return replace(self, **changes) if changes else self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PipelineResult:
    frame_count: int = 0
    fps: float = 0.0
    wall_fps: float = 0.0
    wall_elapsed_s: float = 0.0
    track_ids: list[int] = field(default_factory=list)
    rows: list[dict] = field(default_factory=list)


def _round(v, nd=3):
    return None if v is None else round(float(v), nd)


def _segment_roi(frame, box, cfg, segmenter, index):
    h, w = frame.shape[:2]
    x0, y0, x1, y1 = im.expand_box(box, cfg.roi_margin, w, h)
    if x1 <= x0 or y1 <= y0:
        return None, None
    crop = frame[y0:y1, x0:x1]
    ct = im.fit_transform(x1 - x0, y1 - y0, im.SEGMENTER_SIDE, im.THUMBNAIL_CENTER)
    prob = segmenter.segment(im.normalize_pixels(im.apply_transform(crop, ct)),
                             FrameContext(index, ct, roi=im.PixelBox(x0, y0, x1, y1)))
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[y0:y1, x0:x1] = im.unmap_raster(im.threshold_map(prob, cfg.mask_threshold), ct)
    return mask, ((y0, y1, x0, x1), im.unmap_raster(prob, ct))


def _segment_full(frame, boxes, cfg, segmenter, index):
    h, w = frame.shape[:2]
    ct = im.fit_transform(w, h, im.SEGMENTER_SIDE, im.THUMBNAIL_CENTER)
    prob = segmenter.segment(im.normalize_pixels(im.apply_transform(frame, ct)),
                             FrameContext(index, ct, roi=im.PixelBox(0, 0, w, h)))
    full = im.unmap_raster(im.threshold_map(prob, cfg.mask_threshold), ct)
    masks = []
    for b in boxes:
        x0, y0, x1, y1 = im.expand_box(b, 0.0, w, h)
        m = np.zeros_like(full)
        m[y0:y1, x0:x1] = full[y0:y1, x0:x1]
        masks.append(m)
    return masks, im.unmap_raster(prob, ct)


def process_frame(frame, index, cfg, detector, segmenter, tracker):
    """Detect, segment, track and measure one frame.

    Returns ``(probability map or None, tracks observed this frame)``.
    """
    h, w = frame.shape[:2]
    t = im.fit_transform(w, h, im.DETECTOR_SIDE, im.LETTERBOX)
    x = im.normalize_pixels(im.apply_transform(frame, t))
    dets = nms(decode_predictions(detector.detect(x, FrameContext(index, t)), cfg.conf_threshold), cfg.nms_iou)
    found = []
    for d in dets:
        if d.box.w <= 0 or d.box.h <= 0:
            continue
        fb = im.unmap_box(im.yolo_to_box(d.box, t.target, t.target), t)
        if not fb.degenerate:
            found.append((fb, d.confidence))
    prob = None
    if found and cfg.mode == ROI:
        prob = np.zeros((h, w), dtype=np.float64)
        masks = []
        for fb, _ in found:
            mask, part = _segment_roi(frame, fb, cfg, segmenter, index)
            masks.append(mask)
            if part is not None:
                (y0, y1, x0, x1), p = part
                np.maximum(prob[y0:y1, x0:x1], p, out=prob[y0:y1, x0:x1])
    elif found:
        masks, prob = _segment_full(frame, [fb for fb, _ in found], cfg, segmenter, index)
    else:
        masks = []
    tracker.step(found, masks)
    return prob, [tr for tr in tracker.tracks if tr.missed == 0]


def _panel_row(track, calib) -> PanelRow:
    m = track.measurement
    risk = classify_risk(m, calib) if m else None
    if risk is not None and risk.diameter_mm is not None:
        return PanelRow(track.id, risk.size_class, risk.diameter_mm, risk.margin_mm, "mm", track.last_confidence)
    d, e = (m.diameter_smoothed, m.margin_diameter) if m else (0.0, 0.0)
    return PanelRow(track.id, risk.size_class if risk else "unknown", d, e, "px", track.last_confidence)


def _track_row(index, track, calib) -> dict:
    m = track.measurement
    risk = classify_risk(m, calib) if m else None
    return {
        "frame": index,
        "id": track.id,
        "box": [_round(v, 2) for v in track.box.as_tuple()],
        "confidence": _round(track.last_confidence, 4),
        "diameter_px": _round(m.diameter_smoothed if m else None),
        "diameter_raw_px": _round(m.diameter_px if m else None),
        "margin_px": _round(m.margin_diameter if m else None),
        "area_px": _round(m.area_smoothed if m else None),
        "class": risk.size_class if risk else "unknown",
        "diameter_mm": _round(risk.diameter_mm if risk else None),
    }


def run_pipeline(frames, cfg: PipelineConfig, out_dir=None, scene: SceneSpec | None = None) -> PipelineResult:
    """Run the full pipeline over ``frames`` (arrays, in order).

    With ``out_dir`` set, writes ``frames/NNNNNN.png``, ``index.json`` and
    ``tracks.jsonl`` there.
    """
    if scene is None and "stub" in (cfg.detector, cfg.segmenter):
        raise BackendError("stub backends need a scene")
    try:
        detector = make_detector(cfg.detector, scene=scene)
        segmenter = make_segmenter(cfg.segmenter, scene=scene)
    except TypeError as exc:
        raise BackendError(f"cannot construct backends: {exc}") from exc
    tracker = Tracker(**asdict(cfg.tracker))
    meter = FpsMeter(cfg.fps_window)
    overall = FpsMeter(None)
    wall = FpsMeter(None)

    def now(k):
        return k / cfg.nominal_fps if cfg.clock == SIMULATED else time.perf_counter()

    writer = tracks_fh = None
    if out_dir is not None:
        writer = SequenceWriter(out_dir, cfg.stream_id)
        tracks_fh = open(Path(out_dir) / "tracks.jsonl", "w")
    result = PipelineResult()
    seen = set()
    start = time.perf_counter()
    wall.tick(start)
    t0 = now(0)
    meter.tick(t0)
    overall.tick(t0)
    try:
        for index, frame in enumerate(frames):
            if frame is None or getattr(frame, "ndim", 0) != 3:
                raise PipelineError(f"frame {index}: unreadable or not an RGB image")
            prob, observed = process_frame(frame, index, cfg, detector, segmenter, tracker)
            heat = (heatmap_from_prob(prob, cfg.render.heatmap_opacity)
                    if prob is not None and cfg.render.heatmap else None)
            boxes = [BoxOverlay(tr.box, tr.last_confidence, tr.id) for tr in observed]
            panel = (PanelSpec([_panel_row(tr, cfg.calibration) for tr in tracker.tracks], meter.fps)
                     if cfg.render.panel else None)
            annotated = compose(frame, heat, boxes, panel, index, cfg.stream_id)
            rows = [_track_row(index, tr, cfg.calibration) for tr in observed]
            seen.update(tr.id for tr in observed)
            result.rows.extend(rows)
            if writer is not None:
                writer.write(annotated.image)
                tracks_fh.write("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
            t = now(index + 1)
            meter.tick(t)
            overall.tick(t)
            wall.tick(time.perf_counter())
            result.frame_count = index + 1
    finally:
        if tracks_fh is not None:
            tracks_fh.close()
    result.fps = overall.fps
    result.wall_fps = wall.fps
    result.wall_elapsed_s = time.perf_counter() - start
    result.track_ids = sorted(seen)
    if writer is not None:
        writer.close(result.fps, {"clock": cfg.clock, "track_ids": result.track_ids})
    return result


def iter_frame_dir(path):
    """Frames from an image directory in file-name order."""
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in im.IMAGE_SUFFIXES)
    for i, p in enumerate(files):
        try:
            yield im.read_image(p)
        except OSError as exc:
            raise PipelineError(f"frame {i}: cannot read {p}: {exc}") from exc


def scene_frames(scene: SceneSpec, n: int):
    for i in range(n):
        yield render_scene(scene, i)


def demo_scene(n_frames: int = 100, side: int = im.DETECTOR_SIDE) -> SceneSpec:
    """One polyp drifting left to right across the field of view."""
    drift = 0.3 / max(n_frames, 1)
    return SceneSpec((SyntheticPolyp(center=(0.3, 0.5), radii=(0.12, 0.10), intensity=1.0,
                                     drift=(drift, 0.0)),), side, side)


def thresholded_diameter(polyp: SyntheticPolyp, width: int, height: int, tau: float = 0.5) -> float:
    """Equivalent diameter (px) of a stub polyp's region at or above ``tau``."""
    k = max(0.0, 1.0 - tau / polyp.intensity) if polyp.intensity > 0 else 0.0
    return 2.0 * k * float(np.sqrt(polyp.radii[0] * width * polyp.radii[1] * height))
