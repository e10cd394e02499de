"""Detection decoding, box IoU, NMS and the model backend contract.

The deterministic stub backends render predictions straight from a synthetic
:class:`SceneSpec`, so the whole pipeline can run without trained weights.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .imaging import (DETECTOR_SIDE, SEGMENTER_SIDE, THUMBNAIL_CENTER, NormalizedBox,
                      PixelBox, SpaceTransform, fit_transform, map_box, yolo_to_box)

DETECTOR = "detector"
SEGMENTER = "segmenter"
STUB_CLASS_PROB = 0.95


class BackendError(LookupError):
    pass


@dataclass(frozen=True)
class RawCellPrediction:
    p_obj: float
    xc: float
    yc: float
    w: float
    h: float
    p_class: float


@dataclass(frozen=True)
class Detection:
    box: NormalizedBox
    confidence: float
    class_id: int = 0


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    kind: str
    input_side: int
    deterministic: bool = True


def decode_predictions(cells, conf_threshold: float = 0.5) -> list[Detection]:
    dets = []
    for c in cells:
        conf = c.p_obj * c.p_class
        if conf >= conf_threshold:
            dets.append(Detection(NormalizedBox(c.xc, c.yc, c.w, c.h), conf))
    return sorted(dets, key=_rank_key)


def _rank_key(d: Detection):
    return (-d.confidence, d.box.xc, d.box.yc)


def box_iou(a: NormalizedBox, b: NormalizedBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return min(1.0, inter / union) if union > 0 else 0.0


def pixel_iou(a: PixelBox, b: PixelBox) -> float:
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, inter / union) if union > 0 else 0.0


def nms(dets, iou_threshold: float = 0.45) -> list[Detection]:
    """Greedy suppression; ties in confidence go to the smaller xc, then yc."""
    kept: list[Detection] = []
    for d in sorted(dets, key=_rank_key):
        if all(box_iou(d.box, k.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


# -- synthetic scenes ------------------------------------------------------

@dataclass(frozen=True)
class SyntheticPolyp:
    center: tuple[float, float]
    radii: tuple[float, float]
    intensity: float = 1.0
    drift: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        vals = (*self.center, *self.radii, self.intensity)
        if not all(0.0 <= v <= 1.0 for v in vals):
            raise ValueError(f"polyp center, radii and intensity must lie in [0, 1]: {self}")

    def center_at(self, frame_index: int) -> tuple[float, float]:
        return (self.center[0] + self.drift[0] * frame_index,
                self.center[1] + self.drift[1] * frame_index)


@dataclass(frozen=True)
class SceneSpec:
    polyps: tuple[SyntheticPolyp, ...] = ()
    width: int = DETECTOR_SIDE
    height: int = DETECTOR_SIDE

    @classmethod
    def from_json(cls, doc) -> "SceneSpec":
        if isinstance(doc, list):
            doc = {"polyps": doc}
        polyps = tuple(
            SyntheticPolyp(center=tuple(p["center"]), radii=tuple(p["radii"]),
                           intensity=float(p.get("intensity", 1.0)),
                           drift=tuple(p.get("drift", (0.0, 0.0))))
            for p in doc.get("polyps", []))
        return cls(polyps, int(doc.get("width", DETECTOR_SIDE)), int(doc.get("height", DETECTOR_SIDE)))

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_json(json.loads(Path(path).read_text()))

    def to_json(self) -> dict:
        return {"width": self.width, "height": self.height,
                "polyps": [{"center": list(p.center), "radii": list(p.radii),
                            "intensity": p.intensity, "drift": list(p.drift)}
                           for p in self.polyps]}


def stub_detector(scene: SceneSpec, frame_index: int) -> list[RawCellPrediction]:
    """One prediction per polyp, normalized to the scene frame."""
    cells = []
    for p in scene.polyps:
        cx, cy = p.center_at(frame_index)
        x0, x1 = max(0.0, cx - p.radii[0]), min(1.0, cx + p.radii[0])
        y0, y1 = max(0.0, cy - p.radii[1]), min(1.0, cy + p.radii[1])
        if x0 >= x1 or y0 >= y1:
            continue
        cells.append(RawCellPrediction(
            p_obj=0.5 + 0.5 * p.intensity,
            xc=(x0 + x1) / 2, yc=(y0 + y1) / 2, w=x1 - x0, h=y1 - y0,
            p_class=STUB_CLASS_PROB))
    return cells


def _scene_probability(scene: SceneSpec, frame_index: int, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Probability at frame pixel coordinates ``xs`` (columns) by ``ys`` (rows)."""
    xn = (xs / scene.width)[None, :]
    yn = (ys / scene.height)[:, None]
    out = np.zeros((len(ys), len(xs)), dtype=np.float64)
    for p in scene.polyps:
        cx, cy = p.center_at(frame_index)
        rx, ry = max(p.radii[0], 1e-12), max(p.radii[1], 1e-12)
        d = np.sqrt(((xn - cx) / rx) ** 2 + ((yn - cy) / ry) ** 2)
        np.maximum(out, np.clip(1.0 - d, 0.0, 1.0) * p.intensity, out=out)
    return out


def stub_segmenter(scene: SceneSpec, roi: PixelBox, frame_index: int,
                   side: int = SEGMENTER_SIDE) -> np.ndarray:
    """Probability map of ``roi`` thumbnail-centered onto a ``side`` square."""
    if roi.degenerate or roi.xmin < 0 or roi.ymin < 0 or roi.xmax > scene.width or roi.ymax > scene.height:
        raise BackendError(f"roi {roi.as_tuple()} outside {scene.width}x{scene.height} frame")
    rw, rh = int(round(roi.width)), int(round(roi.height))
    t = fit_transform(rw, rh, side, THUMBNAIL_CENTER)
    return _stub_map(scene, roi, frame_index, t)


def _stub_map(scene: SceneSpec, roi: PixelBox, frame_index: int, t: SpaceTransform) -> np.ndarray:
    cols = np.arange(t.content_w)
    rows = np.arange(t.content_h)
    # pixel centers of the resized content, mapped back into frame pixels
    xs = roi.xmin + (cols + 0.5) * (t.src_w / t.content_w)
    ys = roi.ymin + (rows + 0.5) * (t.src_h / t.content_h)
    out = np.zeros((t.target, t.target), dtype=np.float64)
    out[t.pad_y:t.pad_y + t.content_h, t.pad_x:t.pad_x + t.content_w] = \
        _scene_probability(scene, frame_index, xs, ys)
    return out


MUCOSA_RGB = np.array([178, 84, 76], dtype=np.float64)
POLYP_RGB = np.array([236, 170, 150], dtype=np.float64)


def render_scene(scene: SceneSpec, frame_index: int) -> np.ndarray:
    """Synthetic RGB endoscopy-like frame for ``scene`` at ``frame_index``."""
    img = np.empty((scene.height, scene.width, 3), dtype=np.uint8)
    img[:] = np.floor(MUCOSA_RGB + 0.5).astype(np.uint8)
    # probability is zero outside every polyp's bounding box
    for p in scene.polyps:
        cx, cy = p.center_at(frame_index)
        x0 = max(0, int(np.floor((cx - p.radii[0]) * scene.width)) - 1)
        x1 = min(scene.width, int(np.ceil((cx + p.radii[0]) * scene.width)) + 1)
        y0 = max(0, int(np.floor((cy - p.radii[1]) * scene.height)) - 1)
        y1 = min(scene.height, int(np.ceil((cy + p.radii[1]) * scene.height)) + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        prob = _scene_probability(scene, frame_index, np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5)
        shade = np.sqrt(prob)[..., None]
        img[y0:y1, x0:x1] = np.floor(MUCOSA_RGB * (1 - shade) + POLYP_RGB * shade + 0.5).astype(np.uint8)
    return img


# -- backend contract ------------------------------------------------------

@dataclass
class FrameContext:
    """What a backend may know about the frame beyond its pixels."""

    index: int
    transform: SpaceTransform
    roi: PixelBox | None = None


class Detector(Protocol):
    descriptor: BackendDescriptor

    def detect(self, image: np.ndarray, ctx: FrameContext) -> list[RawCellPrediction]: ...


class Segmenter(Protocol):
    descriptor: BackendDescriptor

    def segment(self, image: np.ndarray, ctx: FrameContext) -> np.ndarray: ...


@dataclass
class StubDetector:
    scene: SceneSpec
    descriptor: BackendDescriptor = field(
        default_factory=lambda: BackendDescriptor("stub", DETECTOR, DETECTOR_SIDE))

    def detect(self, image, ctx):
        t = ctx.transform
        out = []
        for c in stub_detector(self.scene, ctx.index):
            fb = yolo_to_box(NormalizedBox(c.xc, c.yc, c.w, c.h), self.scene.width, self.scene.height)
            mb = map_box(fb, t)
            side = t.target
            out.append(RawCellPrediction(c.p_obj, (mb.xmin + mb.xmax) / (2 * side),
                                         (mb.ymin + mb.ymax) / (2 * side),
                                         mb.width / side, mb.height / side, c.p_class))
        return out


@dataclass
class StubSegmenter:
    scene: SceneSpec
    descriptor: BackendDescriptor = field(
        default_factory=lambda: BackendDescriptor("stub", SEGMENTER, SEGMENTER_SIDE))

    def segment(self, image, ctx):
        roi = ctx.roi or PixelBox(0, 0, self.scene.width, self.scene.height)
        return _stub_map(self.scene, roi, ctx.index, ctx.transform)


_DETECTORS: dict[str, Callable[..., Detector]] = {"stub": StubDetector}
_SEGMENTERS: dict[str, Callable[..., Segmenter]] = {"stub": StubSegmenter}


def register_detector(name: str, factory: Callable[..., Detector]) -> None:
    _DETECTORS[name] = factory


def register_segmenter(name: str, factory: Callable[..., Segmenter]) -> None:
    _SEGMENTERS[name] = factory


def _resolve(table, kind, name, **kwargs):
    try:
        factory = table[name]
    except KeyError:
        raise BackendError(f"unknown {kind} backend {name!r}; available: {sorted(table)}") from None
    return factory(**kwargs)


def make_detector(name: str, **kwargs) -> Detector:
    return _resolve(_DETECTORS, DETECTOR, name, **kwargs)


def make_segmenter(name: str, **kwargs) -> Segmenter:
    return _resolve(_SEGMENTERS, SEGMENTER, name, **kwargs)
