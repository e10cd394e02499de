"""Overlay composition for annotated output frames and PNG sequence encoding."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .imaging import PixelBox, write_png

BOX_RGB = (0, 0, 255)
TEXT_RGB = (255, 255, 255)
PANEL_RGB = (16, 16, 16)
BOX_THICKNESS = 2
ROW_HEIGHT = 12
CHAR_WIDTH = 6

_FONT = None


def _font():
    global _FONT
    if _FONT is None:
        # bitmap font: identical glyphs on every platform
        _FONT = ImageFont.load_default_imagefont()
    return _FONT


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class BoxOverlay:
    box: PixelBox
    confidence: float
    track_id: int


@dataclass(frozen=True)
class PanelRow:
    track_id: int
    size_class: str
    diameter: float
    margin: float
    unit: str
    confidence: float

    def text(self) -> str:
        return (f"#{self.track_id:<3d} {self.size_class:<10s} "
                f"{self.diameter:6.1f}+/-{self.margin:4.1f}{self.unit} {self.confidence:.2f}")


@dataclass
class PanelSpec:
    rows: list[PanelRow] = field(default_factory=list)
    fps: float | None = None

    def lines(self) -> list[str]:
        out = [] if self.fps is None else [f"FPS {self.fps:5.1f}"]
        return out + [r.text() for r in self.rows]


@dataclass
class AnnotatedFrame:
    image: np.ndarray
    frame_index: int
    stream_id: str


def _round_half_up(x):
    return np.floor(x + 0.5)


def colormap(p: np.ndarray) -> np.ndarray:
    """Blue (0) -> yellow (0.5) -> red (1), linear between stops, rounded half up."""
    p = np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0)
    low = p < 0.5
    ramp = 510.0 * p
    rgb = np.empty(p.shape + (3,), dtype=np.float64)
    rgb[..., 0] = np.where(low, ramp, 255.0)
    rgb[..., 1] = np.where(low, ramp, 510.0 - ramp)
    rgb[..., 2] = np.where(low, 255.0 - ramp, 0.0)
    return _round_half_up(rgb).astype(np.uint8)


def heatmap_from_prob(p: np.ndarray, opacity: float = 0.6) -> np.ndarray:
    """RGBA layer; alpha is ``opacity * 255 * p`` rounded half up."""
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros(p.shape + (4,), dtype=np.uint8)
    region = _support(p)
    if region is None:
        return out
    sub = np.clip(p[region], 0.0, 1.0)
    peak = math.floor(opacity * 255 + 0.5)
    out[region + (slice(0, 3),)] = colormap(sub)
    out[region + (3,)] = _round_half_up(peak * sub).astype(np.uint8)
    # zero probability stays fully transparent and uncoloured
    out[region][sub <= 0] = 0
    return out


def _support(p: np.ndarray):
    """Bounding slices of the nonzero entries of a 2-D array, or None."""
    rows = np.flatnonzero(p.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(p.any(axis=0))
    return (slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1))


def blend(frame: np.ndarray, rgba: np.ndarray) -> np.ndarray:
    if rgba.shape[:2] != frame.shape[:2]:
        raise RenderError(f"overlay {rgba.shape[1]}x{rgba.shape[0]} does not match frame "
                          f"{frame.shape[1]}x{frame.shape[0]}")
    out = frame.copy()
    region = _support(rgba[..., 3])
    if region is None:
        return out
    a = rgba[region + (slice(3, 4),)].astype(np.uint32)
    src = frame[region].astype(np.uint32)
    out[region] = ((src * (255 - a) + rgba[region + (slice(0, 3),)].astype(np.uint32) * a + 127)
                   // 255).astype(np.uint8)
    return out


def _box_pixels(box: PixelBox, width: int, height: int):
    x0 = min(max(int(math.floor(box.xmin)), 0), width - 1)
    y0 = min(max(int(math.floor(box.ymin)), 0), height - 1)
    x1 = min(max(int(math.ceil(box.xmax)) - 1, 0), width - 1)
    y1 = min(max(int(math.ceil(box.ymax)) - 1, 0), height - 1)
    return x0, y0, x1, y1


def box_label(track_id: int, confidence: float) -> str:
    return f"#{track_id} {confidence:.2f}"


def _draw_boxes(img: Image.Image, boxes) -> None:
    draw = ImageDraw.Draw(img)
    font = _font()
    for b in boxes:
        x0, y0, x1, y1 = _box_pixels(b.box, img.width, img.height)
        draw.rectangle((x0, y0, x1, y1), outline=BOX_RGB, width=BOX_THICKNESS)
        label = box_label(b.track_id, b.confidence)
        ty = y0 - ROW_HEIGHT if y0 >= ROW_HEIGHT else y0 + BOX_THICKNESS
        tx = x0
        draw.rectangle((tx, ty, tx + CHAR_WIDTH * len(label) + 2, ty + ROW_HEIGHT - 1), fill=BOX_RGB)
        draw.text((tx + 1, ty + 1), label, fill=TEXT_RGB, font=font)


def draw_box(frame: np.ndarray, box: PixelBox, confidence: float, track_id: int) -> np.ndarray:
    img = Image.fromarray(frame)
    _draw_boxes(img, [BoxOverlay(box, confidence, track_id)])
    return np.asarray(img).copy()


def _draw_panel(img: Image.Image, panel: PanelSpec) -> None:
    lines = panel.lines()
    if not lines:
        return
    draw = ImageDraw.Draw(img)
    w = min(img.width - 1, 4 + CHAR_WIDTH * max(len(s) for s in lines))
    h = min(img.height - 1, 4 + ROW_HEIGHT * len(lines))
    draw.rectangle((0, 0, w, h), fill=PANEL_RGB)
    for i, line in enumerate(lines):
        draw.text((2, 2 + i * ROW_HEIGHT), line, fill=TEXT_RGB, font=_font())


def compose(frame: np.ndarray, heatmap: np.ndarray | None = None, boxes=(), panel: PanelSpec | None = None,
            frame_index: int = 0, stream_id: str = "stream-0") -> AnnotatedFrame:
    """Blend the heatmap, then draw boxes, then the panel."""
    out = frame if heatmap is None else blend(frame, heatmap)
    if boxes or (panel is not None and panel.lines()):
        img = Image.fromarray(out)
        _draw_boxes(img, boxes)
        if panel is not None:
            _draw_panel(img, panel)
        out = np.asarray(img)
    return AnnotatedFrame(out.copy() if out is frame else out, frame_index, stream_id)


class SequenceWriter:
    """Writes ``<out>/frames/NNNNNN.png`` in order and ``<out>/index.json`` on close."""

    def __init__(self, out_dir, stream_id: str = "stream-0"):
        self.out_dir = Path(out_dir)
        self.frames_dir = self.out_dir / "frames"
        try:
            self.frames_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create {self.frames_dir}: {exc}") from exc
        self.stream_id = stream_id
        self.count = 0

    def write(self, image: np.ndarray) -> Path:
        path = self.frames_dir / f"{self.count:06d}.png"
        write_png(path, image)
        self.count += 1
        return path

    def close(self, fps: float, extra: dict | None = None) -> Path:
        index = {"stream_id": self.stream_id, "fps": round(fps, 3), "frame_count": self.count,
                 "pattern": "frames/%06d.png", **(extra or {})}
        path = self.out_dir / "index.json"
        try:
            path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        return path


def encode_sequence(frames, out_dir, fps: float = 30.0, stream_id: str = "stream-0") -> Path:
    frames = list(frames)
    if not frames:
        raise RenderError("no frames to encode")
    w = SequenceWriter(out_dir, stream_id)
    for f in frames:
        w.write(f.image if isinstance(f, AnnotatedFrame) else f)
    return w.close(fps)
