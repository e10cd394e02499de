"""Raster helpers, letterbox/thumbnail geometry and box format conversion.

Frames are ``uint8`` arrays of shape ``(H, W, 3)`` in RGB order.  Probability
maps are float arrays ``(H, W)`` in [0, 1]; binary masks are ``uint8`` arrays
``(H, W)`` holding only 0 and 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

LETTERBOX = "letterbox"
THUMBNAIL_CENTER = "thumbnail-center"
MODES = (LETTERBOX, THUMBNAIL_CENTER)
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")

DETECTOR_SIDE = 416
SEGMENTER_SIDE = 320


class ImagingError(ValueError):
    pass


@dataclass(frozen=True)
class PixelBox:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return max(0.0, self.width) * max(0.0, self.height)

    @property
    def degenerate(self) -> bool:
        return not (self.xmin < self.xmax and self.ymin < self.ymax)

    def validate(self) -> "PixelBox":
        if self.degenerate:
            raise ImagingError(f"degenerate box {self.as_tuple()}")
        if min(self.xmin, self.ymin) < 0:
            raise ImagingError(f"negative coordinate in box {self.as_tuple()}")
        return self

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.xmin, self.ymin, self.xmax, self.ymax)


@dataclass(frozen=True)
class NormalizedBox:
    """Box as (center x, center y, width, height), fractions of the image size."""

    xc: float
    yc: float
    w: float
    h: float

    def corners(self) -> tuple[float, float, float, float]:
        return (self.xc - self.w / 2, self.yc - self.h / 2,
                self.xc + self.w / 2, self.yc + self.h / 2)

    def validate(self, tol: float = 1e-6) -> "NormalizedBox":
        for name in ("xc", "yc", "w", "h"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ImagingError(f"{name}={v} outside [0, 1]")
        x0, y0, x1, y1 = self.corners()
        if x0 < -tol or y0 < -tol or x1 > 1 + tol or y1 > 1 + tol:
            raise ImagingError(f"box {self} extends past the image")
        return self

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.xc, self.yc, self.w, self.h)


@dataclass(frozen=True)
class SpaceTransform:
    """Mapping from a source raster into a square model canvas."""

    src_w: int
    src_h: int
    target: int
    scale: float
    content_w: int
    content_h: int
    pad_x: int
    pad_y: int
    mode: str = LETTERBOX

    @property
    def is_identity(self) -> bool:
        return (self.src_w == self.content_w == self.target
                and self.src_h == self.content_h == self.target)


def _round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def fit_transform(src_w: int, src_h: int, target: int, mode: str = LETTERBOX) -> SpaceTransform:
    if mode not in MODES:
        raise ImagingError(f"unknown resize mode {mode!r}; expected one of {MODES}")
    if min(src_w, src_h, target) < 1:
        raise ImagingError(f"dimensions must be positive, got {src_w}x{src_h} -> {target}")
    longest = max(src_w, src_h)
    # integer form of round(src * target / longest), half away from zero
    content_w = min(target, (2 * src_w * target + longest) // (2 * longest))
    content_h = min(target, (2 * src_h * target + longest) // (2 * longest))
    content_w, content_h = max(1, content_w), max(1, content_h)
    return SpaceTransform(
        src_w=src_w, src_h=src_h, target=target, scale=target / longest,
        content_w=content_w, content_h=content_h,
        pad_x=(target - content_w) // 2, pad_y=(target - content_h) // 2, mode=mode,
    )


def _check_source(arr: np.ndarray, t: SpaceTransform) -> None:
    h, w = arr.shape[:2]
    if (w, h) != (t.src_w, t.src_h):
        raise ImagingError(f"expected {t.src_w}x{t.src_h} raster, got {w}x{h}")


def _nearest_index(n_out: int, n_in: int) -> np.ndarray:
    idx = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.intp)
    return np.minimum(idx, n_in - 1)


def _linear_weights(n_out: int, n_in: int):
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resample(arr: np.ndarray, out_w: int, out_h: int, nearest: bool) -> np.ndarray:
    """Resize ``arr`` to ``out_w`` x ``out_h`` using pixel-center alignment."""
    in_h, in_w = arr.shape[:2]
    if (in_w, in_h) == (out_w, out_h):
        return arr.copy()
    if nearest:
        return arr[_nearest_index(out_h, in_h)][:, _nearest_index(out_w, in_w)]
    ftype = np.float32 if arr.dtype == np.uint8 else np.float64
    src = arr.astype(ftype)
    y0, y1, fy = _linear_weights(out_h, in_h)
    x0, x1, fx = _linear_weights(out_w, in_w)
    extra = (1,) * (arr.ndim - 2)
    fy = fy.astype(ftype).reshape((-1, 1) + extra)
    fx = fx.astype(ftype).reshape((1, -1) + extra)
    rows = src[y0] * (1 - fy) + src[y1] * fy
    out = rows[:, x0] * (1 - fx) + rows[:, x1] * fx
    if arr.dtype == np.uint8:
        return np.clip(np.floor(out + ftype(0.5)), 0, 255).astype(np.uint8)
    return out.astype(arr.dtype)


def apply_transform(frame: np.ndarray, t: SpaceTransform, pad_value=0,
                    nearest: bool | None = None) -> np.ndarray:
    """Place ``frame`` on the ``t.target`` square canvas.

    Single-channel rasters are treated as masks and resampled with nearest
    neighbour unless ``nearest`` says otherwise.
    """
    _check_source(frame, t)
    if t.is_identity:
        return frame.copy()
    if nearest is None:
        nearest = frame.ndim == 2
    content = resample(frame, t.content_w, t.content_h, nearest)
    canvas = np.full((t.target, t.target) + frame.shape[2:], pad_value, dtype=frame.dtype)
    canvas[t.pad_y:t.pad_y + t.content_h, t.pad_x:t.pad_x + t.content_w] = content
    return canvas


def resize_mask(mask: np.ndarray, t: SpaceTransform) -> np.ndarray:
    if mask.ndim != 2:
        raise ImagingError(f"mask must be 2-D, got shape {mask.shape}")
    out = apply_transform((np.asarray(mask) > 0).astype(np.uint8), t, pad_value=0, nearest=True)
    return out


def unmap_raster(arr: np.ndarray, t: SpaceTransform) -> np.ndarray:
    """Inverse of :func:`apply_transform` with nearest sampling of the content region."""
    if arr.shape[:2] != (t.target, t.target):
        raise ImagingError(f"expected {t.target}x{t.target} raster, got {arr.shape[1]}x{arr.shape[0]}")
    if t.is_identity:
        return arr.copy()
    content = arr[t.pad_y:t.pad_y + t.content_h, t.pad_x:t.pad_x + t.content_w]
    return resample(content, t.src_w, t.src_h, nearest=True)


def normalize_pixels(frame: np.ndarray, dtype=np.float32) -> np.ndarray:
    return np.asarray(frame, dtype=dtype) / dtype(255.0)


def threshold_map(p: np.ndarray, tau: float = 0.5) -> np.ndarray:
    if not 0.0 <= tau <= 1.0:
        raise ImagingError(f"threshold {tau} outside [0, 1]")
    return (np.asarray(p) >= tau).astype(np.uint8)


def box_to_yolo(b: PixelBox, img_w: int, img_h: int) -> NormalizedBox:
    b.validate()
    for name, v, lim in (("xmax", b.xmax, img_w), ("ymax", b.ymax, img_h)):
        if v > lim:
            raise ImagingError(f"{name}={v} exceeds image size {lim}")
    return NormalizedBox(
        xc=(b.xmin + b.xmax) / (2 * img_w),
        yc=(b.ymin + b.ymax) / (2 * img_h),
        w=(b.xmax - b.xmin) / img_w,
        h=(b.ymax - b.ymin) / img_h,
    )


def yolo_to_box(n: NormalizedBox, img_w: int, img_h: int) -> PixelBox:
    if n.w <= 0 or n.h <= 0:
        raise ImagingError(f"degenerate normalized box {n}")
    return PixelBox(
        xmin=(n.xc - n.w / 2) * img_w,
        ymin=(n.yc - n.h / 2) * img_h,
        xmax=(n.xc + n.w / 2) * img_w,
        ymax=(n.yc + n.h / 2) * img_h,
    )


def map_box(b: PixelBox, t: SpaceTransform) -> PixelBox:
    s = t.scale
    return PixelBox(b.xmin * s + t.pad_x, b.ymin * s + t.pad_y,
                    b.xmax * s + t.pad_x, b.ymax * s + t.pad_y)


def unmap_box(b: PixelBox, t: SpaceTransform) -> PixelBox:
    """Model-space box back to source pixels, clamped to the source frame.

    Boxes lying entirely in the padding come back degenerate; callers check
    :attr:`PixelBox.degenerate`.
    """
    def fx(v):
        return min(max((v - t.pad_x) / t.scale, 0.0), float(t.src_w))

    def fy(v):
        return min(max((v - t.pad_y) / t.scale, 0.0), float(t.src_h))

    return PixelBox(fx(b.xmin), fy(b.ymin), fx(b.xmax), fy(b.ymax))


def clamp_box(b: PixelBox, width: int, height: int) -> PixelBox:
    return PixelBox(min(max(b.xmin, 0.0), width), min(max(b.ymin, 0.0), height),
                    min(max(b.xmax, 0.0), width), min(max(b.ymax, 0.0), height))


def expand_box(b: PixelBox, margin: float, width: int, height: int) -> tuple[int, int, int, int]:
    """Grow ``b`` by ``margin`` of its size on every side; integer crop bounds inside the frame."""
    dx, dy = b.width * margin, b.height * margin
    x0 = max(0, math.floor(b.xmin - dx))
    y0 = max(0, math.floor(b.ymin - dy))
    x1 = min(width, math.ceil(b.xmax + dx))
    y1 = min(height, math.ceil(b.ymax + dy))
    return x0, y0, x1, y1


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def read_mask(path, tau: float = 0.5) -> np.ndarray:
    """Load a mask image and binarize it at ``tau`` of full scale.

    Masks stored as raw 0/1 values are taken as already binary.
    """
    with Image.open(path) as im:
        raw = np.asarray(im.convert("L"))
    scale = 1.0 if raw.max(initial=0) <= 1 else 255.0
    return threshold_map(raw / scale, tau)


def image_size(path) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.size


def write_png(path, arr: np.ndarray, compress_level: int = 1) -> None:
    path = Path(path)
    if arr.ndim == 2 and arr.max(initial=0) <= 1:
        arr = arr * np.uint8(255)
    try:
        Image.fromarray(np.ascontiguousarray(arr)).save(path, format="PNG", compress_level=compress_level)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
