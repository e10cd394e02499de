"""Dataset manifest, seeded split, bounding-box annotations and YOLO labels."""
from __future__ import annotations

import json
import math
import os
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .imaging import IMAGE_SUFFIXES, PixelBox, box_to_yolo, image_size

DEFAULT_RATIOS = (0.70, 0.15, 0.15)
DEFAULT_SEED = 42

_MASK64 = (1 << 64) - 1


class DatasetError(ValueError):
    pass


class BBoxParseError(DatasetError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


class PCG32:
    """PCG-XSH-RR 64/32 generator.

    Seeding follows the reference ``pcg32_srandom_r``: zero state, advance,
    add the seed, advance.
    """

    MULTIPLIER = 6364136223846793005
    INCREMENT = 1442695040888963407

    def __init__(self, seed: int, increment: int = INCREMENT):
        self.inc = increment | 1
        self.state = 0
        self._advance()
        self.state = (self.state + seed) & _MASK64
        self._advance()

    def _advance(self) -> None:
        self.state = (self.state * self.MULTIPLIER + self.inc) & _MASK64

    def next_u32(self) -> int:
        old = self.state
        self._advance()
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def shuffle(self, items: list) -> list:
        """Fisher-Yates in place, from the last position down to 1."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_u32() % (i + 1)
            items[i], items[j] = items[j], items[i]
        return items


@dataclass(frozen=True)
class BBoxRecord:
    image_id: str
    label: str
    box: PixelBox


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    image_path: str
    mask_path: str
    width: int
    height: int
    file_size: int


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.image_id in seen:
                raise DatasetError(f"duplicate image id {e.image_id!r}")
            seen.add(e.image_id)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.image_id for e in self.entries]

    def dims(self) -> dict[str, tuple[int, int]]:
        return {e.image_id: (e.width, e.height) for e in self.entries}


@dataclass
class SplitAssignment:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


@dataclass
class DimensionStats:
    n_sampled: int
    unique_dims: int
    mean_w: float
    mean_h: float
    min_dim: tuple[int, int]
    max_dim: tuple[int, int]
    mean_file_size_kb: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


def _list_images(directory: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(directory.iterdir())
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES}


def build_manifest(data_dir, images: str = "images", masks: str = "masks") -> DatasetManifest:
    """Index ``<data_dir>/images`` against ``<data_dir>/masks`` by file stem."""
    root = Path(data_dir)
    img_dir, mask_dir = root / images, root / masks
    for d in (img_dir, mask_dir):
        if not d.is_dir():
            raise DatasetError(f"missing directory {d}")
    imgs, msks = _list_images(img_dir), _list_images(mask_dir)
    missing = sorted(set(imgs) - set(msks))
    if missing:
        raise DatasetError(f"{len(missing)} image(s) without mask, first: {missing[0]!r}")
    entries = []
    for image_id in sorted(imgs):
        path = imgs[image_id]
        w, h = image_size(path)
        entries.append(ManifestEntry(image_id, str(path), str(msks[image_id]), w, h,
                                     os.path.getsize(path)))
    return DatasetManifest(entries)


def _record(image_id: str, raw, index: int) -> BBoxRecord:
    if not isinstance(raw, dict):
        raise DatasetError(f"{image_id}[{index}]: box record must be an object")
    coords = []
    for key in ("xmin", "ymin", "xmax", "ymax"):
        if key not in raw:
            raise DatasetError(f"{image_id}[{index}]: missing coordinate key {key!r}")
        try:
            coords.append(int(raw[key]))
        except (TypeError, ValueError):
            raise DatasetError(f"{image_id}[{index}]: {key}={raw[key]!r} is not an integer") from None
    box = PixelBox(*coords)
    if box.degenerate:
        raise DatasetError(f"{image_id}[{index}]: degenerate box {tuple(coords)}")
    if min(coords) < 0:
        raise DatasetError(f"{image_id}[{index}]: negative coordinate in {tuple(coords)}")
    return BBoxRecord(image_id, str(raw.get("label", "polyp")), box)


def parse_bbox_json(data: bytes | str) -> tuple[dict[str, list[BBoxRecord]], list[str]]:
    """Parse a ``bounding-boxes.json`` document.

    Returns the records per image and the diagnostics of records that were
    rejected.  Both ``{"id": {"bbox": [...]}}`` and ``{"id": [...]}`` shapes
    are accepted.
    """
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise BBoxParseError(f"malformed JSON: {exc.msg}", len(text[:exc.pos].encode("utf-8"))) from None
    if not isinstance(doc, dict):
        raise BBoxParseError("top level must be an object", 0)
    records: dict[str, list[BBoxRecord]] = {}
    errors: list[str] = []
    for image_id, value in doc.items():
        raw = value.get("bbox", []) if isinstance(value, dict) else value
        if not isinstance(raw, list):
            errors.append(f"{image_id}: bbox must be a list")
            continue
        out = []
        for i, item in enumerate(raw):
            try:
                out.append(_record(image_id, item, i))
            except DatasetError as exc:
                errors.append(str(exc))
        records[image_id] = out
    return records, errors


def bbox_dims(data: bytes | str) -> dict[str, tuple[int, int]]:
    """Image sizes carried inline by Hyper-Kvasir style annotations, if any."""
    doc = json.loads(data)
    return {k: (int(v["width"]), int(v["height"])) for k, v in doc.items()
            if isinstance(v, dict) and "width" in v and "height" in v}


def split_sizes(n: int, ratios=DEFAULT_RATIOS) -> tuple[int, int, int]:
    # exact decimal ratios so that e.g. 0.7 * 10 floors to 7, not 6
    n_train = math.floor(n * Fraction(str(ratios[0])))
    n_val = math.floor(n * Fraction(str(ratios[1])))
    return n_train, n_val, n - n_train - n_val


def deterministic_split(ids, ratios=DEFAULT_RATIOS, seed: int = DEFAULT_SEED) -> SplitAssignment:
    ids = sorted(ids)
    if not ids:
        raise DatasetError("cannot split an empty id list")
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate ids in split input")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"split ratios must sum to 1, got {ratios}")
    PCG32(seed).shuffle(ids)
    n_train, n_val, _ = split_sizes(len(ids), ratios)
    return SplitAssignment(ids[:n_train], ids[n_train:n_train + n_val], ids[n_train + n_val:], seed)


def format_yolo_line(b: PixelBox, w: int, h: int) -> str:
    n = box_to_yolo(b, w, h)
    return f"0 {n.xc:.6f} {n.yc:.6f} {n.w:.6f} {n.h:.6f}"


def emit_yolo_labels(records: dict[str, list[BBoxRecord]],
                     dims: dict[str, tuple[int, int]]) -> dict[str, str]:
    out = {}
    for image_id, recs in records.items():
        if image_id not in dims:
            raise DatasetError(f"no image dimensions known for {image_id!r}")
        w, h = dims[image_id]
        out[image_id] = "".join(format_yolo_line(r.box, w, h) + "\n" for r in recs)
    return out


def parse_yolo_labels(text: str, with_confidence: bool = False) -> list[tuple]:
    """Parse YOLO label text; rows are ``(xc, yc, w, h)`` or ``(xc, yc, w, h, conf)``."""
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        want = 6 if with_confidence else 5
        if len(parts) != want:
            raise DatasetError(f"line {lineno}: expected {want} fields, got {len(parts)}")
        rows.append(tuple(float(p) for p in parts[1:]))
    return rows


def write_yolo_labels(labels: dict[str, str], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for image_id, text in labels.items():
        p = out_dir / f"{image_id}.txt"
        p.write_text(text)
        paths.append(p)
    return paths


def dataset_stats(manifest: DatasetManifest, sample_n: int, seed: int = DEFAULT_SEED) -> DimensionStats:
    if sample_n <= 0:
        raise DatasetError("sample size must be positive")
    if sample_n > len(manifest):
        raise DatasetError(f"sample of {sample_n} exceeds manifest size {len(manifest)}")
    entries = sorted(manifest.entries, key=lambda e: e.image_id)
    sample = PCG32(seed).shuffle(entries)[:sample_n]
    ws = [e.width for e in sample]
    hs = [e.height for e in sample]
    return DimensionStats(
        n_sampled=sample_n,
        unique_dims=len({(e.width, e.height) for e in sample}),
        mean_w=sum(ws) / sample_n,
        mean_h=sum(hs) / sample_n,
        min_dim=(min(ws), min(hs)),
        max_dim=(max(ws), max(hs)),
        mean_file_size_kb=sum(e.file_size for e in sample) / sample_n / 1024,
    )
