"""Annotation ingestion, dataset manifests and dataset preparation (masking, slicing)."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import BoundingBox
from .imaging import GrayImage, read_pnm, resample, write_pgm

GoldBox = tuple[int, BoundingBox]


class AnnotationParseError(ValueError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


class AnnotationValidationError(ValueError):
    pass


@dataclass(frozen=True)
class TileOrigin:
    """Where a tile came from, so per-tile counts can be summed back per full image."""

    source: str
    row: int
    col: int
    offset: tuple[int, int]          # (w, h) of the tile's top-left corner in the source
    scale: tuple[float, float]       # target / tile extent along (w, h)


@dataclass
class ImageRecord:
    image: GrayImage
    gold: list[GoldBox] = field(default_factory=list)
    mask: np.ndarray | None = None
    name: str = ""
    origin: TileOrigin | None = None

    def __post_init__(self):
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.image.pixels.shape:
                raise ValueError(f"mask shape {self.mask.shape} != image shape {self.image.pixels.shape}")
        w, h = self.image.width, self.image.height
        self.gold = [(int(c), b.clamp(w, h)) for c, b in self.gold]

    @property
    def source(self) -> str:
        return self.origin.source if self.origin is not None else self.name

    def boxes_by_class(self, n_classes: int) -> list[list[BoundingBox]]:
        out: list[list[BoundingBox]] = [[] for _ in range(n_classes)]
        for c, b in self.gold:
            out[c].append(b)
        return out


# --------------------------------------------------------------------------- annotations

def parse_annotations(lines, image_width: int, image_height: int, n_classes: int | None = None,
                      path="<annotations>") -> list[GoldBox]:
    out = []
    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise AnnotationParseError(path, line_no, f"expected 5 fields, got {len(parts)}")
        try:
            cls = int(parts[0])
            cx, cy, w, h = (float(p) for p in parts[1:])
        except ValueError as exc:
            raise AnnotationParseError(path, line_no, str(exc)) from None
        vals = (cx, cy, w, h)
        if not all(np.isfinite(v) and 0.0 <= v <= 1.0 for v in vals):
            raise AnnotationValidationError(f"{path}:{line_no}: normalized coordinates must lie in [0, 1]")
        if cls < 0 or (n_classes is not None and cls >= n_classes):
            raise AnnotationValidationError(f"{path}:{line_no}: class id {cls} out of range")
        box = BoundingBox.from_center(cx * image_width, cy * image_height, w * image_width, h * image_height)
        out.append((cls, box.clamp(image_width, image_height)))
    return out


def load_annotations(path, image_width: int, image_height: int, n_classes: int | None = None) -> list[GoldBox]:
    """Read ``class cx cy w h`` lines (normalized) into pixel-space boxes, preserving order."""
    with open(path) as f:
        return parse_annotations(f, image_width, image_height, n_classes, path=path)


def format_annotations(gold: list[GoldBox], image_width: int, image_height: int) -> str:
    lines = []
    for cls, b in gold:
        cx, cy = b.center
        lines.append(f"{cls} {cx / image_width:.8f} {cy / image_height:.8f} "
                     f"{b.width / image_width:.8f} {b.height / image_height:.8f}")
    return "\n".join(lines) + ("\n" if lines else "")


def write_annotations(path, gold: list[GoldBox], image_width: int, image_height: int) -> None:
    Path(path).write_text(format_annotations(gold, image_width, image_height))


# --------------------------------------------------------------------------- manifest

@dataclass
class DatasetManifest:
    class_names: list[str]
    records: list[tuple[str, str]]
    iou_threshold: float = 0.5

    def __post_init__(self):
        if not self.class_names:
            raise ValueError("class_names must be non-empty")
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError(f"iou_threshold {self.iou_threshold} outside (0, 1)")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def to_json(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "iou_threshold": self.iou_threshold,
            "records": [{"image": im, "labels": lb} for im, lb in self.records],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        raw = json.loads(Path(path).read_text())
        unknown = set(raw) - {"class_names", "iou_threshold", "records"}
        if unknown:
            raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
        base = Path(path).parent
        records = []
        for r in raw["records"]:
            records.append((str(base / r["image"]), str(base / r["labels"])))
        return cls(list(raw["class_names"]), records, float(raw.get("iou_threshold", 0.5)))

    def load_records(self) -> list[ImageRecord]:
        out = []
        for image_path, label_path in self.records:
            img = read_pnm(image_path)
            gold = load_annotations(label_path, img.width, img.height, self.n_classes)
            out.append(ImageRecord(img, gold, name=Path(image_path).stem))
        return out


def save_record(record: ImageRecord, directory, stem: str) -> tuple[str, str]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    image_path = directory / f"{stem}.pgm"
    label_path = directory / f"{stem}.txt"
    write_pgm(image_path, record.image)
    write_annotations(label_path, record.gold, record.image.width, record.image.height)
    return os.fspath(image_path), os.fspath(label_path)


# --------------------------------------------------------------------------- preparation

def apply_mask(record: ImageRecord, fill: float = 0.0) -> ImageRecord:
    """Blank pixels outside the region of interest and drop gold boxes centred outside it."""
    if record.mask is None:
        return record
    px = np.where(record.mask, record.image.pixels, float(fill))
    h, w = record.mask.shape
    kept = []
    for cls, b in record.gold:
        cx, cy = b.center
        col, row = min(int(cx), w - 1), min(int(cy), h - 1)
        if record.mask[row, col]:
            kept.append((cls, b))
    return ImageRecord(GrayImage(px), kept, record.mask, record.name, record.origin)


def tile_edges(n: int, parts: int) -> list[int]:
    return [(i * n) // parts for i in range(parts + 1)]


def slice_image(record: ImageRecord, grid: tuple[int, int] = (3, 3), target: tuple[int, int] = (640, 640),
                min_keep_fraction: float = 0.25) -> list[ImageRecord]:
    """Partition the image into grid tiles and rescale each to ``target`` = (width, height).

    Gold boxes are clipped to each tile; a clipped box survives when it keeps at
    least ``min_keep_fraction`` of its original area. Tiles are returned row-major.
    """
    img = record.image
    n_cols, n_rows = grid
    if img.width < n_cols or img.height < n_rows:
        raise ValueError(f"image {img.width}x{img.height} too small for a {n_cols}x{n_rows} grid")
    tw, th = target
    ws = tile_edges(img.width, n_cols)
    hs = tile_edges(img.height, n_rows)
    source = record.source
    tiles = []
    for r in range(n_rows):
        for c in range(n_cols):
            w0, w1, h0, h1 = ws[c], ws[c + 1], hs[r], hs[r + 1]
            sw, sh = tw / (w1 - w0), th / (h1 - h0)
            px = resample(img.pixels[h0:h1, w0:w1], (0.0, 0.0, float(w1 - w0), float(h1 - h0)), th, tw)
            gold = []
            for cls, b in record.gold:
                clipped = BoundingBox(min(max(b.w_l, w0), w1), min(max(b.h_l, h0), h1),
                                      min(max(b.w_r, w0), w1), min(max(b.h_r, h0), h1))
                if b.area > 0:
                    keep = b.intersection(clipped) >= min_keep_fraction * b.area and clipped.area > 0
                else:
                    cx, cy = b.center
                    keep = w0 <= cx < w1 and h0 <= cy < h1
                if keep:
                    gold.append((cls, clipped.translate(-w0, -h0).scale(sw, sh)))
            mask = None
            if record.mask is not None:
                rows = np.minimum(((np.arange(th) + 0.5) / sh).astype(int), h1 - h0 - 1)
                cols = np.minimum(((np.arange(tw) + 0.5) / sw).astype(int), w1 - w0 - 1)
                mask = record.mask[h0:h1, w0:w1][np.ix_(rows, cols)]
            origin = TileOrigin(source, r, c, (w0, h0), (sw, sh))
            tiles.append(ImageRecord(GrayImage(np.clip(px, 0, 255)), gold, mask,
                                     name=f"{source}_r{r}c{c}", origin=origin))
    return tiles
