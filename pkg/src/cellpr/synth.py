"""Synthetic multi-class cell scenes: noisy background with rasterized ellipses."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .boxes import BoundingBox
from .data import ImageRecord
from .imaging import GrayImage


@dataclass
class ClassParams:
    name: str
    count_mean: float
    radius_mean: float
    radius_sd: float
    intensity_mean: float
    intensity_sd: float
    aspect_range: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        self.aspect_range = tuple(self.aspect_range)
        if self.count_mean < 0 or self.radius_mean <= 0 or self.radius_sd < 0 or self.intensity_sd < 0:
            raise ValueError(f"invalid parameters for class {self.name!r}")
        if not 0 <= self.intensity_mean <= 255:
            raise ValueError(f"intensity mean of {self.name!r} outside [0, 255]")
        lo, hi = self.aspect_range
        if lo < 1 or hi < lo:
            raise ValueError(f"aspect range of {self.name!r} must satisfy 1 <= lo <= hi")


def default_classes() -> list[ClassParams]:
    # small/dark/round vs large/light/elongated
    return [
        ClassParams("small_dark", 6.0, 5.0, 1.0, 60.0, 10.0, (1.0, 1.15)),
        ClassParams("large_light", 12.0, 9.0, 1.5, 170.0, 10.0, (1.3, 1.8)),
    ]


@dataclass
class SceneSpec:
    width: int = 128
    height: int = 128
    classes: list[ClassParams] = field(default_factory=default_classes)
    background: float = 230.0
    noise_sd: float = 8.0
    overlap: float = 0.1
    min_radius: float = 2.0
    seed: int = 0

    def __post_init__(self):
        self.classes = [c if isinstance(c, ClassParams) else ClassParams(**c) for c in self.classes]
        if not self.classes:
            raise ValueError("at least one class is required")
        for i in range(len(self.classes)):
            for k in range(i + 1, len(self.classes)):
                a, b = self.classes[i], self.classes[k]
                if a.radius_mean == b.radius_mean and a.intensity_mean == b.intensity_mean:
                    raise ValueError(f"classes {a.name!r} and {b.name!r} share size and intensity means")
        if not 0 <= self.overlap < 1:
            raise ValueError("overlap must lie in [0, 1)")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    def to_json(self) -> dict:
        d = asdict(self)
        for c in d["classes"]:
            c["aspect_range"] = list(c["aspect_range"])
        return d

    @classmethod
    def from_json(cls, raw: dict) -> "SceneSpec":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown SceneSpec keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Cell:
    class_id: int
    cx: float
    cy: float
    semi_a: float
    semi_b: float
    angle: float
    intensity: float

    def bbox(self) -> BoundingBox:
        c, s = math.cos(self.angle), math.sin(self.angle)
        hw = math.sqrt((self.semi_a * c) ** 2 + (self.semi_b * s) ** 2)
        hh = math.sqrt((self.semi_a * s) ** 2 + (self.semi_b * c) ** 2)
        return BoundingBox(self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)


def draw_cells(spec: SceneSpec, rng: np.random.Generator) -> list[Cell]:
    cells: list[Cell] = []
    for cid, cp in enumerate(spec.classes):
        count = rng.poisson(cp.count_mean)
        for _ in range(count):
            r = max(spec.min_radius, rng.normal(cp.radius_mean, cp.radius_sd))
            aspect = rng.uniform(*cp.aspect_range)
            a, b = r * math.sqrt(aspect), r / math.sqrt(aspect)
            angle = rng.uniform(0, math.pi)
            intensity = float(np.clip(rng.normal(cp.intensity_mean, cp.intensity_sd), 0, 255))
            for _ in range(100):
                cx = rng.uniform(a, spec.width - a) if spec.width > 2 * a else spec.width / 2
                cy = rng.uniform(a, spec.height - a) if spec.height > 2 * a else spec.height / 2
                if all(math.hypot(cx - o.cx, cy - o.cy) >= (1 - spec.overlap) * (a + o.semi_a) for o in cells):
                    cells.append(Cell(cid, cx, cy, a, b, angle, intensity))
                    break
    return cells


def rasterize(spec: SceneSpec, cells: list[Cell], rng: np.random.Generator) -> np.ndarray:
    px = np.full((spec.height, spec.width), float(spec.background))
    for cell in cells:
        box = cell.bbox().clamp(spec.width, spec.height)
        c0, c1 = int(math.floor(box.w_l)), int(math.ceil(box.w_r))
        r0, r1 = int(math.floor(box.h_l)), int(math.ceil(box.h_r))
        if c1 <= c0 or r1 <= r0:
            continue
        xs = np.arange(c0, c1) + 0.5 - cell.cx
        ys = np.arange(r0, r1) + 0.5 - cell.cy
        dx, dy = np.meshgrid(xs, ys)
        c, s = math.cos(cell.angle), math.sin(cell.angle)
        u = (dx * c + dy * s) / cell.semi_a
        v = (-dx * s + dy * c) / cell.semi_b
        inside = u * u + v * v <= 1.0
        px[r0:r1, c0:c1][inside] = cell.intensity
    if spec.noise_sd > 0:
        px += rng.normal(0.0, spec.noise_sd, px.shape)
    return np.clip(px, 0.0, 255.0)


def render_scene(spec: SceneSpec, seed=None, name: str = "") -> ImageRecord:
    """One scene; gold boxes are the analytic bounding boxes of the drawn ellipses."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    cells = draw_cells(spec, rng)
    px = rasterize(spec, cells, rng)
    gold = [(c.class_id, c.bbox()) for c in cells]
    return ImageRecord(GrayImage(px), gold, name=name)


def scene_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def generate_scenes(spec: SceneSpec, n: int, seed: int | None = None, prefix: str = "scene") -> list[ImageRecord]:
    seeds = scene_seeds(spec.seed if seed is None else seed, n)
    return [render_scene(spec, s, name=f"{prefix}_{i:04d}") for i, s in enumerate(seeds)]
