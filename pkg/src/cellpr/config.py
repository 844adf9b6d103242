"""Run configuration: every module config under one JSON document.

Module seeds are not set individually; a single top-level ``seed`` is copied
into each module on resolution, so a resolved config plus its seed fully
determines a run.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .detector import DetectorTrainConfig
from .encoder import TrainConfig
from .regularizer import RegularizerConfig
from .synth import ClassParams, SceneSpec


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    iou_threshold: float = 0.5
    count_threshold: float = 0.5   # confidence needed for a detection to be counted
    map_threshold: float = 0.01    # confidence floor for detections entering AP
    nms_iou: float = 0.5


def _bench_encoder() -> TrainConfig:
    # crops go straight to the encoder input size; at 224 the implicit gradient
    # dominates training time by more than an order of magnitude
    return TrainConfig(patch_size=32)


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    n_train: int = 40
    n_test: int = 10
    n_seeds: int = 10
    scene: SceneSpec = field(default_factory=SceneSpec)
    encoder: TrainConfig = field(default_factory=_bench_encoder)
    detector: DetectorTrainConfig = field(default_factory=DetectorTrainConfig)
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.n_train < 1 or self.n_test < 1 or self.n_seeds < 1:
            raise ConfigError("n_train, n_test and n_seeds must be >= 1")
        self.propagate_seed()

    def propagate_seed(self) -> "RunConfig":
        for section in (self.scene, self.encoder, self.detector, self.regularizer):
            section.seed = self.seed
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=seed, scene=dataclasses.replace(self.scene),
                                   encoder=dataclasses.replace(self.encoder),
                                   detector=dataclasses.replace(self.detector),
                                   regularizer=dataclasses.replace(self.regularizer))

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        for name in ("scene", "encoder", "detector", "regularizer"):
            out[name].pop("seed")
        return json.loads(json.dumps(out))      # tuples become lists

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, raw: dict) -> "RunConfig":
        return from_dict(cls, raw, "config")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
        return cls.from_json(raw)


def from_dict(cls, raw, where: str):
    """Build dataclass ``cls`` from a JSON object, rejecting unknown keys.

    Nested module sections may not carry their own ``seed``.
    """
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    if cls is not RunConfig:
        names.discard("seed")
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    defaults = cls() if cls is not ClassParams else None
    kwargs = {}
    for key, value in raw.items():
        default = getattr(defaults, key, None)
        if dataclasses.is_dataclass(default):
            kwargs[key] = from_dict(type(default), value, f"{where}.{key}")
        elif cls is SceneSpec and key == "classes":
            if not isinstance(value, list):
                raise ConfigError(f"{where}.classes: expected a list")
            kwargs[key] = [from_dict(ClassParams, c, f"{where}.classes[{j}]") for j, c in enumerate(value)]
        elif isinstance(default, tuple):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None
