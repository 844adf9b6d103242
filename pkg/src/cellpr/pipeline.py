"""End-to-end runs on synthetic scenes: pretrain, train, detect, evaluate."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .config import EvalConfig, RunConfig
from .data import ImageRecord
from .detector import DetectorTrainConfig, GridDetectorParams, TrainResult, detect, train_detector
from .encoder import FeatureExtractor, pretrain_extractor
from .evaluation import EvaluationSummary, counting_report, evaluate_detections
from .regularizer import RegularizerConfig
from .synth import generate_scenes


def evaluate_model(params: GridDetectorParams, records: list[ImageRecord], class_names: list[str],
                   cfg: EvalConfig) -> EvaluationSummary:
    preds = [detect(params, r.image, cfg.map_threshold, cfg.nms_iou) for r in records]
    golds = [r.gold for r in records]
    det = evaluate_detections(preds, golds, len(class_names), cfg.iou_threshold, cfg.count_threshold)
    counted = [[d for d in p if d.confidence >= cfg.count_threshold] for p in preds]
    counts = counting_report([(r.source, c) for r, c in zip(records, counted)],
                             [(r.source, r.gold) for r in records], len(class_names))
    return EvaluationSummary(det, counts, class_names)


@dataclass
class SeedOutcome:
    seed: int
    label: str
    summary: EvaluationSummary
    train: TrainResult
    seconds: float


def split_scenes(cfg: RunConfig, seed: int):
    scenes = generate_scenes(cfg.scene, cfg.n_train + cfg.n_test, seed=seed)
    return scenes[:cfg.n_train], scenes[cfg.n_train:]


def run_variant(train: list[ImageRecord], test: list[ImageRecord], cfg: RunConfig, seed: int,
                regularizer: RegularizerConfig | None, extractor: FeatureExtractor | None,
                label: str, log=None) -> SeedOutcome:
    t0 = time.perf_counter()
    det_cfg = replace(cfg.detector, seed=seed)
    res = train_detector(train, det_cfg, cfg.scene.n_classes, regularizer, extractor, log=log)
    summary = evaluate_model(res.params, test, cfg.scene.class_names, cfg.evaluation)
    return SeedOutcome(seed, label, summary, res, time.perf_counter() - t0)


ABLATION_ROWS = (
    # label, explicit, implicit, balanced encoder
    ("baseline", False, False, False),
    ("explicit", True, False, False),
    ("implicit", False, True, False),
    ("explicit+implicit", True, True, False),
    ("explicit+implicit+balance", True, True, True),
)


def run_seed(cfg: RunConfig, seed: int, rows=ABLATION_ROWS, log=None) -> list[SeedOutcome]:
    """All requested variants on one scene split; variants share the split and detector seed."""
    train, test = split_scenes(cfg, seed)
    extractors: dict[bool, FeatureExtractor] = {}
    out = []
    for label, use_exp, use_imp, balanced in rows:
        if not (use_exp or use_imp):
            out.append(run_variant(train, test, cfg, seed, None, None, label, log))
            continue
        ext = None
        if use_imp:
            if balanced not in extractors:
                enc_cfg = replace(cfg.encoder, seed=seed, balanced=balanced, augment=balanced)
                extractors[balanced] = pretrain_extractor(train, cfg.scene.n_classes, enc_cfg)[0]
            ext = extractors[balanced]
        reg = replace(cfg.regularizer, use_explicit=use_exp, use_implicit=use_imp, seed=seed)
        out.append(run_variant(train, test, cfg, seed, reg, ext, label, log))
    return out


def paired_comparison(outcomes: dict[int, list[SeedOutcome]], base: str, other: str) -> dict:
    mae_wins = map_wins = 0
    rows = []
    for seed, outs in sorted(outcomes.items()):
        by = {o.label: o for o in outs}
        b, o = by[base].summary, by[other].summary
        mae_ok = o.counts.mean_mae <= b.counts.mean_mae
        map_ok = o.detection.map >= b.detection.map
        mae_wins += mae_ok
        map_wins += map_ok
        rows.append({"seed": seed, "mae_base": b.counts.mean_mae, "mae_other": o.counts.mean_mae,
                     "map_base": b.detection.map, "map_other": o.detection.map})
    return {"mae_not_worse": mae_wins, "map_not_worse": map_wins, "n": len(rows), "rows": rows}


def ablation_table(outcomes: dict[int, list[SeedOutcome]], rows=ABLATION_ROWS, class_names=None) -> list[dict]:
    """Seed-averaged metrics in the layout of an explicit/implicit/balance ablation."""
    table = []
    for label, use_exp, use_imp, balanced in rows:
        summaries = [o.summary for outs in outcomes.values() for o in outs if o.label == label]
        if not summaries:
            continue
        n_cls = len(summaries[0].class_names)
        names = class_names or summaries[0].class_names
        row = {"detector": "grid", "explicit": use_exp, "implicit": use_imp, "balance": balanced,
               "precision": float(np.mean([s.detection.precision for s in summaries])),
               "recall": float(np.mean([s.detection.recall for s in summaries])),
               "mAP": float(np.mean([s.detection.map for s in summaries]))}
        for c in range(n_cls):
            row[f"MAE {names[c]}"] = float(np.mean([s.counts.mae[c] for s in summaries]))
            row[f"MRE {names[c]}"] = float(np.nanmean([s.counts.mre[c] for s in summaries]))
        table.append(row)
    return table
