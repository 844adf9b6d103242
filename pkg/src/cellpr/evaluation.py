"""Detection metrics, counting on recomposed full images, and Q-ratio classification.

AP uses all-points interpolation: the precision envelope (running maximum from
the right) integrated over recall. Appending false positives that rank below
every existing prediction therefore leaves AP unchanged.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import BoundingBox, Detection, iou

CELIAC_THRESHOLD = 25.0


class UndefinedRatioError(ZeroDivisionError):
    pass


@dataclass
class MatchResult:
    matches: list[tuple[int, int]]       # (prediction index, gold index)
    false_positives: list[int]
    false_negatives: list[int]

    @property
    def tp(self) -> int:
        return len(self.matches)

    @property
    def fp(self) -> int:
        return len(self.false_positives)

    @property
    def fn(self) -> int:
        return len(self.false_negatives)


def match_detections(preds: Sequence[Detection], golds: Sequence[tuple[int, BoundingBox]],
                     iou_threshold: float = 0.5) -> MatchResult:
    """Greedy matching in descending-confidence order.

    Each prediction takes the highest-IoU unmatched gold of its class when that
    IoU reaches the threshold. Indices refer to the input sequences.
    """
    order = sorted(range(len(preds)), key=lambda j: -preds[j].confidence)
    taken = [False] * len(golds)
    matches, fps = [], []
    for pi in order:
        p = preds[pi]
        best, best_iou = -1, iou_threshold
        for gi, (gc, gb) in enumerate(golds):
            if taken[gi] or gc != p.class_id:
                continue
            o = iou(p.box, gb)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = gi, o
        if best >= 0:
            taken[best] = True
            matches.append((pi, best))
        else:
            fps.append(pi)
    fns = [gi for gi, t in enumerate(taken) if not t]
    return MatchResult(matches, fps, fns)


def average_precision(confidences: Sequence[float], is_tp: Sequence[bool], n_gold: int) -> float:
    """All-points interpolated AP for one class from pooled (confidence, TP?) pairs."""
    if n_gold <= 0:
        raise ValueError("AP is undefined without gold instances")
    conf = np.asarray(confidences, dtype=float)
    tp = np.asarray(is_tp, dtype=bool)
    if conf.size == 0:
        return 0.0
    order = np.argsort(-conf, kind="stable")
    tp = tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gold
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class ClassDetectionStats:
    ap: float | None
    tp: int
    fp: int
    fn: int
    n_gold: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / self.n_gold if self.n_gold else 0.0


@dataclass
class DetectionMetrics:
    per_class: list[ClassDetectionStats]
    iou_threshold: float

    @property
    def map(self) -> float:
        aps = [c.ap for c in self.per_class if c.ap is not None]
        return float(np.mean(aps)) if aps else 0.0

    @property
    def precision(self) -> float:
        tp = sum(c.tp for c in self.per_class)
        fp = sum(c.fp for c in self.per_class)
        return tp / (tp + fp) if tp + fp else 0.0

    @property
    def recall(self) -> float:
        tp = sum(c.tp for c in self.per_class)
        n = sum(c.n_gold for c in self.per_class)
        return tp / n if n else 0.0


def evaluate_detections(preds_per_image: Sequence[Sequence[Detection]],
                        golds_per_image: Sequence[Sequence[tuple[int, BoundingBox]]],
                        n_classes: int, iou_threshold: float = 0.5,
                        count_threshold: float = 0.0) -> DetectionMetrics:
    """Pool matches over the dataset. AP uses every prediction; TP/FP/FN use
    only predictions with confidence >= ``count_threshold``."""
    conf = [[] for _ in range(n_classes)]
    hit = [[] for _ in range(n_classes)]
    tp = [0] * n_classes
    fp = [0] * n_classes
    n_gold = [0] * n_classes
    for preds, golds in zip(preds_per_image, golds_per_image):
        for c, _ in golds:
            n_gold[c] += 1
        m = match_detections(preds, golds, iou_threshold)
        matched = {pi for pi, _ in m.matches}
        for j, p in enumerate(preds):
            conf[p.class_id].append(p.confidence)
            hit[p.class_id].append(j in matched)
        kept = [j for j, p in enumerate(preds) if p.confidence >= count_threshold]
        mk = match_detections([preds[j] for j in kept], golds, iou_threshold)
        for pi, _ in mk.matches:
            tp[preds[kept[pi]].class_id] += 1
        for pi in mk.false_positives:
            fp[preds[kept[pi]].class_id] += 1
    stats = []
    for c in range(n_classes):
        if n_gold[c] == 0:
            warnings.warn(f"class {c} has no gold instances; excluded from mAP", RuntimeWarning, stacklevel=2)
            ap = None
        else:
            ap = average_precision(conf[c], hit[c], n_gold[c])
        stats.append(ClassDetectionStats(ap, tp[c], fp[c], n_gold[c] - tp[c], n_gold[c]))
    return DetectionMetrics(stats, iou_threshold)


# --------------------------------------------------------------------------- counting

@dataclass
class CountReport:
    images: list[str]
    predicted: np.ndarray    # (n_images, n_classes)
    gold: np.ndarray

    @property
    def mae(self) -> np.ndarray:
        return np.mean(np.abs(self.predicted - self.gold), axis=0) if len(self.images) else np.zeros(0)

    @property
    def mre(self) -> np.ndarray:
        """Per-class mean relative error in percent over images with gold > 0 (NaN if none)."""
        out = np.full(self.gold.shape[1], math.nan)
        for c in range(self.gold.shape[1]):
            ok = self.gold[:, c] > 0
            if ok.any():
                out[c] = float(np.mean(np.abs(self.predicted[ok, c] - self.gold[ok, c]) / self.gold[ok, c]) * 100)
        return out

    @property
    def mean_mae(self) -> float:
        return float(np.mean(self.mae))


def _counts(items, n_classes: int) -> np.ndarray:
    out = np.zeros(n_classes, dtype=int)
    for it in items:
        out[it.class_id if isinstance(it, Detection) else it[0]] += 1
    return out


def counting_report(pred_tiles: Sequence[tuple[str, Sequence[Detection]]],
                    gold_tiles: Sequence[tuple[str, Sequence[tuple[int, BoundingBox]]]],
                    n_classes: int) -> CountReport:
    """Sum per-tile counts into their full images (keyed by source name), then compare."""
    pred: OrderedDict[str, np.ndarray] = OrderedDict()
    gold: OrderedDict[str, np.ndarray] = OrderedDict()
    for src, items in gold_tiles:
        gold[src] = gold.get(src, np.zeros(n_classes, dtype=int)) + _counts(items, n_classes)
    for src, items in pred_tiles:
        pred[src] = pred.get(src, np.zeros(n_classes, dtype=int)) + _counts(items, n_classes)
    names = list(gold)
    for src in pred:
        if src not in gold:
            names.append(src)
    zeros = np.zeros(n_classes, dtype=int)
    return CountReport(names,
                       np.array([pred.get(s, zeros) for s in names]).reshape(len(names), n_classes),
                       np.array([gold.get(s, zeros) for s in names]).reshape(len(names), n_classes))


# --------------------------------------------------------------------------- Q-ratio

def q_ratio(iel_count: float, en_count: float) -> float:
    """IELs per 100 ENs."""
    if en_count <= 0:
        raise UndefinedRatioError("Q-ratio undefined with zero EN count")
    return 100.0 * iel_count / en_count


def classify_celiac(ratio: float, threshold: float = CELIAC_THRESHOLD) -> str:
    return "celiac" if ratio >= threshold else "non-celiac"


@dataclass
class BinaryMetrics:
    precision: float
    recall: float
    f1: float
    accuracy: float
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0


def classification_metrics(predicted: Sequence[str], gold: Sequence[str], positive: str = "celiac") -> BinaryMetrics:
    if len(predicted) != len(gold):
        raise ValueError("predicted and gold label lists differ in length")
    tp = sum(p == positive and g == positive for p, g in zip(predicted, gold))
    fp = sum(p == positive and g != positive for p, g in zip(predicted, gold))
    fn = sum(p != positive and g == positive for p, g in zip(predicted, gold))
    tn = len(gold) - tp - fp - fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    accuracy = (tp + tn) / len(gold) if gold else 0.0
    return BinaryMetrics(precision, recall, f1, accuracy, tp, fp, fn, tn)


# --------------------------------------------------------------------------- emission

@dataclass
class EvaluationSummary:
    detection: DetectionMetrics
    counts: CountReport
    class_names: list[str]
    extra: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        mae, mre = self.counts.mae, self.counts.mre
        for c, name in enumerate(self.class_names):
            s = self.detection.per_class[c]
            out.append({"class": name, "precision": s.precision, "recall": s.recall,
                        "ap": "" if s.ap is None else s.ap, "mae": float(mae[c]),
                        "mre": "" if math.isnan(mre[c]) else float(mre[c]),
                        "tp": s.tp, "fp": s.fp, "fn": s.fn, "n_gold": s.n_gold})
        out.append({"class": "all", "precision": self.detection.precision, "recall": self.detection.recall,
                    "ap": self.detection.map, "mae": self.counts.mean_mae,
                    "mre": float(np.nanmean(mre)) if not np.all(np.isnan(mre)) else "",
                    "tp": sum(s.tp for s in self.detection.per_class),
                    "fp": sum(s.fp for s in self.detection.per_class),
                    "fn": sum(s.fn for s in self.detection.per_class),
                    "n_gold": sum(s.n_gold for s in self.detection.per_class)})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = self.rows()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "iou_threshold": self.detection.iou_threshold,
            "precision": self.detection.precision,
            "recall": self.detection.recall,
            "mAP": self.detection.map,
            "mean_MAE": self.counts.mean_mae,
            "classes": self.rows()[:-1],
            **self.extra,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"
