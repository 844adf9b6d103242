"""Posterior-regularization losses over per-image discriminative vectors.

For every class pair a mixture P is fitted on the gold vectors of a minibatch
and a mixture Q on the predicted vectors; their divergence is estimated either
paired (sum over images of log P(x_gold) - log Q(x_pred)) or by standard
Monte-Carlo sampling of P. Pair losses are averaged over evaluated pairs.

Gradients treat the fitted mixture parameters as constants: they flow only
through log Q evaluated at the predicted vectors, then through the feature
extraction into box coordinates.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import density
from .boxes import BoundingBox, Detection
from .data import ImageRecord
from .encoder import FeatureExtractor, box_inputs
from .features import INTENSITY_FD_STEP, MissingClassError, class_pairs, covers_pixels, explicit_vector, \
    explicit_vector_grad

log = logging.getLogger(__name__)

Pair = tuple[int, int]
VectorsByPair = dict[Pair, list]     # pair -> per-image vector (np.ndarray) or None

MC_MODES = ("paired", "standard")
MISSING_POLICIES = ("skip-pair", "zero-contribution")


@dataclass
class RegularizerConfig:
    lambda_reg: float = 0.01
    weight_explicit: float = 1.0
    weight_implicit: float = 1.0
    k_explicit: int = 1
    k_implicit: int = 1
    mc_mode: str = "paired"
    mc_samples: int = 100_000
    missing_class: str = "skip-pair"
    strict_pair_denominator: bool = False
    use_explicit: bool = True
    use_implicit: bool = True
    implicit_box_grad: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lambda_reg < 0 or self.weight_explicit < 0 or self.weight_implicit < 0:
            raise ValueError("lambda_reg and feature weights must be non-negative")
        if self.mc_mode not in MC_MODES:
            raise ValueError(f"mc_mode must be one of {MC_MODES}")
        if self.missing_class not in MISSING_POLICIES:
            raise ValueError(f"missing_class must be one of {MISSING_POLICIES}")
        if self.k_explicit < 1 or self.k_implicit < 1:
            raise ValueError("mixture sizes must be >= 1")

    @property
    def active(self) -> bool:
        return self.lambda_reg > 0 and (self.use_explicit or self.use_implicit)


@dataclass
class LossReport:
    l_det: float
    l_exp: float
    l_imp: float
    l_total: float
    per_pair: dict = field(default_factory=dict)
    skipped_pairs: int = 0
    step: int = 0

    CSV_HEADER = "step,L_det,L_exp,L_imp,L_total,skipped_pairs"

    def csv_row(self) -> str:
        return f"{self.step},{self.l_det!r},{self.l_exp!r},{self.l_imp!r},{self.l_total!r},{self.skipped_pairs}"


def total_loss(l_det: float, l_exp: float, l_imp: float, config: RegularizerConfig, **extra) -> LossReport:
    reg = config.weight_explicit * l_exp + config.weight_implicit * l_imp
    return LossReport(l_det, l_exp, l_imp, l_det + config.lambda_reg * reg, **extra)


# --------------------------------------------------------------------------- pairwise aggregation

@dataclass
class PairwiseResult:
    loss: float
    per_pair: dict
    skipped: list
    models: dict
    n_pairs: int
    all_skipped: bool = False
    stderr: dict = field(default_factory=dict)
    rows: dict = field(default_factory=dict)    # pair -> image indices that entered the paired sum


def _pair_seed(seed: int, pair: Pair) -> list[int]:
    return [seed, pair[0], pair[1]]


def _stack(vectors) -> np.ndarray:
    present = [np.asarray(v, dtype=float).reshape(-1) for v in vectors if v is not None]
    return np.array(present) if present else np.zeros((0, 0))


def fit_pair_models(gold: VectorsByPair, pred: VectorsByPair, k: int, seed: int = 0) -> dict:
    """Fit (P, Q) per pair; pairs with fewer than k vectors on either side map to None."""
    models = {}
    for pair in sorted(gold):
        g = _stack(gold[pair])
        p = _stack(pred.get(pair, []))
        if len(g) < k or len(p) < k:
            models[pair] = None
            continue
        s = np.random.SeedSequence(_pair_seed(seed, pair)).generate_state(1)[0]
        models[pair] = (density.em_fit(g, k, seed=int(s)).gmm, density.em_fit(p, k, seed=int(s)).gmm)
    return models


def _paired_rows(gold_list, pred_list):
    return [j for j, (a, b) in enumerate(zip(gold_list, pred_list)) if a is not None and b is not None]


def evaluate_pairwise(models: dict, gold: VectorsByPair, pred: VectorsByPair, config: RegularizerConfig,
                      n_classes: int | None = None) -> PairwiseResult:
    per_pair, skipped, stderr, used_rows = {}, [], {}, {}
    for pair in sorted(models):
        m = models[pair]
        rows = _paired_rows(gold[pair], pred.get(pair, [])) if m is not None else []
        if m is None or (config.mc_mode == "paired" and not rows):
            skipped.append(pair)
            continue
        p_gmm, q_gmm = m
        if config.mc_mode == "paired":
            used_rows[pair] = rows
            g = np.array([gold[pair][j] for j in rows], dtype=float)
            r = np.array([pred[pair][j] for j in rows], dtype=float)
            per_pair[pair] = density.kl_mc_paired(p_gmm, q_gmm, g, r)
        else:
            est = density.kl_mc_standard(p_gmm, q_gmm, config.mc_samples, seed=_pair_seed(config.seed, pair))
            per_pair[pair] = est.value
            stderr[pair] = est.stderr
    n_all = len(models) if n_classes is None else math.comb(n_classes, 2)
    if config.strict_pair_denominator:
        denom = n_all
    elif config.missing_class == "zero-contribution":
        denom = len(models)
    else:
        denom = len(per_pair)
    all_skipped = not per_pair
    if all_skipped:
        log.debug("every class pair was skipped in this minibatch; regularizer contributes zero")
    loss = math.fsum(per_pair[p] for p in sorted(per_pair)) / denom if per_pair and denom else 0.0
    return PairwiseResult(loss, per_pair, skipped, models, denom, all_skipped, stderr, used_rows)


def pairwise_loss(gold: VectorsByPair, pred: VectorsByPair, config: RegularizerConfig, k: int = 1,
                  n_classes: int | None = None) -> PairwiseResult:
    """Fit P on gold and Q on predicted vectors for each pair, then average the divergences."""
    models = fit_pair_models(gold, pred, k, config.seed)
    return evaluate_pairwise(models, gold, pred, config, n_classes)


# --------------------------------------------------------------------------- vectors

def boxes_by_class(detections: Sequence[Detection], n_classes: int, image=None):
    """Boxes grouped per class with their detection indices; boxes covering no pixel are left out."""
    boxes = [[] for _ in range(n_classes)]
    index = [[] for _ in range(n_classes)]
    for j, d in enumerate(detections):
        if image is not None and not covers_pixels(image, d.box):
            continue
        boxes[d.class_id].append(d.box)
        index[d.class_id].append(j)
    return boxes, index


def gold_detections(record: ImageRecord) -> list[Detection]:
    return [Detection(b, c, 1.0) for c, b in record.gold]


def explicit_vectors(minibatch: Sequence[ImageRecord], detections: Sequence[Sequence[Detection]],
                     n_classes: int) -> VectorsByPair:
    out = {pair: [] for pair in class_pairs(n_classes)}
    for rec, dets in zip(minibatch, detections):
        boxes, _ = boxes_by_class(dets, n_classes, rec.image)
        for pair in out:
            try:
                out[pair].append(explicit_vector(rec.image, boxes, pair).values)
            except MissingClassError:
                out[pair].append(None)
    return out


def implicit_box_features(minibatch, detections, extractor: FeatureExtractor) -> list[np.ndarray]:
    feats = []
    for rec, dets in zip(minibatch, detections):
        feats.append(extractor.features(rec.image, [d.box for d in dets]))
    return feats


def implicit_vectors(minibatch: Sequence[ImageRecord], detections: Sequence[Sequence[Detection]],
                     extractor: FeatureExtractor, n_classes: int, box_feats=None) -> VectorsByPair:
    if box_feats is None:
        box_feats = implicit_box_features(minibatch, detections, extractor)
    out = {pair: [] for pair in class_pairs(n_classes)}
    for dets, feats in zip(detections, box_feats):
        _, index = boxes_by_class(dets, n_classes)
        means = [feats[idx].mean(axis=0) if idx else None for idx in index]
        for i, k in out:
            if means[i] is None or means[k] is None:
                out[(i, k)].append(None)
            else:
                out[(i, k)].append(means[i] - means[k])
    return out


def explicit_loss(minibatch, detections, config: RegularizerConfig, n_classes: int,
                  gold_vectors: VectorsByPair | None = None) -> PairwiseResult:
    gold = gold_vectors or explicit_vectors(minibatch, [gold_detections(r) for r in minibatch], n_classes)
    pred = explicit_vectors(minibatch, detections, n_classes)
    return pairwise_loss(gold, pred, config, config.k_explicit, n_classes)


def implicit_loss(minibatch, detections, extractor: FeatureExtractor, config: RegularizerConfig, n_classes: int,
                  gold_vectors: VectorsByPair | None = None) -> PairwiseResult:
    gold = gold_vectors or implicit_vectors(minibatch, [gold_detections(r) for r in minibatch], extractor, n_classes)
    pred = implicit_vectors(minibatch, detections, extractor, n_classes)
    return pairwise_loss(gold, pred, config, config.k_implicit, n_classes)


# --------------------------------------------------------------------------- gradients

@dataclass
class RegularizerGrad:
    l_exp: float
    l_imp: float
    explicit: PairwiseResult | None
    implicit: PairwiseResult | None
    box_grad_explicit: list      # per image (n_det, 4): d L_exp / d box coordinates
    box_grad_implicit: list      # per image (n_det, 4): d L_imp / d box coordinates
    vector_grad_explicit: dict   # pair -> per-image d L_exp / d predicted vector (or None)
    vector_grad_implicit: dict

    @property
    def skipped_pairs(self) -> int:
        return sum(len(r.skipped) for r in (self.explicit, self.implicit) if r is not None)

    def combined_box_grad(self, config: RegularizerConfig) -> list:
        return [config.weight_explicit * a + config.weight_implicit * b
                for a, b in zip(self.box_grad_explicit, self.box_grad_implicit)]


def vector_grads(result: PairwiseResult, pred: VectorsByPair, config: RegularizerConfig) -> dict:
    """d loss / d predicted vector with mixture parameters held fixed.

    Only the paired estimator depends on the predicted vectors once the
    mixtures are frozen; the standard estimator yields zeros.
    """
    out = {pair: [None] * len(vs) for pair, vs in pred.items()}
    if config.mc_mode != "paired" or not result.per_pair:
        return out
    for pair in result.per_pair:
        _, q = result.models[pair]
        for j in result.rows[pair]:
            out[pair][j] = -density.grad_log_density(q, np.asarray(pred[pair][j], dtype=float)) / result.n_pairs
    return out


def implicit_feature_jacobians(extractor: FeatureExtractor, record: ImageRecord, boxes: Sequence[BoundingBox],
                               step: float = INTENSITY_FD_STEP) -> np.ndarray:
    """(n, r, 4) central-difference Jacobians of box implicit features w.r.t. box coordinates.

    All 8n perturbed crops go through the extractor in one batch. A coordinate
    whose perturbation inverts the box or leaves no area in the image gets a
    zero column.
    """
    n = len(boxes)
    if n == 0:
        return np.zeros((0, extractor.dim, 4))
    w, h = record.image.width, record.image.height
    base = np.array([b.as_array() for b in boxes])
    pert = np.repeat(base[:, None, :], 8, axis=1)           # (n, 8, 4): +j, -j for each coordinate
    for j in range(4):
        pert[:, 2 * j, j] += step
        pert[:, 2 * j + 1, j] -= step
    lo = np.clip(pert[..., :2], 0.0, [w, h])
    hi = np.clip(pert[..., 2:], 0.0, [w, h])
    ok = np.all(pert[..., 2:] >= pert[..., :2], axis=-1) & np.all(hi - lo > 0, axis=-1)
    pert = np.where(ok[..., None], pert, base[:, None, :])
    inputs = box_inputs(record.image, pert.reshape(-1, 4), extractor.params)
    feats = extractor.features_from_inputs(inputs).reshape(n, 8, -1)
    jac = (feats[:, 0::2] - feats[:, 1::2]) / (2 * step)    # (n, 4, r)
    jac *= (ok[:, 0::2] & ok[:, 1::2])[..., None]
    return jac.transpose(0, 2, 1)


def implicit_feature_jacobian(extractor: FeatureExtractor, record: ImageRecord, box: BoundingBox,
                              step: float = INTENSITY_FD_STEP) -> np.ndarray:
    """(r, 4) Jacobian for a single box."""
    return implicit_feature_jacobians(extractor, record, [box], step)[0]


def _chain_explicit(minibatch, detections, vgrads: dict, n_classes: int) -> list:
    out = [np.zeros((len(d), 4)) for d in detections]
    for im, (rec, dets) in enumerate(zip(minibatch, detections)):
        boxes, index = boxes_by_class(dets, n_classes, rec.image)
        for pair, grads in vgrads.items():
            g = grads[im]
            if g is None:
                continue
            jac = explicit_vector_grad(rec.image, boxes, pair)
            for cls, j_cls in jac.items():
                for n, det_idx in enumerate(index[cls]):
                    out[im][det_idx] += g @ j_cls[n]
    return out


def _chain_implicit(minibatch, detections, vgrads: dict, extractor: FeatureExtractor, n_classes: int) -> list:
    out = [np.zeros((len(d), 4)) for d in detections]
    for im, (rec, dets) in enumerate(zip(minibatch, detections)):
        _, index = boxes_by_class(dets, n_classes)
        per_class = [np.zeros(extractor.dim) for _ in range(n_classes)]
        touched = False
        for (i, k), grads in vgrads.items():
            g = grads[im]
            if g is None:
                continue
            per_class[i] += g / len(index[i])
            per_class[k] -= g / len(index[k])
            touched = True
        if not touched:
            continue
        for cls in range(n_classes):
            if not np.any(per_class[cls]):
                continue
            jacs = implicit_feature_jacobians(extractor, rec, [dets[j].box for j in index[cls]])
            for det_idx, jac in zip(index[cls], jacs):
                out[im][det_idx] += per_class[cls] @ jac
    return out


def regularizer_grad(minibatch: Sequence[ImageRecord], detections: Sequence[Sequence[Detection]],
                     config: RegularizerConfig, n_classes: int, extractor: FeatureExtractor | None = None,
                     gold_explicit: VectorsByPair | None = None, gold_implicit: VectorsByPair | None = None
                     ) -> RegularizerGrad:
    """Losses and their gradients w.r.t. predicted vectors and box coordinates."""
    zeros = [np.zeros((len(d), 4)) for d in detections]
    exp_res = imp_res = None
    vg_exp, vg_imp = {}, {}
    box_exp, box_imp = zeros, [z.copy() for z in zeros]
    if config.use_explicit:
        gold = gold_explicit or explicit_vectors(minibatch, [gold_detections(r) for r in minibatch], n_classes)
        pred = explicit_vectors(minibatch, detections, n_classes)
        exp_res = pairwise_loss(gold, pred, config, config.k_explicit, n_classes)
        vg_exp = vector_grads(exp_res, pred, config)
        box_exp = _chain_explicit(minibatch, detections, vg_exp, n_classes)
    if config.use_implicit:
        if extractor is None:
            raise ValueError("implicit features need a pretrained extractor")
        gold = gold_implicit or implicit_vectors(minibatch, [gold_detections(r) for r in minibatch],
                                                 extractor, n_classes)
        pred = implicit_vectors(minibatch, detections, extractor, n_classes)
        imp_res = pairwise_loss(gold, pred, config, config.k_implicit, n_classes)
        vg_imp = vector_grads(imp_res, pred, config)
        if config.implicit_box_grad:
            box_imp = _chain_implicit(minibatch, detections, vg_imp, extractor, n_classes)
    return RegularizerGrad(exp_res.loss if exp_res else 0.0, imp_res.loss if imp_res else 0.0,
                           exp_res, imp_res, box_exp, box_imp, vg_exp, vg_imp)


def config_dict(config: RegularizerConfig) -> dict:
    return asdict(config)
