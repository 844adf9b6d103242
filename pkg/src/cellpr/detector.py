"""A tiny trainable grid detector.

The image is split into a G x G grid. Every cell gets a fixed vector of pooled
intensity statistics (its own block and its 3x3 / 5x5 neighbourhoods), and a
single linear layer maps it to an objectness logit, class logits and four box
regressors ``(tx, ty, tw, th)``: the object center inside the cell in cell
units and its width/height in cell units.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import BoundingBox, Detection, iou_matrix
from .data import ImageRecord
from .imaging import GrayImage
from .regularizer import LossReport, RegularizerConfig, explicit_vectors, gold_detections, implicit_vectors, \
    regularizer_grad, total_loss

FORMAT_VERSION = 1
N_BOX = 4
MIN_SIDE_PX = 2.0   # smallest decoded box side


class DivergenceError(FloatingPointError):
    pass


# --------------------------------------------------------------------------- cell features

def _block_sums(a: np.ndarray, g: int) -> np.ndarray:
    h, w = a.shape
    return a.reshape(g, h // g, g, w // g).sum(axis=(1, 3))


def _window_sum(block: np.ndarray, radius: int) -> np.ndarray:
    g = block.shape[0]
    pad = np.pad(block, radius)
    out = np.zeros_like(block)
    for dr in range(2 * radius + 1):
        for dc in range(2 * radius + 1):
            out += pad[dr:dr + g, dc:dc + g]
    return out


def _window_ext(block: np.ndarray, radius: int, fn, fill: float) -> np.ndarray:
    g = block.shape[0]
    pad = np.pad(block, radius, constant_values=fill)
    stack = [pad[dr:dr + g, dc:dc + g] for dr in range(2 * radius + 1) for dc in range(2 * radius + 1)]
    return fn(np.stack(stack), axis=0)


FEATURE_NAMES = (
    "mean", "var", "min", "max", "dark",
    "nb_mean", "nb_var", "nb_min", "nb_max", "nb_dark",
    "nb_cx", "nb_cy", "nb_abs_cx", "nb_abs_cy", "nb_sx", "nb_sy",
    "blk_cx", "blk_cy", "wide_dark", "row", "col",
)


def cell_features(image: GrayImage, grid: int) -> np.ndarray:
    """(grid*grid, F) raw features, cells in row-major order.

    Offsets and spreads are in cell units relative to the cell center.
    Image sides must be divisible by ``grid``.
    """
    px = image.pixels / 255.0
    h, w = px.shape
    if h % grid or w % grid:
        raise ValueError(f"image {w}x{h} not divisible into a {grid}x{grid} grid")
    sh, sw = h // grid, w // grid
    n_blk = sh * sw
    bg = float(np.median(px))
    dark = np.clip(bg - px, 0.0, None)
    ys, xs = np.mgrid[0:h, 0:w]
    xc = (xs + 0.5) / sw   # pixel centers in cell units
    yc = (ys + 0.5) / sh

    s_p = _block_sums(px, grid)
    s_pp = _block_sums(px * px, grid)
    s_d = _block_sums(dark, grid)
    s_dx = _block_sums(dark * xc, grid)
    s_dy = _block_sums(dark * yc, grid)
    s_dxx = _block_sums(dark * xc * xc, grid)
    s_dyy = _block_sums(dark * yc * yc, grid)
    blocks = px.reshape(grid, sh, grid, sw)
    b_min = blocks.min(axis=(1, 3))
    b_max = blocks.max(axis=(1, 3))

    mean = s_p / n_blk
    var = np.maximum(s_pp / n_blk - mean ** 2, 0.0)
    rows, cols = np.mgrid[0:grid, 0:grid]
    cx0, cy0 = cols + 0.5, rows + 0.5

    def centroid(sd, sdx, sdy):
        safe = np.where(sd > 1e-9, sd, 1.0)
        cx = np.where(sd > 1e-9, sdx / safe, cx0)
        cy = np.where(sd > 1e-9, sdy / safe, cy0)
        return cx, cy, safe

    nb_n = _window_sum(np.full((grid, grid), float(n_blk)), 1)
    nb_p = _window_sum(s_p, 1) + (9 * n_blk - nb_n) * bg
    nb_pp = _window_sum(s_pp, 1) + (9 * n_blk - nb_n) * bg * bg
    nb_mean = nb_p / (9 * n_blk)
    nb_var = np.maximum(nb_pp / (9 * n_blk) - nb_mean ** 2, 0.0)
    nb_min = _window_ext(b_min, 1, np.min, bg)
    nb_max = _window_ext(b_max, 1, np.max, bg)
    nb_d = _window_sum(s_d, 1)
    ncx, ncy, nsafe = centroid(nb_d, _window_sum(s_dx, 1), _window_sum(s_dy, 1))
    nsx = np.sqrt(np.maximum(_window_sum(s_dxx, 1) / nsafe - ncx ** 2, 0.0))
    nsy = np.sqrt(np.maximum(_window_sum(s_dyy, 1) / nsafe - ncy ** 2, 0.0))
    bcx, bcy, _ = centroid(s_d, s_dx, s_dy)
    wide = _window_sum(s_d, 2) / (25 * n_blk)

    feats = [
        mean, var, b_min, b_max, s_d / n_blk,
        nb_mean, nb_var, nb_min, nb_max, nb_d / (9 * n_blk),
        ncx - cx0, ncy - cy0, np.abs(ncx - cx0), np.abs(ncy - cy0), nsx, nsy,
        bcx - cx0, bcy - cy0, wide, rows / grid, cols / grid,
    ]
    return np.stack([f.reshape(-1) for f in feats], axis=1)


# --------------------------------------------------------------------------- params

@dataclass
class GridDetectorParams:
    grid: int
    n_classes: int
    image_size: tuple[int, int]      # (width, height)
    weight: np.ndarray               # (F, 1 + C + 4)
    bias: np.ndarray                 # (1 + C + 4,)
    feat_mean: np.ndarray
    feat_std: np.ndarray

    @property
    def n_out(self) -> int:
        return 1 + self.n_classes + N_BOX

    @property
    def cell_size(self) -> tuple[float, float]:
        return self.image_size[0] / self.grid, self.image_size[1] / self.grid

    @property
    def box_slice(self) -> slice:
        return slice(1 + self.n_classes, 1 + self.n_classes + N_BOX)

    @property
    def cls_slice(self) -> slice:
        return slice(1, 1 + self.n_classes)

    def copy(self) -> "GridDetectorParams":
        return GridDetectorParams(self.grid, self.n_classes, tuple(self.image_size), self.weight.copy(),
                                  self.bias.copy(), self.feat_mean.copy(), self.feat_std.copy())

    @classmethod
    def init(cls, features: np.ndarray, grid: int, n_classes: int, image_size, rng: np.random.Generator,
             obj_prior: float = 0.05) -> "GridDetectorParams":
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        std = np.where(std > 1e-8, std, 1.0)
        n_out = 1 + n_classes + N_BOX
        weight = rng.standard_normal((features.shape[1], n_out)) * 0.01
        bias = np.zeros(n_out)
        bias[0] = math.log(obj_prior / (1 - obj_prior))
        bias[1 + n_classes:] = [0.5, 0.5, 1.0, 1.0]
        return cls(grid, n_classes, tuple(image_size), weight, bias, mean, std)

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "grid": self.grid,
            "n_classes": self.n_classes,
            "image_size": list(self.image_size),
            "weight": self.weight.tolist(),
            "bias": self.bias.tolist(),
            "feat_mean": self.feat_mean.tolist(),
            "feat_std": self.feat_std.tolist(),
        }

    @classmethod
    def from_json(cls, raw: dict) -> "GridDetectorParams":
        if raw.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported detector format_version {raw.get('format_version')!r}")
        return cls(int(raw["grid"]), int(raw["n_classes"]), tuple(raw["image_size"]),
                   np.array(raw["weight"], dtype=float), np.array(raw["bias"], dtype=float),
                   np.array(raw["feat_mean"], dtype=float), np.array(raw["feat_std"], dtype=float))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> "GridDetectorParams":
        return cls.from_json(json.loads(Path(path).read_text()))


def standardize(params: GridDetectorParams, features: np.ndarray) -> np.ndarray:
    return (features - params.feat_mean) / params.feat_std


def forward(params: GridDetectorParams, features: np.ndarray) -> np.ndarray:
    """Raw head outputs (grid*grid, 1 + C + 4) from raw cell features."""
    return standardize(params, features) @ params.weight + params.bias


# --------------------------------------------------------------------------- encode / decode

def assign_targets(params: GridDetectorParams, gold: Sequence[tuple[int, BoundingBox]]):
    """Per-cell objectness, class and box targets; one gold box per cell (the largest wins)."""
    g = params.grid
    sw, sh = params.cell_size
    obj = np.zeros(g * g)
    cls = np.full(g * g, -1)
    box = np.zeros((g * g, N_BOX))
    area = np.full(g * g, -1.0)
    for c, b in gold:
        cx, cy = b.center
        col = min(max(int(cx // sw), 0), g - 1)
        row = min(max(int(cy // sh), 0), g - 1)
        j = row * g + col
        if b.area <= area[j]:
            continue
        area[j] = b.area
        obj[j] = 1.0
        cls[j] = c
        box[j] = encode_box(params, b, row, col)
    return obj, cls, box


def encode_box(params: GridDetectorParams, box: BoundingBox, row: int, col: int) -> np.ndarray:
    sw, sh = params.cell_size
    cx, cy = box.center
    return np.array([cx / sw - col, cy / sh - row, box.width / sw, box.height / sh])


def decode_box_raw(params: GridDetectorParams, t: np.ndarray, row: int, col: int) -> np.ndarray:
    """Unclamped [w_l, h_l, w_r, h_r] for regressor outputs ``t`` of the given cell."""
    sw, sh = params.cell_size
    cx = (col + t[0]) * sw
    cy = (row + t[1]) * sh
    w = max(t[2] * sw, MIN_SIDE_PX)
    h = max(t[3] * sh, MIN_SIDE_PX)
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def decode_jacobian(params: GridDetectorParams, t: np.ndarray) -> np.ndarray:
    """(4 box coords, 4 regressors) Jacobian of the unclamped decode."""
    sw, sh = params.cell_size
    jw = 1.0 if t[2] * sw > MIN_SIDE_PX else 0.0
    jh = 1.0 if t[3] * sh > MIN_SIDE_PX else 0.0
    return np.array([
        [sw, 0.0, -0.5 * sw * jw, 0.0],
        [0.0, sh, 0.0, -0.5 * sh * jh],
        [sw, 0.0, 0.5 * sw * jw, 0.0],
        [0.0, sh, 0.0, 0.5 * sh * jh],
    ])


def decode_box(params: GridDetectorParams, t: np.ndarray, row: int, col: int) -> BoundingBox:
    w, h = params.image_size
    return BoundingBox.from_array(decode_box_raw(params, t, row, col)).clamp(w, h)


# --------------------------------------------------------------------------- inference

def _sigmoid(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore"):
        return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


def _softmax(x):
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.5) -> list[int]:
    """Greedy suppression: keep the best box, drop every other box overlapping it above the threshold."""
    order = list(np.argsort(-scores, kind="stable"))
    keep = []
    while order:
        i = order.pop(0)
        keep.append(int(i))
        if not order:
            break
        ov = iou_matrix(boxes[i][None, :], boxes[order])[0]
        order = [j for j, o in zip(order, ov) if o <= iou_threshold]
    return keep


@dataclass
class CellDetection:
    detection: Detection
    cell: int
    raw_box: np.ndarray


def detect_cells(params: GridDetectorParams, image: GrayImage, conf_threshold: float = 0.5,
                 nms_iou: float = 0.5, features: np.ndarray | None = None, outputs: np.ndarray | None = None
                 ) -> list[CellDetection]:
    if outputs is None:
        if features is None:
            features = cell_features(image, params.grid)
        outputs = forward(params, features)
    obj = _sigmoid(outputs[:, 0])
    probs = _softmax(outputs[:, params.cls_slice])
    cls = np.argmax(probs, axis=1)
    conf = obj * probs[np.arange(len(cls)), cls]
    cand = np.flatnonzero((conf >= conf_threshold) & (conf > 0))
    g = params.grid
    w, h = params.image_size
    found: list[CellDetection] = []
    for c in range(params.n_classes):
        idx = cand[cls[cand] == c]
        if idx.size == 0:
            continue
        raw = np.array([decode_box_raw(params, outputs[j, params.box_slice], j // g, j % g) for j in idx])
        clamped = np.column_stack([np.clip(raw[:, 0], 0, w), np.clip(raw[:, 1], 0, h),
                                   np.clip(raw[:, 2], 0, w), np.clip(raw[:, 3], 0, h)])
        areas = (clamped[:, 2] - clamped[:, 0]) * (clamped[:, 3] - clamped[:, 1])
        ok = areas > 0
        idx, raw, clamped = idx[ok], raw[ok], clamped[ok]
        if idx.size == 0:
            continue
        for k in nms(clamped, conf[idx], nms_iou):
            det = Detection(BoundingBox.from_array(clamped[k]), c, float(min(conf[idx[k]], 1.0)))
            found.append(CellDetection(det, int(idx[k]), raw[k]))
    found.sort(key=lambda d: -d.detection.confidence)
    return found


def detect(params: GridDetectorParams, image: GrayImage, conf_threshold: float = 0.5,
           nms_iou: float = 0.5) -> list[Detection]:
    """Detections sorted by descending confidence, after per-class greedy NMS."""
    return [d.detection for d in detect_cells(params, image, conf_threshold, nms_iou)]


# --------------------------------------------------------------------------- loss

@dataclass
class DetLoss:
    total: float
    obj: float
    cls: float
    loc: float
    grad_out: np.ndarray     # d total / d raw outputs


def _softplus(x):
    return np.logaddexp(0.0, x)


def detection_loss_outputs(params: GridDetectorParams, outputs: np.ndarray, targets, pos_weight: float = 1.0
                           ) -> DetLoss:
    """Objectness BCE (mean over cells) + class CE and squared box error (means over positive cells)."""
    obj_t, cls_t, box_t = targets
    n = outputs.shape[0]
    grad = np.zeros_like(outputs)
    o = outputs[:, 0]
    wts = np.where(obj_t > 0, pos_weight, 1.0)
    l_obj = float(np.sum(wts * (obj_t * _softplus(-o) + (1 - obj_t) * _softplus(o))) / n)
    grad[:, 0] = wts * (_sigmoid(o) - obj_t) / n
    pos = np.flatnonzero(obj_t > 0)
    l_cls = l_loc = 0.0
    if pos.size:
        logits = outputs[pos][:, params.cls_slice]
        m = logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
        l_cls = float(np.sum(lse - logits[np.arange(pos.size), cls_t[pos]]) / pos.size)
        p = _softmax(logits)
        p[np.arange(pos.size), cls_t[pos]] -= 1.0
        grad[np.ix_(pos, np.arange(params.cls_slice.start, params.cls_slice.stop))] = p / pos.size
        diff = outputs[pos][:, params.box_slice] - box_t[pos]
        l_loc = float(np.sum(diff * diff) / pos.size)
        grad[np.ix_(pos, np.arange(params.box_slice.start, params.box_slice.stop))] = 2 * diff / pos.size
    return DetLoss(l_obj + l_cls + l_loc, l_obj, l_cls, l_loc, grad)


def param_grad(params: GridDetectorParams, features: np.ndarray, grad_out: np.ndarray):
    x = standardize(params, features)
    return x.T @ grad_out, grad_out.sum(axis=0)


def detection_loss(params: GridDetectorParams, record: ImageRecord, pos_weight: float = 1.0,
                   features: np.ndarray | None = None):
    """Loss for one record and its gradient w.r.t. (weight, bias)."""
    if features is None:
        features = cell_features(record.image, params.grid)
    out = forward(params, features)
    res = detection_loss_outputs(params, out, assign_targets(params, record.gold), pos_weight)
    gw, gb = param_grad(params, features, res.grad_out)
    return res, gw, gb


# --------------------------------------------------------------------------- training

@dataclass
class DetectorTrainConfig:
    grid: int = 16
    epochs: int = 40
    batch_size: int = 8
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    pos_weight: float = 2.0
    conf_threshold: float = 0.5
    nms_iou: float = 0.5
    reg_grad_clip: float = 5.0
    seed: int = 0


@dataclass
class TrainResult:
    params: GridDetectorParams
    epoch_reports: list[LossReport] = field(default_factory=list)
    step_reports: list[LossReport] = field(default_factory=list)


def _clip_rows(g: np.ndarray, limit: float) -> np.ndarray:
    if limit <= 0 or g.size == 0:
        return g
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    return g * np.minimum(1.0, limit / np.maximum(norms, 1e-300))


def train_detector(scenes: Sequence[ImageRecord], config: DetectorTrainConfig, n_classes: int,
                   regularizer: RegularizerConfig | None = None, extractor=None, log=None) -> TrainResult:
    """Minibatch SGD with momentum on L_det + lambda_reg * (w_e L_exp + w_i L_imp).

    With ``regularizer`` absent or ``lambda_reg == 0`` no regularizer work is
    done at all, so training is bitwise identical to the plain detector.
    """
    if not scenes:
        raise ValueError("need at least one training scene")
    rng = np.random.default_rng(config.seed)
    size = (scenes[0].image.width, scenes[0].image.height)
    feats = [cell_features(r.image, config.grid) for r in scenes]
    params = GridDetectorParams.init(np.concatenate(feats), config.grid, n_classes, size, rng)
    targets = [assign_targets(params, r.gold) for r in scenes]
    use_reg = regularizer is not None and regularizer.active
    gold_exp = gold_imp = None
    if use_reg:
        golds = [gold_detections(r) for r in scenes]
        if regularizer.use_explicit:
            gold_exp = explicit_vectors(scenes, golds, n_classes)
        if regularizer.use_implicit:
            if extractor is None:
                raise ValueError("implicit regularization needs a pretrained extractor")
            gold_imp = implicit_vectors(scenes, golds, extractor, n_classes)
    vel_w = np.zeros_like(params.weight)
    vel_b = np.zeros_like(params.bias)
    result = TrainResult(params)
    step = 0
    reg_cfg = regularizer if use_reg else RegularizerConfig(lambda_reg=0.0)
    for epoch in range(config.epochs):
        order = rng.permutation(len(scenes))
        ep_reports = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            gw = np.zeros_like(params.weight)
            gb = np.zeros_like(params.bias)
            l_det = 0.0
            outs = []
            for j in batch:
                out = forward(params, feats[j])
                outs.append(out)
                res = detection_loss_outputs(params, out, targets[j], config.pos_weight)
                a, b = param_grad(params, feats[j], res.grad_out)
                gw += a
                gb += b
                l_det += res.total
            nb = len(batch)
            gw /= nb
            gb /= nb
            l_det /= nb
            l_exp = l_imp = 0.0
            skipped = 0
            if use_reg:
                recs = [scenes[j] for j in batch]
                cell_dets = [detect_cells(params, scenes[j].image, config.conf_threshold, config.nms_iou,
                                          outputs=out) for j, out in zip(batch, outs)]
                dets = [[cd.detection for cd in cds] for cds in cell_dets]
                sub = lambda table: None if table is None else {p: [v[j] for j in batch] for p, v in table.items()}
                rg = regularizer_grad(recs, dets, reg_cfg, n_classes, extractor, sub(gold_exp), sub(gold_imp))
                l_exp, l_imp, skipped = rg.l_exp, rg.l_imp, rg.skipped_pairs
                box_grads = rg.combined_box_grad(reg_cfg)
                for j, out, cds, bg in zip(batch, outs, cell_dets, box_grads):
                    if not cds:
                        continue
                    go = np.zeros((config.grid ** 2, params.n_out))
                    bg = _clip_rows(bg, config.reg_grad_clip)
                    for cd, g_box in zip(cds, bg):
                        t = out[cd.cell, params.box_slice]
                        go[cd.cell, params.box_slice] += g_box @ decode_jacobian(params, t)
                    a, b = param_grad(params, feats[j], go)
                    gw += reg_cfg.lambda_reg * a / nb
                    gb += reg_cfg.lambda_reg * b / nb
            report = total_loss(l_det, l_exp, l_imp, reg_cfg, skipped_pairs=skipped, step=step)
            if not math.isfinite(report.l_total) or not np.all(np.isfinite(gw)):
                raise DivergenceError(f"non-finite loss or gradient at epoch {epoch}, step {step}: {report}")
            gw += config.weight_decay * params.weight
            vel_w = config.momentum * vel_w - config.learning_rate * gw
            vel_b = config.momentum * vel_b - config.learning_rate * gb
            params.weight += vel_w
            params.bias += vel_b
            result.step_reports.append(report)
            ep_reports.append(report)
            step += 1
        mean = lambda attr: float(np.mean([getattr(r, attr) for r in ep_reports]))
        rep = LossReport(mean("l_det"), mean("l_exp"), mean("l_imp"), mean("l_total"),
                         skipped_pairs=sum(r.skipped_pairs for r in ep_reports), step=epoch)
        result.epoch_reports.append(rep)
        if log is not None:
            log(f"detector epoch {epoch + 1}/{config.epochs} L_det {rep.l_det:.4f} L_exp {rep.l_exp:.4f} "
                f"L_imp {rep.l_imp:.4f} L_total {rep.l_total:.4f}")
    return result


def config_dict(config: DetectorTrainConfig) -> dict:
    return asdict(config)
