"""Patch encoder pretrained with a supervised contrastive loss, plus PCA reduction.

The encoder is a small ReLU MLP over a downsampled grayscale patch whose output
is L2-normalized. Training uses class-balanced batches and box-jitter
augmentation introduced gradually (linear 0 -> 0.5 over the first half of
training).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import BoundingBox
from .imaging import GrayImage, block_downsample, crop_patches

FORMAT_VERSION = 1
NORM_EPS = 1e-12


class NumericOverflowError(FloatingPointError):
    pass


class UndefinedLossError(ValueError):
    pass


@dataclass
class EncoderParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_side: int = 32
    patch_size: int = 224

    @property
    def embed_dim(self) -> int:
        return self.weights[-1].shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, input_side: int = 32, hidden=(256, 128), embed_dim: int = 64,
             patch_size: int = 224) -> "EncoderParams":
        dims = [input_side * input_side, *hidden, embed_dim]
        ws, bs = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            ws.append(rng.standard_normal((a, b)) * math.sqrt(2.0 / a))
            bs.append(np.zeros(b))
        return cls(ws, bs, input_side, patch_size)

    @classmethod
    def zeros(cls, input_side: int = 32, hidden=(256, 128), embed_dim: int = 64) -> "EncoderParams":
        dims = [input_side * input_side, *hidden, embed_dim]
        return cls([np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])],
                   [np.zeros(b) for b in dims[1:]], input_side)

    def copy(self) -> "EncoderParams":
        return EncoderParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                             self.input_side, self.patch_size)


@dataclass
class PcaProjection:
    mean: np.ndarray
    components: np.ndarray           # (r, D), orthonormal rows
    explained_variance: np.ndarray   # eigenvalues of all retained-rank directions, descending
    r: int

    @property
    def explained_ratio(self) -> float:
        total = self.explained_variance.sum()
        return float(self.explained_variance[: self.r].sum() / total) if total > 0 else 1.0


@dataclass
class TrainConfig:
    temperature: float = 0.1
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 32
    batches_per_epoch: int = 8
    max_augment_fraction: float = 0.5
    balanced: bool = True
    augment: bool = True
    max_shift_frac: float = 0.15
    scale_range: tuple[float, float] = (0.85, 1.15)
    input_side: int = 32
    hidden: tuple[int, ...] = (256, 128)
    embed_dim: int = 64
    patch_size: int = 224
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        self.scale_range = tuple(self.scale_range)
        self.hidden = tuple(self.hidden)

    def augment_fraction(self, epoch: int) -> float:
        if not self.augment:
            return 0.0
        half = max(self.epochs / 2.0, 1.0)
        return self.max_augment_fraction * min(1.0, epoch / half)


# --------------------------------------------------------------------------- forward

def patch_vector(patch: GrayImage | np.ndarray, input_side: int = 32) -> np.ndarray:
    px = patch.pixels if isinstance(patch, GrayImage) else np.asarray(patch, dtype=float)
    return block_downsample(px, input_side).reshape(-1) / 255.0


CROP_CHUNK = 32   # boxes cropped per vectorized call; bounds memory at large patch sizes


def box_inputs(image: GrayImage, coords: np.ndarray, params_or_side: EncoderParams | int = 32,
               patch_size: int = 224) -> np.ndarray:
    """Encoder inputs for an (n, 4) array of box coordinates: crop, resize, downsample, scale to [0, 1]."""
    if isinstance(params_or_side, EncoderParams):
        side, patch_size = params_or_side.input_side, params_or_side.patch_size
    else:
        side = params_or_side
    coords = np.asarray(coords, dtype=float).reshape(-1, 4)
    out = np.empty((len(coords), side * side))
    for start in range(0, len(coords), CROP_CHUNK):
        patches = crop_patches(image, coords[start:start + CROP_CHUNK], (patch_size, patch_size))
        if patch_size % side == 0:
            f = patch_size // side
            small = patches.reshape(len(patches), side, f, side, f).mean(axis=(2, 4))
        else:
            small = np.array([block_downsample(p, side) for p in patches])
        out[start:start + len(patches)] = small.reshape(len(patches), -1) / 255.0
    return out


def box_input(image: GrayImage, box: BoundingBox, params_or_side: EncoderParams | int = 32,
              patch_size: int = 224) -> np.ndarray:
    """Crop a box, resize it to the patch size, downsample to the encoder input."""
    return box_inputs(image, box.as_array()[None, :], params_or_side, patch_size)[0]


def _forward(params: EncoderParams, x: np.ndarray):
    acts = [x]
    h = x
    n_layers = len(params.weights)
    for j, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if j < n_layers - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def _normalize(raw: np.ndarray):
    norms = np.linalg.norm(raw, axis=1)
    z = np.zeros_like(raw)
    ok = norms >= NORM_EPS
    z[ok] = raw[ok] / norms[ok, None]
    z[~ok, 0] = 1.0
    return z, norms, ok


def encode_batch(params: EncoderParams, inputs: np.ndarray) -> np.ndarray:
    """Unit-norm embeddings for an (n, side*side) batch of patch vectors."""
    with np.errstate(over="ignore", invalid="ignore"):
        raw = _forward(params, np.atleast_2d(inputs))[-1]
    if not np.all(np.isfinite(raw)):
        raise NumericOverflowError("non-finite encoder activations")
    return _normalize(raw)[0]


def encode(params: EncoderParams, patch: GrayImage | np.ndarray) -> np.ndarray:
    """Embed one patch (a GrayImage from crop_patch, or an already-flattened input vector)."""
    if isinstance(patch, GrayImage) or np.asarray(patch).ndim == 2:
        vec = patch_vector(patch, params.input_side)
    else:
        vec = np.asarray(patch, dtype=float)
    return encode_batch(params, vec[None, :])[0]


# --------------------------------------------------------------------------- SupCon

def _supcon_parts(z: np.ndarray, labels, tau: float):
    z = np.asarray(z, dtype=float)
    labels = np.asarray(labels)
    n = z.shape[0]
    if n < 2:
        raise UndefinedLossError("need at least two samples")
    s = (z @ z.T) / tau
    eye = np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0
    if not anchors.any():
        raise UndefinedLossError("no anchor has a positive")
    s_off = np.where(eye, -np.inf, s)
    m = s_off.max(axis=1, keepdims=True)
    e_all = np.exp(s_off - m)
    lse_all = np.log(e_all.sum(axis=1)) + m[:, 0]
    s_pos = np.where(pos, s, -np.inf)
    mp = np.where(anchors, s_pos.max(axis=1), 0.0)[:, None]
    e_pos = np.where(pos, np.exp(s_pos - mp), 0.0)
    lse_pos = np.log(np.where(anchors, e_pos.sum(axis=1), 1.0)) + mp[:, 0]
    terms = np.where(anchors, -(lse_pos - np.log(np.maximum(n_pos, 1)) - lse_all), 0.0)
    return s, e_all, e_pos, terms, anchors


def supcon_loss(embeddings, labels, tau: float = 0.1) -> float:
    """Sum over anchors of -log(mean over positives of softmax over all non-self samples).

    Anchors without a positive are skipped; see ``supcon_skipped``.
    """
    return float(_supcon_parts(embeddings, labels, tau)[3].sum())


def supcon_skipped(labels) -> int:
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    return int(np.sum(same.sum(axis=1) <= 1))


def supcon_grad(embeddings, labels, tau: float = 0.1) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. the (unnormalized) embedding rows."""
    z = np.asarray(embeddings, dtype=float)
    _, e_all, e_pos, terms, anchors = _supcon_parts(z, labels, tau)
    soft_all = e_all / e_all.sum(axis=1, keepdims=True)
    pos_sum = e_pos.sum(axis=1, keepdims=True)
    soft_pos = np.divide(e_pos, pos_sum, out=np.zeros_like(e_pos), where=pos_sum > 0)
    g = (soft_all - soft_pos) * anchors[:, None]
    grad = (g + g.T) @ z / tau
    return float(terms.sum()), grad


# --------------------------------------------------------------------------- augmentation & sampling

def augment_box(box: BoundingBox, rng: np.random.Generator, max_shift_frac: float = 0.15,
                scale_range: tuple[float, float] = (0.85, 1.15), bounds: tuple[float, float] | None = None
                ) -> BoundingBox:
    """Jitter a box: shift its center by up to ``max_shift_frac`` of its extent, rescale each side."""
    cx, cy = box.center
    w, h = box.width, box.height
    cx += rng.uniform(-max_shift_frac, max_shift_frac) * w
    cy += rng.uniform(-max_shift_frac, max_shift_frac) * h
    w *= rng.uniform(*scale_range)
    h *= rng.uniform(*scale_range)
    out = BoundingBox.from_center(cx, cy, w, h)
    if bounds is not None:
        out = out.clamp(*bounds)
    return out


def balanced_batch(labels: np.ndarray, batch_size: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Indices with ``batch_size // n_classes`` samples per class (with replacement when a class is short)."""
    per_class = batch_size // n_classes
    out = []
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            raise ValueError(f"class {c} has no patches")
        out.append(rng.choice(idx, size=per_class, replace=idx.size < per_class))
    return np.concatenate(out)


# --------------------------------------------------------------------------- training

@dataclass
class PatchDataset:
    """Gold patches: the source image and box of each, with its class."""

    images: list[GrayImage]
    image_index: np.ndarray
    boxes: list[BoundingBox]
    labels: np.ndarray
    n_classes: int

    @classmethod
    def from_records(cls, records, n_classes: int) -> "PatchDataset":
        images, idx, boxes, labels = [], [], [], []
        for i, rec in enumerate(records):
            images.append(rec.image)
            for c, b in rec.gold:
                if b.area <= 0:
                    continue
                idx.append(i)
                boxes.append(b)
                labels.append(c)
        ds = cls(images, np.array(idx, dtype=int), boxes, np.array(labels, dtype=int), n_classes)
        for c in range(n_classes):
            if not np.any(ds.labels == c):
                raise ValueError(f"class {c} has no gold patches")
        return ds

    def __len__(self):
        return len(self.boxes)

    def inputs(self, indices, side: int, patch_size: int, rng=None, cfg: TrainConfig | None = None,
               augment_mask=None) -> np.ndarray:
        indices = np.asarray(list(indices), dtype=int)
        coords = np.empty((len(indices), 4))
        for row, j in enumerate(indices):
            img = self.images[self.image_index[j]]
            box = self.boxes[j]
            if augment_mask is not None and augment_mask[row]:
                cand = augment_box(box, rng, cfg.max_shift_frac, cfg.scale_range, (img.width, img.height))
                if cand.width > 0 and cand.height > 0:
                    box = cand
            coords[row] = box.as_array()
        out = np.empty((len(indices), side * side))
        owners = self.image_index[indices] if len(indices) else indices
        for im in np.unique(owners):
            rows = np.flatnonzero(owners == im)
            out[rows] = box_inputs(self.images[im], coords[rows], side, patch_size)
        return out


@dataclass
class EncoderTrainResult:
    params: EncoderParams
    loss_trace: list[float] = field(default_factory=list)
    skipped_anchors: int = 0


def _backward(params: EncoderParams, acts, raw, grad_z):
    z, norms, ok = _normalize(raw)
    grad_raw = np.zeros_like(raw)
    gz = grad_z[ok]
    zz = z[ok]
    grad_raw[ok] = (gz - zz * np.sum(zz * gz, axis=1, keepdims=True)) / norms[ok, None]
    gws, gbs = [], []
    delta = grad_raw
    for j in range(len(params.weights) - 1, -1, -1):
        gws.append(acts[j].T @ delta)
        gbs.append(delta.sum(axis=0))
        if j > 0:
            delta = (delta @ params.weights[j].T) * (acts[j] > 0)
    return gws[::-1], gbs[::-1]


def train_encoder(config: TrainConfig, dataset: PatchDataset, log=None) -> EncoderTrainResult:
    """Mini-batch SGD with momentum on the supervised contrastive loss."""
    rng = np.random.default_rng(config.seed)
    params = EncoderParams.init(rng, config.input_side, config.hidden, config.embed_dim, config.patch_size)
    vel_w = [np.zeros_like(w) for w in params.weights]
    vel_b = [np.zeros_like(b) for b in params.biases]
    base_inputs = dataset.inputs(range(len(dataset)), config.input_side, config.patch_size)
    trace, skipped = [], 0
    for epoch in range(config.epochs):
        frac = config.augment_fraction(epoch)
        losses = []
        for _ in range(config.batches_per_epoch):
            if config.balanced:
                idx = balanced_batch(dataset.labels, config.batch_size, dataset.n_classes, rng)
            else:
                idx = rng.choice(len(dataset), size=min(config.batch_size, len(dataset)), replace=False)
            aug = rng.random(idx.size) < frac
            x = base_inputs[idx].copy()
            if aug.any():
                rows = np.flatnonzero(aug)
                x[rows] = dataset.inputs(idx[rows], config.input_side, config.patch_size, rng, config,
                                         np.ones(rows.size, dtype=bool))
            labels = dataset.labels[idx]
            acts = _forward(params, x)
            raw = acts[-1]
            if not np.all(np.isfinite(raw)):
                raise NumericOverflowError(f"encoder diverged at epoch {epoch}")
            z = _normalize(raw)[0]
            skipped += supcon_skipped(labels)
            try:
                loss, gz = supcon_grad(z, labels, config.temperature)
            except UndefinedLossError:
                continue
            n = len(idx)
            gws, gbs = _backward(params, acts, raw, gz / n)
            for j in range(len(params.weights)):
                vel_w[j] = config.momentum * vel_w[j] - config.learning_rate * gws[j]
                vel_b[j] = config.momentum * vel_b[j] - config.learning_rate * gbs[j]
                params.weights[j] += vel_w[j]
                params.biases[j] += vel_b[j]
            losses.append(loss / n)
        trace.append(float(np.mean(losses)) if losses else math.nan)
        if log is not None:
            log(f"encoder epoch {epoch + 1}/{config.epochs} supcon {trace[-1]:.4f} aug {frac:.2f}")
    return EncoderTrainResult(params, trace, skipped)


# --------------------------------------------------------------------------- PCA

def pca_fit(embeddings, variance_kept: float = 0.9) -> PcaProjection:
    """PCA from the eigendecomposition of the sample covariance.

    Keeps the smallest r whose leading eigenvalues explain ``variance_kept`` of
    the variance; directions with eigenvalue <= 1e-12 * trace are discarded.
    """
    x = np.atleast_2d(np.asarray(embeddings, dtype=float))
    n, d = x.shape
    if n < 2:
        raise ValueError("PCA needs at least two samples")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    trace = float(np.trace(cov))
    keep = evals > 1e-12 * trace if trace > 0 else np.zeros_like(evals, dtype=bool)
    keep[0] = True
    evals, evecs = np.clip(evals[keep], 0.0, None), evecs[:, keep]
    # deterministic sign: largest-magnitude loading positive
    signs = np.sign(evecs[np.argmax(np.abs(evecs), axis=0), np.arange(evecs.shape[1])])
    evecs = evecs * np.where(signs == 0, 1.0, signs)
    total = evals.sum()
    if total > 0:
        cum = np.cumsum(evals) / total
        r = int(np.searchsorted(cum, variance_kept - 1e-12) + 1)
    else:
        r = 1
    r = min(r, evecs.shape[1], n)
    return PcaProjection(mean, evecs[:, :r].T.copy(), evals, r)


def pca_project(proj: PcaProjection, embedding) -> np.ndarray:
    e = np.asarray(embedding, dtype=float)
    return (e - proj.mean) @ proj.components.T


def pca_reconstruct(proj: PcaProjection, reduced, r: int | None = None) -> np.ndarray:
    r = proj.r if r is None else r
    return np.asarray(reduced)[..., :r] @ proj.components[:r] + proj.mean


# --------------------------------------------------------------------------- frozen extractor

@dataclass
class FeatureExtractor:
    """Frozen encoder + PCA mapping boxes of an image to implicit feature vectors."""

    params: EncoderParams
    pca: PcaProjection

    @property
    def dim(self) -> int:
        return self.pca.r

    def inputs(self, image: GrayImage, boxes: Sequence[BoundingBox]) -> np.ndarray:
        coords = np.array([b.as_array() for b in boxes]).reshape(len(boxes), 4)
        return box_inputs(image, coords, self.params)

    def features_from_inputs(self, inputs: np.ndarray) -> np.ndarray:
        return pca_project(self.pca, encode_batch(self.params, inputs))

    def features(self, image: GrayImage, boxes: Sequence[BoundingBox]) -> np.ndarray:
        if not boxes:
            return np.zeros((0, self.dim))
        return self.features_from_inputs(self.inputs(image, boxes))

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "input_side": self.params.input_side,
            "patch_size": self.params.patch_size,
            "weights": [w.tolist() for w in self.params.weights],
            "biases": [b.tolist() for b in self.params.biases],
            "pca": {
                "mean": self.pca.mean.tolist(),
                "components": self.pca.components.tolist(),
                "explained_variance": self.pca.explained_variance.tolist(),
                "r": self.pca.r,
            },
        }

    @classmethod
    def from_json(cls, raw: dict) -> "FeatureExtractor":
        if raw.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported encoder format_version {raw.get('format_version')!r}")
        params = EncoderParams([np.array(w, dtype=float) for w in raw["weights"]],
                               [np.array(b, dtype=float) for b in raw["biases"]],
                               int(raw["input_side"]), int(raw["patch_size"]))
        p = raw["pca"]
        pca = PcaProjection(np.array(p["mean"], dtype=float), np.atleast_2d(np.array(p["components"], dtype=float)),
                            np.array(p["explained_variance"], dtype=float), int(p["r"]))
        return cls(params, pca)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> "FeatureExtractor":
        return cls.from_json(json.loads(Path(path).read_text()))


def pretrain_extractor(records, n_classes: int, config: TrainConfig, log=None
                       ) -> tuple[FeatureExtractor, EncoderTrainResult]:
    """Train the encoder on gold patches, then fit and freeze the PCA on their embeddings."""
    ds = PatchDataset.from_records(records, n_classes)
    result = train_encoder(config, ds, log=log)
    inputs = ds.inputs(range(len(ds)), config.input_side, config.patch_size)
    emb = encode_batch(result.params, inputs)
    return FeatureExtractor(result.params, pca_fit(emb)), result


# --------------------------------------------------------------------------- linear probe

def linear_probe_accuracy(train_x, train_y, test_x, test_y, n_classes: int | None = None,
                          epochs: int = 500, lr: float = 0.5, l2: float = 1e-4) -> float:
    """Held-out accuracy of a multinomial logistic regression trained on frozen features."""
    train_x, test_x = np.asarray(train_x, float), np.asarray(test_x, float)
    train_y, test_y = np.asarray(train_y, int), np.asarray(test_y, int)
    n_classes = n_classes or int(max(train_y.max(), test_y.max()) + 1)
    mu, sd = train_x.mean(axis=0), train_x.std(axis=0) + 1e-8
    a, b = (train_x - mu) / sd, (test_x - mu) / sd
    w = np.zeros((a.shape[1], n_classes))
    bias = np.zeros(n_classes)
    onehot = np.eye(n_classes)[train_y]
    for _ in range(epochs):
        logits = a @ w + bias
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(a)
        w -= lr * (a.T @ g + l2 * w)
        bias -= lr * g.sum(axis=0)
    return float(np.mean(np.argmax(b @ w + bias, axis=1) == test_y))


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["scale_range"] = list(config.scale_range)
    d["hidden"] = list(config.hidden)
    return d
