"""Diagonal-covariance Gaussian mixtures: EM fitting, evaluation, sampling and KL estimates."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

VAR_FLOOR = 1e-4
FORMAT_VERSION = 1
LOG_2PI = math.log(2 * math.pi)


@dataclass
class Gmm:
    weights: np.ndarray      # (K,)
    means: np.ndarray        # (K, d)
    variances: np.ndarray    # (K, d) diagonal covariances

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=float))
        k = self.weights.shape[0]
        if self.means.shape[0] != k or self.variances.shape != self.means.shape:
            raise ValueError(f"inconsistent shapes: weights {self.weights.shape}, means {self.means.shape}, "
                             f"variances {self.variances.shape}")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if np.any(self.variances < VAR_FLOOR * (1 - 1e-12)):
            raise ValueError(f"variances must be >= {VAR_FLOOR}")

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def gaussian(cls, mean, var) -> "Gmm":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        var = np.broadcast_to(np.asarray(var, dtype=float), mean.shape)
        return cls(np.ones(1), mean[None, :], var[None, :].copy())

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "K": self.k,
            "dimension": self.dim,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.variances.tolist(),
        }

    @classmethod
    def from_json(cls, raw: dict) -> "Gmm":
        if raw.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported GMM format_version {raw.get('format_version')!r}")
        g = cls(raw["weights"], raw["means"], raw["covariances"])
        if g.k != raw["K"] or g.dim != raw["dimension"]:
            raise ValueError("GMM header does not match its arrays")
        return g

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Gmm":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class FitResult:
    gmm: Gmm
    log_likelihood: list[float]
    n_iter: int
    reseeded: int = 0


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(s, axis=axis)


def component_log_densities(gmm: Gmm, x: np.ndarray) -> np.ndarray:
    """(n, K) array of log w_k + log N(x_n; mu_k, diag var_k)."""
    x = np.atleast_2d(x)
    diff = x[:, None, :] - gmm.means[None, :, :]
    quad = np.sum(diff * diff / gmm.variances[None, :, :], axis=2)
    log_det = np.sum(np.log(gmm.variances), axis=1)
    with np.errstate(divide="ignore"):
        log_w = np.log(gmm.weights)
    return log_w[None, :] - 0.5 * (gmm.dim * LOG_2PI + log_det[None, :] + quad)


def log_density(gmm: Gmm, x) -> float | np.ndarray:
    """log p(x) for a single d-vector, or a length-n array for an (n, d) batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if x.shape[-1] != gmm.dim:
        raise ValueError(f"expected dimension {gmm.dim}, got {x.shape[-1]}")
    out = _logsumexp(component_log_densities(gmm, x), axis=1)
    return float(out[0]) if single else out


def responsibilities(gmm: Gmm, x) -> np.ndarray:
    lc = component_log_densities(gmm, np.asarray(x, dtype=float))
    return np.exp(lc - _logsumexp(lc, axis=1)[:, None])


def grad_log_density(gmm: Gmm, x) -> np.ndarray:
    """d log p(x) / dx = sum_k gamma_k(x) (mu_k - x) / var_k; accepts (d,) or (n, d)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xx = np.atleast_2d(x)
    gamma = responsibilities(gmm, xx)
    g = np.einsum("nk,nkd->nd", gamma, (gmm.means[None] - xx[:, None, :]) / gmm.variances[None])
    return g[0] if single else g


def sample(gmm: Gmm, n: int, seed=None) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    comps = rng.choice(gmm.k, size=n, p=gmm.weights)
    z = rng.standard_normal((n, gmm.dim))
    return gmm.means[comps] + np.sqrt(gmm.variances[comps]) * z


# --------------------------------------------------------------------------- EM

def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _m_step(x: np.ndarray, resp: np.ndarray, floor: float):
    nk = resp.sum(axis=0)
    means = (resp.T @ x) / nk[:, None]
    var = np.empty_like(means)
    for j in range(resp.shape[1]):
        d = x - means[j]
        var[j] = (resp[:, j] @ (d * d)) / nk[j]
    return nk / x.shape[0], means, np.maximum(var, floor)


def em_fit(samples, k: int = 1, seed=0, max_iter: int = 200, tol: float = 1e-6,
           var_floor: float = VAR_FLOOR) -> FitResult:
    """Fit a K-component diagonal GMM by EM from a k-means++ start.

    The returned log-likelihood trace holds the total data log-likelihood of
    the parameters at the start of each E-step; iteration stops once the gain
    drops below ``tol`` or after ``max_iter`` steps.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if d < 1 or n < k or k < 1:
        raise ValueError(f"need at least K={k} samples of dimension >= 1, got {x.shape}")
    rng = np.random.default_rng(seed)
    if k == 1:
        resp = np.ones((n, 1))
    else:
        centers = _kmeans_pp(x, k, rng)
        nearest = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
        resp = np.zeros((n, k))
        resp[np.arange(n), nearest] = 1.0
    reseeded = 0
    weights, means, var = None, None, None
    trace: list[float] = []
    it = 0
    while True:
        nk = resp.sum(axis=0)
        empty = nk <= 1e-10 * n
        if np.any(empty):
            # re-seed dead components at the worst-covered sample
            live = ~empty
            if means is None:
                means = (resp.T @ x) / np.maximum(nk, 1e-300)[:, None]
            for j in np.flatnonzero(empty):
                dist = np.min(((x[:, None, :] - means[None, live]) ** 2).sum(axis=2), axis=1)
                far = int(np.argmax(dist))
                resp[far] = 0.0
                resp[far, j] = 1.0
                live[j] = True
                means[j] = x[far]
                reseeded += 1
        weights, means, var = _m_step(x, resp, var_floor)
        weights = weights / weights.sum()
        gmm = Gmm(weights, means, var)
        lc = component_log_densities(gmm, x)
        ll_n = _logsumexp(lc, axis=1)
        ll = float(np.sum(ll_n))
        trace.append(ll)
        it += 1
        if k == 1 or it >= max_iter or (len(trace) > 1 and trace[-1] - trace[-2] < tol):
            break
        resp = np.exp(lc - ll_n[:, None])
    return FitResult(gmm, trace, it, reseeded)


def bic(gmm: Gmm, samples) -> float:
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    n_params = (gmm.k - 1) + 2 * gmm.k * gmm.dim
    return n_params * math.log(x.shape[0]) - 2 * float(np.sum(log_density(gmm, x)))


def select_k_bic(samples, ks=(1, 2, 3), seed=0) -> FitResult:
    """Fit each candidate K and keep the lowest-BIC mixture."""
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    best, best_score = None, math.inf
    for k in ks:
        if x.shape[0] < k:
            continue
        res = em_fit(x, k, seed=seed)
        score = bic(res.gmm, x)
        if score < best_score:
            best, best_score = res, score
    if best is None:
        raise ValueError("not enough samples for any candidate K")
    return best


# --------------------------------------------------------------------------- KL

@dataclass(frozen=True)
class KlEstimate:
    value: float
    stderr: float
    n: int


def _kl_shard(p: Gmm, q: Gmm, n: int, seed_seq: np.random.SeedSequence) -> np.ndarray:
    x = sample(p, n, np.random.default_rng(seed_seq))
    return log_density(p, x) - log_density(q, x)


def kl_mc_standard(p: Gmm, q: Gmm, n: int = 100_000, seed=0, shards: int = 1, threads: int = 1) -> KlEstimate:
    """Monte-Carlo KL(p || q) from ``n`` draws of p, with its standard error.

    Draws are split into ``shards`` streams seeded from (seed, shard index);
    ``threads`` only changes how the shards are executed, never the result.
    """
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch {p.dim} vs {q.dim}")
    sizes = [n // shards + (1 if s < n % shards else 0) for s in range(shards)]
    seqs = np.random.SeedSequence(seed).spawn(shards)
    if threads > 1 and shards > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda a: _kl_shard(p, q, *a), zip(sizes, seqs)))
    else:
        parts = [_kl_shard(p, q, m, s) for m, s in zip(sizes, seqs)]
    diffs = np.concatenate(parts)
    se = float(diffs.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return KlEstimate(float(diffs.mean()), se, n)


def kl_mc_paired(p: Gmm, q: Gmm, gold_vectors, pred_vectors) -> float:
    """sum over images of log p(gold vector) - log q(predicted vector)."""
    g = np.atleast_2d(np.asarray(gold_vectors, dtype=float))
    r = np.atleast_2d(np.asarray(pred_vectors, dtype=float))
    if g.shape != r.shape:
        raise ValueError(f"gold {g.shape} and predicted {r.shape} vectors must pair up")
    return float(np.sum(log_density(p, g)) - np.sum(log_density(q, r)))


def kl_closed_form_gaussian(p: Gmm, q: Gmm) -> float:
    """Exact KL between two single diagonal Gaussians."""
    if p.k != 1 or q.k != 1:
        raise ValueError("closed form needs single-component mixtures")
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch {p.dim} vs {q.dim}")
    vp, vq = p.variances[0], q.variances[0]
    dm = p.means[0] - q.means[0]
    return float(0.5 * np.sum(np.log(vq / vp) + (vp + dm * dm) / vq - 1.0))
