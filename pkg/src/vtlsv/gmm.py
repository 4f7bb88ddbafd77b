"""Diagonal-covariance GMM-UBM, mean-only MAP adaptation and LLR scoring.

Frame arrays are (N, D): one row per frame. FeatureMatrix objects (D x T)
are accepted anywhere a frame array is and transposed on the way in.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import storage
from .errors import DataError

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
CHUNK = 16384


def as_frames(x) -> np.ndarray:
    if hasattr(x, "values") and hasattr(x, "n_frames"):
        return np.asarray(x.values, dtype=np.float64).T
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x


def pool(features) -> np.ndarray:
    return np.vstack([as_frames(f) for f in features])


@dataclass
class DiagonalGmm:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    llk_trace: list = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if self.means.shape != self.variances.shape or self.weights.shape != (self.means.shape[0],):
            raise DataError("inconsistent GMM parameter shapes")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise DataError("GMM weights must sum to 1")
        if np.any(self.variances <= 0) or not np.all(np.isfinite(self.means)):
            raise DataError("GMM variances must be positive and parameters finite")

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_loglik(self, x: np.ndarray) -> np.ndarray:
        """(N, K) array of log w_k + log N(x_t | mu_k, var_k)."""
        ivar = 1.0 / self.variances
        const = (np.log(self.weights) - 0.5 * (self.dim * LOG_2PI + np.log(self.variances).sum(1))
                 - 0.5 * (self.means ** 2 * ivar).sum(1))
        return const + x @ (self.means * ivar).T - 0.5 * (x ** 2) @ ivar.T

    def frame_loglik(self, x) -> np.ndarray:
        x = as_frames(x)
        return logsumexp(self.component_loglik(x), axis=1)

    def posteriors(self, x):
        """Responsibilities (N, K) and per-frame log-likelihood (N,)."""
        lc = self.component_loglik(x)
        ll = logsumexp(lc, axis=1)
        return np.exp(lc - ll[:, None]), ll

    def save(self, path) -> None:
        storage.save_gmm(path, self.weights, self.means, self.variances)

    @classmethod
    def load(cls, path) -> "DiagonalGmm":
        return cls(*storage.load_gmm(path))


@dataclass(frozen=True)
class MapConfig:
    relevance_factor: float = 10.0
    iterations: int = 3

    def __post_init__(self):
        if self.relevance_factor <= 0 or self.iterations < 1:
            raise DataError("relevance factor must be > 0 and iterations >= 1")


def _accumulate(gmm: DiagonalGmm, x: np.ndarray, second_order: bool = True):
    """Zeroth/first/second-order stats and total log-likelihood, in fixed-order chunks."""
    k, d = gmm.means.shape
    n = np.zeros(k)
    f = np.zeros((k, d))
    s = np.zeros((k, d)) if second_order else None
    total = 0.0
    for start in range(0, x.shape[0], CHUNK):
        xc = x[start:start + CHUNK]
        r, ll = gmm.posteriors(xc)
        n += r.sum(0)
        f += r.T @ xc
        if second_order:
            s += r.T @ (xc ** 2)
        total += ll.sum()
    return n, f, s, total


def _kmeanspp(x: np.ndarray, k: int, rng) -> np.ndarray:
    centers = [x[rng.integers(x.shape[0])]]
    dist = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        p = dist / dist.sum() if dist.sum() > 0 else None
        c = x[rng.choice(x.shape[0], p=p)]
        centers.append(c)
        dist = np.minimum(dist, ((x - c) ** 2).sum(1))
    return np.array(centers)


def train_ubm_em(features, n_components: int, em_iterations: int = 10, seed: int = 0,
                 subsample: int = 20000) -> DiagonalGmm:
    """EM training of a diagonal GMM from pooled frames.

    k-means++ seeding on a random subsample of frames, then `em_iterations`
    rounds of EM. The variance floor is 1e-3 times the global per-dim variance.
    The returned model carries the average log-likelihood before each M-step
    and after the last one in `llk_trace`.
    """
    x = pool(features) if isinstance(features, (list, tuple)) else as_frames(features)
    n_frames, dim = x.shape
    if n_frames < 10 * n_components:
        raise DataError(f"need at least {10 * n_components} frames for K={n_components}, got {n_frames}")
    rng = np.random.default_rng(seed)
    sub = x if n_frames <= subsample else x[np.sort(rng.choice(n_frames, subsample, replace=False))]
    global_var = x.var(0)
    floor = 1e-3 * np.maximum(global_var, 1e-12)
    gmm = DiagonalGmm(np.full(n_components, 1.0 / n_components), _kmeanspp(sub, n_components, rng),
                      np.tile(np.maximum(global_var, floor), (n_components, 1)))
    trace = []
    for it in range(em_iterations):
        n, f, s, total = _accumulate(gmm, x)
        trace.append(total / n_frames)
        means = gmm.means.copy()
        variances = gmm.variances.copy()
        live = n > 1e-6 * n_frames
        means[live] = f[live] / n[live, None]
        variances[live] = np.maximum(s[live] / n[live, None] - means[live] ** 2, floor)
        weights = n / n_frames
        dead = np.flatnonzero(~live)
        if dead.size:
            log.warning("EM iteration %d: re-seeding %d empty components", it, dead.size)
            worst = np.argsort(gmm.frame_loglik(x))[:dead.size]
            means[dead] = x[worst]
            variances[dead] = np.maximum(global_var, floor)
            weights[dead] = 1.0 / n_frames
        gmm = DiagonalGmm(weights / weights.sum(), means, variances)
    trace.append(float(gmm.frame_loglik(x).mean()))
    gmm.llk_trace = trace
    return gmm


def map_adapt(ubm: DiagonalGmm, enrollment, cfg: MapConfig = MapConfig()) -> DiagonalGmm:
    """Iterated mean-only MAP; each pass uses the previous iterate as prior."""
    x = pool(enrollment) if isinstance(enrollment, (list, tuple)) else as_frames(enrollment)
    if x.shape[0] == 0:
        raise DataError("empty enrollment data")
    if x.shape[1] != ubm.dim:
        raise DataError(f"enrollment dim {x.shape[1]} != UBM dim {ubm.dim}")
    r = cfg.relevance_factor
    model = DiagonalGmm(ubm.weights, ubm.means.copy(), ubm.variances)
    for _ in range(cfg.iterations):
        n, f, _, _ = _accumulate(model, x, second_order=False)
        ex = f / np.maximum(n, 1e-300)[:, None]
        coef = (n / (n + r))[:, None]
        means = coef * ex + (1.0 - coef) * model.means
        model = DiagonalGmm(ubm.weights, means, ubm.variances)
    return model


def score_llr(test, model: DiagonalGmm, ubm: DiagonalGmm) -> float:
    """Frame-averaged log-likelihood ratio between the speaker model and the UBM."""
    x = as_frames(test)
    if model.means.shape != ubm.means.shape or x.shape[1] != ubm.dim:
        raise DataError("dimension mismatch between test frames, model and UBM")
    if x.shape[0] == 0:
        raise DataError("empty test utterance")
    return float(np.mean(model.frame_loglik(x) - ubm.frame_loglik(x)))


def score_llr_many(test, model_means: np.ndarray, ubm: DiagonalGmm) -> np.ndarray:
    """LLR of one test utterance against M mean-adapted models (M, K, D) sharing
    the UBM's weights and variances. Same value as score_llr per model."""
    x = as_frames(test)
    m, k, d = model_means.shape
    ivar = 1.0 / ubm.variances
    base = np.log(ubm.weights) - 0.5 * (d * LOG_2PI + np.log(ubm.variances).sum(1))
    quad = -0.5 * (x ** 2) @ ivar.T  # N x K
    lin = x @ (model_means * ivar).reshape(m * k, d).T  # N x MK
    bias = base - 0.5 * (model_means ** 2 * ivar).sum(2)  # M x K
    lc = lin.reshape(-1, m, k) + quad[:, None, :] + bias[None]
    model_ll = logsumexp(lc, axis=2).mean(0)
    return model_ll - ubm.frame_loglik(x).mean()
