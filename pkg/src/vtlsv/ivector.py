"""Total-variability i-vectors, spherical normalization and two-covariance PLDA."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh

from . import storage
from .errors import DataError, NumericError
from .gmm import DiagonalGmm, as_frames

log = logging.getLogger(__name__)


@dataclass
class BaumWelchStats:
    n: np.ndarray  # (K,)
    f: np.ndarray  # (K, D), centered on the UBM means

    @property
    def n_frames(self) -> float:
        return float(self.n.sum())


def accumulate_stats(feat, ubm: DiagonalGmm) -> BaumWelchStats:
    x = as_frames(feat)
    if x.shape[0] == 0:
        raise DataError("empty feature matrix")
    if x.shape[1] != ubm.dim:
        raise DataError(f"feature dim {x.shape[1]} != UBM dim {ubm.dim}")
    gamma, _ = ubm.posteriors(x)
    n = gamma.sum(0)
    f = gamma.T @ x - n[:, None] * ubm.means
    return BaumWelchStats(n, f)


@dataclass
class TotalVariabilityModel:
    m: np.ndarray  # (K*D,)
    t_matrix: np.ndarray  # (K*D, R)
    sigma: np.ndarray  # (K, D)
    objective_trace: list = field(default_factory=list)

    @property
    def rank(self) -> int:
        return self.t_matrix.shape[1]

    def _whitened(self):
        k, d = self.sigma.shape
        return self.t_matrix.reshape(k, d, -1) / np.sqrt(self.sigma)[:, :, None]

    def save(self, path) -> None:
        storage.save_arrays(path, b"VSVT", {"m": self.m, "T": self.t_matrix, "sigma": self.sigma})

    @classmethod
    def load(cls, path) -> "TotalVariabilityModel":
        arrays, _ = storage.load_arrays(path, b"VSVT")
        return cls(arrays["m"], arrays["T"], arrays["sigma"])


def _posterior(tw: np.ndarray, tt: np.ndarray, stats: BaumWelchStats, sigma: np.ndarray):
    """Posterior precision L, linear term b and mean w for one utterance.

    tw: whitened T (K, D, R); tt: per-mixture tw_k^T tw_k (K, R, R)."""
    r = tw.shape[2]
    prec = np.eye(r) + np.tensordot(stats.n, tt, axes=1)
    fw = stats.f / np.sqrt(sigma)
    b = np.einsum("kdr,kd->r", tw, fw)
    c = cho_factor(prec)
    return prec, b, cho_solve(c, b), c


def extract_ivector(stats: BaumWelchStats, tv: TotalVariabilityModel) -> np.ndarray:
    """w = (I + T' S^-1 N T)^-1 T' S^-1 F via a Cholesky solve."""
    k, d = tv.sigma.shape
    if stats.f.shape != (k, d):
        raise DataError(f"stats shape {stats.f.shape} != model ({k}, {d})")
    if not (np.all(np.isfinite(stats.n)) and np.all(np.isfinite(stats.f))):
        raise DataError("non-finite Baum-Welch statistics")
    tw = tv._whitened()
    tt = np.einsum("kdr,kds->krs", tw, tw)
    return _posterior(tw, tt, stats, tv.sigma)[2]


def train_tmatrix(stats, ubm: DiagonalGmm, rank: int = 400, iterations: int = 10,
                  seed: int = 0) -> TotalVariabilityModel:
    """EM estimation of the total-variability matrix.

    The objective recorded per iteration is the stats log-likelihood up to a
    T-independent constant: sum over utterances of -1/2 log|L| + 1/2 b' L^-1 b.
    """
    if rank < 1:
        raise DataError("rank must be >= 1")
    k, d = ubm.means.shape
    if rank > k * d:
        raise DataError(f"rank {rank} exceeds supervector size {k * d}")
    if len(stats) < rank:
        log.warning("only %d utterances for rank %d", len(stats), rank)
    rng = np.random.default_rng(seed)
    sigma = ubm.variances
    t_raw = rng.standard_normal((k * d, rank)) * 0.01 * np.sqrt(sigma.mean())
    tw = t_raw.reshape(k, d, rank) / np.sqrt(sigma)[:, :, None]
    trace = []

    def e_step(tw):
        tt = np.einsum("kdr,kds->krs", tw, tw)
        acc_c = np.zeros((k, d, rank))
        acc_a = np.zeros((k, rank, rank))
        obj = 0.0
        for st in stats:
            prec, b, w, c = _posterior(tw, tt, st, sigma)
            cov = cho_solve(c, np.eye(rank))
            obj += -np.sum(np.log(np.diag(c[0]))) + 0.5 * b @ w
            fw = st.f / np.sqrt(sigma)
            acc_c += fw[:, :, None] * w[None, None, :]
            acc_a += st.n[:, None, None] * (cov + np.outer(w, w))[None]
        return obj, acc_c, acc_a

    for _ in range(iterations):
        obj, acc_c, acc_a = e_step(tw)
        trace.append(obj)
        new = np.empty_like(tw)
        for j in range(k):
            a = acc_a[j]
            try:
                cf = cho_factor(a)
            except LinAlgError:
                ridge = 1e-6 * max(np.trace(a), 1e-12)
                warnings.warn(f"mixture {j}: singular M-step system, ridge {ridge:.3g}", RuntimeWarning)
                cf = cho_factor(a + ridge * np.eye(rank))
            new[j] = cho_solve(cf, acc_c[j].T).T
        tw = new
    trace.append(e_step(tw)[0])
    t_matrix = (tw * np.sqrt(sigma)[:, :, None]).reshape(k * d, rank)
    return TotalVariabilityModel(ubm.means.reshape(-1).copy(), t_matrix, sigma.copy(), trace)


# ---------------------------------------------------------------------------
# spherical normalization


@dataclass
class SphericalNorm:
    """Sequence of (mean, whitening matrix) steps, each followed by length norm."""
    steps: list = field(default_factory=list)

    def apply(self, vectors) -> np.ndarray:
        x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        for mean, white in self.steps:
            x = (x - mean) @ white.T
            x = x / np.linalg.norm(x, axis=1, keepdims=True)
        return x

    def save(self, path) -> None:
        arrays = {}
        for i, (mean, white) in enumerate(self.steps):
            arrays[f"mean{i}"] = mean
            arrays[f"white{i}"] = white
        storage.save_arrays(path, b"VSVP", arrays, {"kind": "spherical-norm", "steps": len(self.steps)})

    @classmethod
    def load(cls, path) -> "SphericalNorm":
        arrays, meta = storage.load_arrays(path, b"VSVP")
        return cls([(arrays[f"mean{i}"], arrays[f"white{i}"]) for i in range(meta["steps"])])


def whitening(x: np.ndarray, floor: float = 1e-8):
    mean = x.mean(0)
    cov = np.cov(x - mean, rowvar=False, bias=True)
    cov = np.atleast_2d(cov)
    vals, vecs = eigh(cov)
    if np.any(vals < floor):
        warnings.warn(f"rank-deficient covariance: {int(np.sum(vals < floor))} eigenvalues floored",
                      RuntimeWarning)
        vals = np.maximum(vals, floor)
    return mean, (vecs / np.sqrt(vals)) @ vecs.T


def spherical_norm(vectors, fit_set, iterations: int = 2):
    """Iterated whitening (estimated on fit_set) plus length normalization.

    Returns the normalized `vectors` and the fitted SphericalNorm."""
    fit = np.atleast_2d(np.asarray(fit_set, dtype=np.float64))
    if fit.shape[0] < 2:
        raise DataError("spherical normalization needs at least 2 fit vectors")
    norm = SphericalNorm()
    for _ in range(iterations):
        mean, white = whitening(fit)
        step = SphericalNorm([(mean, white)])
        fit = step.apply(fit)
        norm.steps.append((mean, white))
    return norm.apply(vectors), norm


def enroll_speaker(ivectors) -> np.ndarray:
    x = np.atleast_2d(np.asarray(ivectors, dtype=np.float64))
    if x.shape[0] == 0 or x.size == 0:
        raise DataError("empty enrollment set")
    mean = x.mean(0)
    nrm = np.linalg.norm(mean)
    if nrm < 1e-8:
        raise DataError("degenerate enrollment: session i-vectors average to zero")
    return mean / nrm


# ---------------------------------------------------------------------------
# PLDA


def _gauss_logpdf(x, mean, cov) -> np.ndarray:
    x = np.atleast_2d(x) - mean
    c = cho_factor(cov)
    logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
    maha = np.sum(x * cho_solve(c, x.T).T, axis=1)
    return -0.5 * (x.shape[1] * np.log(2 * np.pi) + logdet + maha)


@dataclass
class PldaModel:
    mu: np.ndarray
    between: np.ndarray
    within: np.ndarray
    objective_trace: list = field(default_factory=list)

    def __post_init__(self):
        self._prepare()

    def _prepare(self):
        b, w = self.between, self.within
        r = b.shape[0]
        tot = b + w
        joint = np.block([[tot, b], [b, tot]])
        jinv = np.linalg.inv(joint)
        tinv = np.linalg.inv(tot)
        self._q = tinv - jinv[:r, :r]
        self._p = jinv[:r, r:]
        _, ld_joint = np.linalg.slogdet(joint)
        _, ld_tot = np.linalg.slogdet(tot)
        self._const = -0.5 * ld_joint + ld_tot

    def score(self, enroll, test) -> float:
        return float(self.score_many(np.atleast_2d(enroll), np.atleast_2d(test))[0, 0])

    def score_many(self, enroll, test) -> np.ndarray:
        """LLR matrix (n_enroll, n_test) of same-class vs different-class hypotheses."""
        a = np.atleast_2d(np.asarray(enroll, dtype=np.float64))
        t = np.atleast_2d(np.asarray(test, dtype=np.float64))
        if a.shape[1] != self.mu.size or t.shape[1] != self.mu.size:
            raise DataError("vector dimension does not match the PLDA model")
        a = a - self.mu
        t = t - self.mu
        qa = 0.5 * np.sum(a @ self._q * a, axis=1)
        qt = 0.5 * np.sum(t @ self._q * t, axis=1)
        return qa[:, None] + qt[None, :] - a @ self._p @ t.T + self._const

    def save(self, path) -> None:
        storage.save_arrays(path, b"VSVP", {"mu": self.mu, "B": self.between, "W": self.within},
                            {"kind": "plda"})

    @classmethod
    def load(cls, path) -> "PldaModel":
        arrays, _ = storage.load_arrays(path, b"VSVP")
        return cls(arrays["mu"], arrays["B"], arrays["W"])


def score_plda(enroll, test, plda: PldaModel) -> float:
    return plda.score(enroll, test)


def _group(x: np.ndarray, labels):
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    return [x[labels == c] for c in classes]


def plda_loglik(groups, mu, between, within) -> float:
    """Marginal log-likelihood of class-grouped data under the two-covariance model."""
    r = mu.size
    cw = cho_factor(within)
    ld_w = 2.0 * np.sum(np.log(np.diag(cw[0])))
    total = 0.0
    for g in groups:
        n = g.shape[0]
        mean = g.mean(0)
        dev = g - mean
        scatter = np.sum(dev * cho_solve(cw, dev.T).T)
        total += (-(n - 1) * r / 2.0 * np.log(2 * np.pi) - n / 2.0 * ld_w
                  + 0.5 * (ld_w - r * np.log(n)) - 0.5 * scatter)
        total += _gauss_logpdf(mean, mu, between + within / n)[0]
    return float(total)


def train_plda(ivectors, labels, iterations: int = 10) -> PldaModel:
    """Two-covariance PLDA (y ~ N(mu, B), x ~ N(y, W)) fitted by EM."""
    x = np.atleast_2d(np.asarray(ivectors, dtype=np.float64))
    groups = _group(x, labels)
    if len(groups) < 2:
        raise DataError("PLDA needs at least 2 classes")
    if all(g.shape[0] < 2 for g in groups):
        raise DataError("every class has a single sample: between-class covariance unidentifiable")
    r = x.shape[1]
    n_total = x.shape[0]
    mu = x.mean(0)
    means = np.array([g.mean(0) for g in groups])
    within = sum((g - g.mean(0)).T @ (g - g.mean(0)) for g in groups) / n_total
    between = np.cov(means, rowvar=False, bias=True).reshape(r, r)
    ridge = 1e-6 * max(np.trace(within) / r, 1e-12) * np.eye(r)
    within, between = within + ridge, between + ridge
    trace = []
    for _ in range(iterations):
        trace.append(plda_loglik(groups, mu, between, within))
        binv = np.linalg.inv(between)
        winv = np.linalg.inv(within)
        ys, covs = [], []
        w_acc = np.zeros((r, r))
        for g in groups:
            n = g.shape[0]
            prec = binv + n * winv
            cov = np.linalg.inv(prec)
            y = cov @ (binv @ mu + winv @ g.sum(0))
            ys.append(y)
            covs.append(cov)
            dev = g - y
            w_acc += dev.T @ dev + n * cov
        ys = np.array(ys)
        mu = ys.mean(0)
        dy = ys - mu
        between = (dy.T @ dy + sum(covs)) / len(groups)
        within = w_acc / n_total
        between = 0.5 * (between + between.T)
        within = 0.5 * (within + within.T)
        if not (np.all(np.isfinite(between)) and np.all(np.isfinite(within))):
            raise NumericError("PLDA EM diverged")
    trace.append(plda_loglik(groups, mu, between, within))
    return PldaModel(mu, between, within, trace)
