"""VTL-warped MFCC front end.

Per frame: pre-emphasis, Hamming window, power spectrum, frequency-axis warp,
mel filterbank, log, DCT (c1..c19). The static trajectories are RASTA
filtered, deltas and delta-deltas appended, low-energy frames dropped and the
survivors mean/variance normalized per utterance.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dct
from scipy.signal import lfilter

from .corpus import Utterance
from .errors import DataError

log = logging.getLogger(__name__)

ALPHA_GRID = tuple(round(0.80 + 0.02 * i, 2) for i in range(21))


def alpha_code(alpha: float) -> int:
    """Warp factor as integer hundredths (1.04 -> 104)."""
    return int(round(alpha * 100))


def check_alpha(alpha: float) -> float:
    a = round(float(alpha), 2)
    if a not in ALPHA_GRID or abs(a - alpha) > 1e-9:
        raise DataError(f"warp factor {alpha} is not on the 0.80..1.20 step 0.02 grid")
    return a


@dataclass(frozen=True)
class WarpConfig:
    alpha: float = 1.0
    f_max: float = 8000.0
    f0_boundary: float | None = None

    def __post_init__(self):
        if not 0.80 - 1e-12 <= self.alpha <= 1.20 + 1e-12:
            raise DataError(f"alpha {self.alpha} outside [0.80, 1.20]")
        if self.f0_boundary is None:
            object.__setattr__(self, "f0_boundary", 0.85 * self.f_max)
        if not 0.0 < self.f0_boundary < self.f_max:
            raise DataError("f0_boundary must lie in (0, f_max)")

    @property
    def boundary(self) -> float:
        """Breakpoint actually used. When alpha*f0 would reach f_max the upper
        segment would fold back, so the breakpoint drops to f0/alpha."""
        if self.alpha * self.f0_boundary >= self.f_max:
            return self.f0_boundary / self.alpha
        return self.f0_boundary


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    frame_length: float = 25.0
    frame_shift: float = 10.0
    n_fft: int = 512
    n_mel_filters: int = 26
    n_cepstra: int = 19
    pre_emphasis: float = 0.97
    delta_window: int = 2
    vad_drop_db: float = 30.0
    vad_percentile: float = 20.0
    # slack on the percentile test so near-stationary signals keep every frame
    vad_percentile_slack_db: float = 1.0

    def __post_init__(self):
        if self.frame_shift > self.frame_length:
            raise DataError("frame_shift must not exceed frame_length")
        if self.n_cepstra >= self.n_mel_filters:
            raise DataError("n_cepstra must be smaller than n_mel_filters")
        if self.n_fft < self.frame_samples or self.n_fft & (self.n_fft - 1):
            raise DataError("n_fft must be a power of two >= frame length in samples")

    @property
    def frame_samples(self) -> int:
        return int(round(self.frame_length * self.sample_rate / 1000.0))

    @property
    def shift_samples(self) -> int:
        return int(round(self.frame_shift * self.sample_rate / 1000.0))


@dataclass
class FeatureMatrix:
    values: np.ndarray  # D x T
    utterance_id: str = ""
    alpha: float = 1.0
    warnings: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# warping


def warp_frequency(f, cfg: WarpConfig):
    """Piecewise-linear warp: alpha*f up to the boundary, then a line to f_max."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0) or np.any(f > cfg.f_max):
        raise DataError(f"frequency outside [0, {cfg.f_max}]")
    a, f0, fm = cfg.alpha, cfg.boundary, cfg.f_max
    upper = (fm - a * f0) / (fm - f0) * (f - f0) + a * f0
    out = np.where(f <= f0, a * f, upper)
    return float(out) if out.ndim == 0 else out


def warp_spectrum(power: np.ndarray, cfg: WarpConfig) -> np.ndarray:
    """Resample spectra (last axis: uniform bins over [0, f_max]) so that
    output bin f holds the input value at warp_frequency(f)."""
    if cfg.alpha == 1.0:
        return power
    n_bins = power.shape[-1]
    freqs = np.linspace(0.0, cfg.f_max, n_bins)
    src = warp_frequency(freqs, cfg) * (n_bins - 1) / cfg.f_max
    lo = np.clip(np.floor(src).astype(int), 0, n_bins - 2)
    frac = src - lo
    return power[..., lo] * (1.0 - frac) + power[..., lo + 1] * frac


# ---------------------------------------------------------------------------
# static MFCC


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_filters: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters (n_filters x n_fft//2+1), mel-spaced over [0, Nyquist]."""
    fmax = sample_rate / 2.0
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(fmax), n_filters + 2))
    freqs = np.linspace(0.0, fmax, n_fft // 2 + 1)
    fb = np.zeros((n_filters, freqs.size))
    for i in range(n_filters):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        rise = (freqs - lo) / (mid - lo)
        fall = (hi - freqs) / (hi - mid)
        fb[i] = np.maximum(0.0, np.minimum(rise, fall))
    return fb


def frame_count(n_samples: int, cfg: FrontendConfig) -> int:
    if n_samples < cfg.frame_samples:
        return 0
    return (n_samples - cfg.frame_samples) // cfg.shift_samples + 1


def frame_signal(x: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """Snip-edges framing: T x frame_samples."""
    n = frame_count(x.size, cfg)
    if n == 0:
        raise DataError(f"utterance of {x.size} samples is shorter than one frame")
    idx = np.arange(cfg.frame_samples)[None, :] + cfg.shift_samples * np.arange(n)[:, None]
    return x[idx]


def power_spectrum(utt: Utterance, cfg: FrontendConfig) -> np.ndarray:
    frames = frame_signal(utt.samples, cfg)
    emph = np.concatenate([frames[:, :1] * (1.0 - cfg.pre_emphasis),
                           frames[:, 1:] - cfg.pre_emphasis * frames[:, :-1]], axis=1)
    windowed = emph * np.hamming(cfg.frame_samples)
    return np.abs(np.fft.rfft(windowed, cfg.n_fft)) ** 2


def log_mel(power: np.ndarray, cfg: FrontendConfig, warp: WarpConfig | None) -> np.ndarray:
    """T x n_mel_filters log filterbank energies; warp=None skips warping."""
    if warp is not None:
        power = warp_spectrum(power, warp)
    fb = mel_filterbank(cfg.n_mel_filters, cfg.n_fft, cfg.sample_rate)
    return np.log(np.maximum(power @ fb.T, 1e-10))


def compute_static_mfcc(utt: Utterance, cfg: FrontendConfig, warp: WarpConfig | None) -> FeatureMatrix:
    """19 x T static cepstra (c0 excluded)."""
    if utt.sample_rate != cfg.sample_rate:
        raise DataError(f"sample rate {utt.sample_rate} != configured {cfg.sample_rate}")
    lm = log_mel(power_spectrum(utt, cfg), cfg, warp)
    cep = dct(lm, type=2, norm="ortho", axis=1)[:, 1:cfg.n_cepstra + 1]
    alpha = 1.0 if warp is None else warp.alpha
    return FeatureMatrix(np.ascontiguousarray(cep.T), utt.utterance_id, alpha)


# ---------------------------------------------------------------------------
# trajectory processing

RASTA_NUM = 0.1 * np.array([2.0, 1.0, 0.0, -1.0, -2.0])
RASTA_DEN = np.array([1.0, -0.98])


def rasta_numerator(x: np.ndarray) -> np.ndarray:
    """FIR part of RASTA along axis 1, zero initial state.

    Evaluated as 0.1 * (2 (x[t] - x[t-4]) + (x[t-1] - x[t-3])), the same taps
    as RASTA_NUM, so that a constant gives exactly 0 and a unit ramp exactly 1
    once the window is full.
    """
    t = x.shape[1]
    p = np.concatenate([np.zeros((x.shape[0], 4)), x], axis=1)
    return 0.1 * (2.0 * (p[:, 4:] - p[:, :t]) + (p[:, 3:3 + t] - p[:, 1:1 + t]))


def rasta_filter(feat: FeatureMatrix) -> FeatureMatrix:
    """Band-pass IIR along time for each coefficient, zero initial state."""
    if feat.n_frames < 5:
        raise DataError(f"RASTA needs at least 5 frames, got {feat.n_frames}")
    out = lfilter([1.0], RASTA_DEN, rasta_numerator(feat.values), axis=1)
    return FeatureMatrix(out, feat.utterance_id, feat.alpha, list(feat.warnings))


def deltas(x: np.ndarray, window: int = 2) -> np.ndarray:
    """Regression deltas along axis 1 with replicated edges."""
    t = x.shape[1]
    padded = np.pad(x, ((0, 0), (window, window)), mode="edge")
    denom = 2.0 * sum(k * k for k in range(1, window + 1))
    out = np.zeros_like(x, dtype=np.float64)
    for k in range(1, window + 1):
        out += k * (padded[:, window + k:window + k + t] - padded[:, window - k:window - k + t])
    return out / denom


def append_deltas(static: FeatureMatrix, window: int = 2) -> FeatureMatrix:
    if static.n_frames < 5:
        raise DataError(f"deltas need at least 5 frames, got {static.n_frames}")
    d1 = deltas(static.values, window)
    d2 = deltas(d1, window)
    return FeatureMatrix(np.vstack([static.values, d1, d2]), static.utterance_id,
                         static.alpha, list(static.warnings))


def frame_log_energy(utt: Utterance, cfg: FrontendConfig) -> np.ndarray:
    frames = frame_signal(utt.samples, cfg)
    return 10.0 * np.log10(np.sum(frames ** 2, axis=1) + 1e-12)


def energy_vad(utt: Utterance, cfg: FrontendConfig) -> np.ndarray:
    """Keep frames within `vad_drop_db` of the loudest frame and not below the
    utterance's 20th-percentile energy. At least one frame is always kept."""
    e = frame_log_energy(utt, cfg)
    pct = np.percentile(e, cfg.vad_percentile)
    mask = (e > e.max() - cfg.vad_drop_db) & (e >= pct - cfg.vad_percentile_slack_db)
    if not mask.any():
        mask[np.argmax(e)] = True
    return mask


# swappable detector: any callable (utt, cfg) -> bool mask
vad_select = energy_vad


def cmvn(feat: FeatureMatrix, mask: np.ndarray | None = None) -> FeatureMatrix:
    """Normalize selected frames to zero mean, unit variance; unselected frames are dropped."""
    mask = np.ones(feat.n_frames, bool) if mask is None else np.asarray(mask, bool)
    if mask.size != feat.n_frames:
        raise DataError(f"mask length {mask.size} != frame count {feat.n_frames}")
    x = feat.values[:, mask]
    if x.shape[1] < 2:
        raise DataError("CMVN needs at least 2 selected frames")
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    notes = list(feat.warnings)
    flat = var[:, 0] < 1e-10
    if flat.any():
        msg = f"{feat.utterance_id}: zero variance in dims {np.flatnonzero(flat).tolist()}, floored"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        var = np.maximum(var, 1e-10)
    return FeatureMatrix((x - mu) / np.sqrt(var), feat.utterance_id, feat.alpha, notes)


# ---------------------------------------------------------------------------
# full pipeline


def _finish(static: FeatureMatrix, mask, cfg: FrontendConfig) -> FeatureMatrix:
    return cmvn(append_deltas(rasta_filter(static), cfg.delta_window), mask)


def extract(utt: Utterance, cfg: FrontendConfig, alpha: float | None = 1.0,
            mask=None, vad=None) -> FeatureMatrix:
    """57 x T' features at one warp factor; alpha=None disables warping."""
    warp = None if alpha is None else WarpConfig(alpha, cfg.sample_rate / 2.0)
    if mask is None:
        mask = (vad or vad_select)(utt, cfg)
    return _finish(compute_static_mfcc(utt, cfg, warp), mask, cfg)


def extract_grid(utt: Utterance, cfg: FrontendConfig, alphas=ALPHA_GRID, vad=None) -> dict:
    """Features for every warp factor; one VAD mask from the unwarped signal is shared."""
    mask = (vad or vad_select)(utt, cfg)
    power = power_spectrum(utt, cfg)
    fb = mel_filterbank(cfg.n_mel_filters, cfg.n_fft, cfg.sample_rate)
    out = {}
    for a in alphas:
        a = check_alpha(a)
        warped = warp_spectrum(power, WarpConfig(a, cfg.sample_rate / 2.0))
        lm = np.log(np.maximum(warped @ fb.T, 1e-10))
        cep = dct(lm, type=2, norm="ortho", axis=1)[:, 1:cfg.n_cepstra + 1]
        static = FeatureMatrix(np.ascontiguousarray(cep.T), utt.utterance_id, a)
        out[a] = _finish(static, mask, cfg)
    return out
