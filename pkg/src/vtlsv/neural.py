"""Bottleneck feature networks written directly in numpy.

Two networks are supported:

* a sigmoid MLP trained to classify speakers from an 11-frame context window
  (speaker-discriminant bottleneck, tapped at hidden layer 4);
* a 3-layer GRU encoder trained with autoregressive predictive coding: predict
  frame t+n from frames <= t under an L1 loss (tapped at the last GRU layer).

Tap activations are projected to 57 dimensions with PCA.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, log_softmax

from . import storage
from .errors import DataError
from .frontend import FeatureMatrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    # speaker-discriminant MLP
    mlp_hidden: int = 1024
    mlp_layers: int = 7  # weight layers, the last one is the softmax output
    context: int = 5
    mlp_epochs: int = 30
    mlp_lr: tuple = (0.8, 0.08)
    mlp_batch: tuple = (256, 512, 1024)
    # APC encoder
    gru_hidden: int = 512
    gru_layers: int = 3
    apc_shift: int = 5
    apc_epochs: int = 30
    apc_lr: float = 0.001
    apc_batch: int = 32
    apc_crop: int = 200
    grad_clip: float | None = None

    def __post_init__(self):
        if self.apc_shift < 1:
            raise DataError("APC shift n must be >= 1")
        if self.apc_lr <= 0 or min(self.mlp_lr) <= 0:
            raise DataError("learning rates must be positive")


def _frames(x) -> np.ndarray:
    if isinstance(x, FeatureMatrix):
        return x.values.T
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# MLP


@dataclass
class MlpParams:
    weights: list  # (in, out) matrices
    biases: list
    loss_trace: list = field(default_factory=list)

    @property
    def n_hidden(self) -> int:
        return len(self.weights) - 1

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         list(self.loss_trace))


def init_mlp(sizes, seed: int = 0) -> MlpParams:
    """Glorot-uniform hidden weights scaled by 4 for sigmoid units, zero biases;
    sizes = [input, hidden..., output].

    The softmax layer starts at zero so the initial posterior is uniform."""
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-2], sizes[1:-1]):
        lim = 4.0 * math.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-lim, lim, (fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    ws.append(np.zeros((sizes[-2], sizes[-1])))
    bs.append(np.zeros(sizes[-1]))
    return MlpParams(ws, bs)


def mlp_forward(params: MlpParams, x: np.ndarray):
    """Returns (hidden activations per layer, softmax posteriors)."""
    x = np.atleast_2d(x)
    if x.shape[1] != params.weights[0].shape[0]:
        raise DataError(f"input dim {x.shape[1]} != network input {params.weights[0].shape[0]}")
    acts = []
    h = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = expit(h @ w + b)
        acts.append(h)
    logits = h @ params.weights[-1] + params.biases[-1]
    return acts, np.exp(log_softmax(logits, axis=1))


def mlp_loss_grad(params: MlpParams, x: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradients (lists matching weights/biases)."""
    acts, _ = mlp_forward(params, x)
    h_top = acts[-1] if acts else x
    logits = h_top @ params.weights[-1] + params.biases[-1]
    logp = log_softmax(logits, axis=1)
    m = x.shape[0]
    loss = -float(logp[np.arange(m), labels].mean())
    delta = np.exp(logp)
    delta[np.arange(m), labels] -= 1.0
    delta /= m
    inputs = [x] + acts
    gw = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        gw[i] = inputs[i].T @ delta
        gb[i] = delta.sum(0)
        if i > 0:
            a = inputs[i]
            delta = (delta @ params.weights[i].T) * a * (1.0 - a)
    return loss, gw, gb


def context_stack(frames: np.ndarray, context: int = 5) -> np.ndarray:
    """(T, D) -> (T, (2c+1)D) with replicated edge frames."""
    t = frames.shape[0]
    padded = np.pad(frames, ((context, context), (0, 0)), mode="edge")
    return np.hstack([padded[i:i + t] for i in range(2 * context + 1)])


def mlp_schedule(cfg: TrainConfig, epoch: int):
    """Learning rate (log-linear) and batch size (stepped) for an epoch."""
    e = cfg.mlp_epochs
    lr0, lr1 = cfg.mlp_lr
    frac = epoch / (e - 1) if e > 1 else 0.0
    lr = lr0 * (lr1 / lr0) ** frac
    steps = len(cfg.mlp_batch)
    batch = cfg.mlp_batch[min(steps - 1, epoch * steps // max(e, 1))]
    return lr, batch


def train_spk_bn(features, labels, cfg: TrainConfig = TrainConfig()) -> MlpParams:
    """Minibatch SGD on frame-level speaker cross-entropy.

    `features` is a list of per-utterance frame arrays (or FeatureMatrix),
    `labels` the speaker label of each utterance."""
    names = sorted(set(labels))
    if len(names) < 2:
        raise DataError("speaker-discriminant training needs at least 2 speakers")
    index = {n: i for i, n in enumerate(names)}
    xs, ys = [], []
    for f, lab in zip(features, labels):
        fr = _frames(f)
        xs.append(context_stack(fr, cfg.context))
        ys.append(np.full(fr.shape[0], index[lab]))
    x = np.vstack(xs)
    y = np.concatenate(ys)
    sizes = [x.shape[1]] + [cfg.mlp_hidden] * (cfg.mlp_layers - 1) + [len(names)]
    params = init_mlp(sizes, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    for epoch in range(cfg.mlp_epochs):
        lr, batch = mlp_schedule(cfg, epoch)
        order = rng.permutation(x.shape[0])
        total = 0.0
        for start in range(0, x.shape[0], batch):
            idx = order[start:start + batch]
            loss, gw, gb = mlp_loss_grad(params, x[idx], y[idx])
            _clip(gw + gb, cfg.grad_clip)
            for i in range(len(params.weights)):
                params.weights[i] -= lr * gw[i]
                params.biases[i] -= lr * gb[i]
            total += loss * idx.size
        params.loss_trace.append(total / x.shape[0])
        log.debug("spk-bn epoch %d lr %.4f batch %d loss %.4f", epoch, lr, batch, params.loss_trace[-1])
    return params


def _clip(grads, max_norm):
    if max_norm is None:
        return
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm


# ---------------------------------------------------------------------------
# GRU / APC

GATES = ("z", "r", "h")


@dataclass
class GruParams:
    # per layer: {"Wz","Wr","Wh": (in, H), "Uz","Ur","Uh": (H, H), "bz","br","bh": (H,)}
    layers: list
    head_w: np.ndarray
    head_b: np.ndarray
    loss_trace: list = field(default_factory=list)

    @property
    def hidden(self) -> int:
        return self.head_w.shape[0]

    def arrays(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.items():
                out[f"l{i}.{k}"] = v
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def copy(self) -> "GruParams":
        return GruParams([{k: v.copy() for k, v in l.items()} for l in self.layers],
                         self.head_w.copy(), self.head_b.copy(), list(self.loss_trace))


def init_gru(input_dim: int, hidden: int, n_layers: int = 3, seed: int = 0) -> GruParams:
    rng = np.random.default_rng(seed)
    lim = 1.0 / math.sqrt(hidden)
    layers = []
    d = input_dim
    for _ in range(n_layers):
        layer = {}
        for g in GATES:
            layer["W" + g] = rng.uniform(-lim, lim, (d, hidden))
            layer["U" + g] = rng.uniform(-lim, lim, (hidden, hidden))
            layer["b" + g] = np.zeros(hidden)
        layers.append(layer)
        d = hidden
    return GruParams(layers, rng.uniform(-lim, lim, (hidden, input_dim)), np.zeros(input_dim))


def _gru_layer_forward(p: dict, x: np.ndarray):
    """x: (B, T, in). Returns hidden states (B, T, H) and a cache for backprop."""
    b, t, _ = x.shape
    hdim = p["Uz"].shape[0]
    xz = x @ p["Wz"] + p["bz"]
    xr = x @ p["Wr"] + p["br"]
    xh = x @ p["Wh"] + p["bh"]
    hs = np.zeros((b, t, hdim))
    zs, rs, cs = np.zeros_like(hs), np.zeros_like(hs), np.zeros_like(hs)
    h = np.zeros((b, hdim))
    for i in range(t):
        z = expit(xz[:, i] + h @ p["Uz"])
        r = expit(xr[:, i] + h @ p["Ur"])
        c = np.tanh(xh[:, i] + (r * h) @ p["Uh"])
        h = (1.0 - z) * h + z * c
        hs[:, i], zs[:, i], rs[:, i], cs[:, i] = h, z, r, c
    return hs, (x, hs, zs, rs, cs)


def _gru_layer_backward(p: dict, cache, dh_out: np.ndarray):
    """Backprop through time; dh_out is dLoss/dh_t from above. Returns (dx, grads)."""
    x, hs, zs, rs, cs = cache
    b, t, hdim = hs.shape
    g = {k: np.zeros_like(v) for k, v in p.items()}
    dx_z = np.zeros((b, t, hdim))
    dx_r = np.zeros_like(dx_z)
    dx_h = np.zeros_like(dx_z)
    dh_next = np.zeros((b, hdim))
    for i in range(t - 1, -1, -1):
        h_prev = hs[:, i - 1] if i > 0 else np.zeros((b, hdim))
        z, r, c = zs[:, i], rs[:, i], cs[:, i]
        dh = dh_out[:, i] + dh_next
        dz = dh * (c - h_prev)
        dc = dh * z
        dprev = dh * (1.0 - z)
        da_h = dc * (1.0 - c * c)
        g["Uh"] += (r * h_prev).T @ da_h
        drh = da_h @ p["Uh"].T
        dr = drh * h_prev
        dprev += drh * r
        da_z = dz * z * (1.0 - z)
        da_r = dr * r * (1.0 - r)
        g["Uz"] += h_prev.T @ da_z
        g["Ur"] += h_prev.T @ da_r
        dprev += da_z @ p["Uz"].T + da_r @ p["Ur"].T
        dx_z[:, i], dx_r[:, i], dx_h[:, i] = da_z, da_r, da_h
        dh_next = dprev
    flat_x = x.reshape(b * t, -1)
    dx = np.zeros_like(x)
    for gate, da in (("z", dx_z), ("r", dx_r), ("h", dx_h)):
        da2 = da.reshape(b * t, hdim)
        g["W" + gate] += flat_x.T @ da2
        g["b" + gate] += da2.sum(0)
        dx += da @ p["W" + gate].T
    return dx, g


def gru_forward(params: GruParams, x: np.ndarray):
    """x: (B, T, D) or (T, D). Returns (per-layer ReLU outputs, predictions, caches)."""
    if x.ndim == 2:
        x = x[None]
    if x.shape[2] != params.layers[0]["Wz"].shape[0]:
        raise DataError("input dim does not match the GRU")
    outs, caches = [], []
    inp = x
    for p in params.layers:
        hs, cache = _gru_layer_forward(p, inp)
        inp = np.maximum(hs, 0.0)
        outs.append(inp)
        caches.append(cache)
    pred = inp @ params.head_w + params.head_b
    return outs, pred, caches


def apc_targets(x: np.ndarray, lengths, shift: int):
    """Targets x_{i+n} and a validity mask over prediction positions i."""
    b, t, d = x.shape
    tgt = np.zeros_like(x)
    tgt[:, :t - shift] = x[:, shift:]
    mask = np.zeros((b, t))
    for j, n in enumerate(lengths):
        mask[j, :max(n - shift, 0)] = 1.0
    return tgt, mask


def apc_loss(params: GruParams, x: np.ndarray, lengths=None, shift: int = 5) -> float:
    """Summed L1 error between predictions and inputs shifted by `shift` frames."""
    if x.ndim == 2:
        x = x[None]
    lengths = [x.shape[1]] * x.shape[0] if lengths is None else lengths
    _, pred, _ = gru_forward(params, x)
    tgt, mask = apc_targets(x, lengths, shift)
    return float(np.sum(np.abs(pred - tgt)[mask > 0]))


def apc_loss_grad(params: GruParams, x: np.ndarray, lengths, shift: int = 5, scale: float = 1.0):
    """Summed L1 loss times `scale`, and gradients (dict like GruParams.arrays())."""
    outs, pred, caches = gru_forward(params, x)
    tgt, mask = apc_targets(x, lengths, shift)
    err = (pred - tgt) * mask[:, :, None]
    loss = scale * float(np.sum(np.abs(err)[mask > 0]))
    dpred = scale * np.sign(err)
    top = outs[-1]
    b, t, hdim = top.shape
    grads = {"head.w": top.reshape(b * t, hdim).T @ dpred.reshape(b * t, -1),
             "head.b": dpred.sum((0, 1))}
    dout = dpred @ params.head_w.T
    for li in range(len(params.layers) - 1, -1, -1):
        cache = caches[li]
        dh = dout * (cache[1] > 0)
        dout, g = _gru_layer_backward(params.layers[li], cache, dh)
        for k, v in g.items():
            grads[f"l{li}.{k}"] = v
    return loss, grads


def _crop_batch(seqs, idx, crop: int, rng):
    lengths = [min(seqs[i].shape[0], crop) for i in idx]
    t = max(lengths)
    d = seqs[idx[0]].shape[1]
    x = np.zeros((len(idx), t, d))
    for j, i in enumerate(idx):
        s = seqs[i]
        start = rng.integers(0, s.shape[0] - lengths[j] + 1)
        x[j, :lengths[j]] = s[start:start + lengths[j]]
    return x, lengths


def train_apc(features, cfg: TrainConfig = TrainConfig()) -> GruParams:
    """SGD on the APC L1 objective over fixed-length crops (zero-padded, masked).

    The per-batch loss is normalized by the number of valid target frames;
    `loss_trace` holds the per-epoch mean L1 error per target frame."""
    seqs = [_frames(f) for f in features]
    n = cfg.apc_shift
    seqs = [s for s in seqs if s.shape[0] > n]
    if not seqs:
        raise DataError(f"all utterances are shorter than n+1 = {n + 1} frames")
    crop = max(cfg.apc_crop, n + 1)
    params = init_gru(seqs[0].shape[1], cfg.gru_hidden, cfg.gru_layers, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    arrays = params.arrays()
    for epoch in range(cfg.apc_epochs):
        order = rng.permutation(len(seqs))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.apc_batch):
            idx = order[start:start + cfg.apc_batch]
            x, lengths = _crop_batch(seqs, idx, crop, rng)
            valid = sum(max(l - n, 0) for l in lengths)
            loss, grads = apc_loss_grad(params, x, lengths, n, scale=1.0 / valid)
            _clip(list(grads.values()), cfg.grad_clip)
            for k, g in grads.items():
                arrays[k] -= cfg.apc_lr * g
            total += loss * valid
            count += valid
        params.loss_trace.append(total / count)
        log.debug("apc epoch %d loss %.4f", epoch, params.loss_trace[-1])
    return params


# ---------------------------------------------------------------------------
# PCA and bottleneck extraction


@dataclass
class PcaProjection:
    mean: np.ndarray
    basis: np.ndarray  # (in_dim, out_dim), orthonormal columns
    explained: np.ndarray

    def project(self, acts: np.ndarray) -> np.ndarray:
        return (acts - self.mean) @ self.basis


def fit_pca(activations, out_dim: int = 57) -> PcaProjection:
    x = np.asarray(activations, dtype=np.float64)
    if x.shape[0] <= out_dim:
        raise DataError(f"need more than {out_dim} frames to fit PCA, got {x.shape[0]}")
    mean = x.mean(0)
    cov = np.cov(x - mean, rowvar=False, bias=True)
    vals, vecs = np.linalg.eigh(np.atleast_2d(cov))
    vals, vecs = vals[::-1], vecs[:, ::-1]
    rank = int(np.sum(vals > max(vals[0], 1e-300) * 1e-10))
    if rank < out_dim:
        raise DataError(f"activation covariance has rank {rank} < requested {out_dim}; "
                        f"at most {rank} components are achievable")
    basis = vecs[:, :out_dim].copy()
    pivot = np.argmax(np.abs(basis), axis=0)
    basis *= np.sign(basis[pivot, np.arange(out_dim)])
    total = np.sum(np.maximum(vals, 0.0))
    return PcaProjection(mean, basis, vals[:out_dim] / total)


def tap_activations(frames: np.ndarray, network, tap: int, context: int = 5) -> np.ndarray:
    """(T, width) activations of hidden layer `tap` (1-based)."""
    if isinstance(network, MlpParams):
        if not 1 <= tap <= network.n_hidden:
            raise DataError(f"tap {tap} outside hidden layers 1..{network.n_hidden}")
        acts, _ = mlp_forward(network, context_stack(frames, context))
        return acts[tap - 1]
    if isinstance(network, GruParams):
        if not 1 <= tap <= len(network.layers):
            raise DataError(f"tap {tap} outside GRU layers 1..{len(network.layers)}")
        outs, _, _ = gru_forward(network, frames)
        return outs[tap - 1][0]
    raise DataError(f"unsupported network type {type(network).__name__}")


def extract_bn(feature, network, tap: int, pca: PcaProjection, context: int = 5) -> FeatureMatrix:
    frames = _frames(feature)
    acts = tap_activations(frames, network, tap, context)
    if acts.shape[1] != pca.mean.size:
        raise DataError(f"tap width {acts.shape[1]} != PCA input dim {pca.mean.size}")
    out = pca.project(acts).T
    uid = feature.utterance_id if isinstance(feature, FeatureMatrix) else ""
    alpha = feature.alpha if isinstance(feature, FeatureMatrix) else 1.0
    return FeatureMatrix(np.ascontiguousarray(out), uid, alpha)


# ---------------------------------------------------------------------------
# persistence


def save_network(path, network, cfg: TrainConfig | None = None) -> None:
    meta = {"config": asdict(cfg) if cfg else {}}
    if isinstance(network, MlpParams):
        arrays = {}
        for i, (w, b) in enumerate(zip(network.weights, network.biases)):
            arrays[f"w{i}"], arrays[f"b{i}"] = w, b
        meta.update(kind="mlp", layers=len(network.weights))
    else:
        arrays = network.arrays()
        meta.update(kind="gru", layers=len(network.layers))
    storage.save_arrays(path, b"VSVN", arrays, meta)


def load_network(path):
    arrays, meta = storage.load_arrays(path, b"VSVN")
    if meta["kind"] == "mlp":
        n = meta["layers"]
        return MlpParams([arrays[f"w{i}"] for i in range(n)], [arrays[f"b{i}"] for i in range(n)])
    layers = [{k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith(f"l{i}.")}
              for i in range(meta["layers"])]
    return GruParams(layers, arrays["head.w"], arrays["head.b"])


def save_pca(path, pca: PcaProjection) -> None:
    storage.save_arrays(path, b"VSVN", {"mean": pca.mean, "basis": pca.basis,
                                        "explained": pca.explained}, {"kind": "pca"})


def load_pca(path) -> PcaProjection:
    arrays, _ = storage.load_arrays(path, b"VSVN")
    return PcaProjection(arrays["mean"], arrays["basis"], arrays["explained"])
