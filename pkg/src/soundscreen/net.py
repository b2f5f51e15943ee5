"""Multi-modality convolutional screening network with hand-written gradients.

Each modality (breathing, cough, voice) has its own two-block convolutional
encoder producing a 16-dim embedding. The three embeddings are masked by
presence flags, concatenated with the flags themselves and scored by a
two-layer dense head ending in a sigmoid.

Activations are laid out channel-major, ``(channel, batch, time, mel)``, so
every convolution is one im2col matrix product over contiguous planes. All arithmetic runs in
float64; trained weights are rounded to float32 after every optimizer step.
"""

from __future__ import annotations

import csv
import io
import logging
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptySplit, NoModality, ShapeMismatch

log = logging.getLogger(__name__)

MODALITIES = ("breathing", "cough", "voice")
P_CLAMP = 1e-7

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class NetConfig:
    t_frames: int = 96
    n_mels: int = 64
    conv1_filters: int = 8
    conv2_filters: int = 16
    hidden: int = 64
    # Fixed mel-position input channel; lets the encoder tell frequency bands apart.
    coord_channel: bool = True

    @property
    def in_channels(self) -> int:
        return 2 if self.coord_channel else 1

    @property
    def embedding_dim(self) -> int:
        return self.conv2_filters

    @property
    def fused_dim(self) -> int:
        return len(MODALITIES) * (self.conv2_filters + 1)


def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for m in MODALITIES:
        shapes[f"{m}.conv1.weight"] = (cfg.conv1_filters, cfg.in_channels, 3, 3)
        shapes[f"{m}.conv1.bias"] = (cfg.conv1_filters,)
        shapes[f"{m}.conv2.weight"] = (cfg.conv2_filters, cfg.conv1_filters, 3, 3)
        shapes[f"{m}.conv2.bias"] = (cfg.conv2_filters,)
    shapes["dense1.weight"] = (cfg.hidden, cfg.fused_dim)
    shapes["dense1.bias"] = (cfg.hidden,)
    shapes["dense2.weight"] = (1, cfg.hidden)
    shapes["dense2.bias"] = (1,)
    return shapes


def param_count(cfg: NetConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def config_from_params(params: Mapping[str, np.ndarray], t_frames: int, n_mels: int) -> NetConfig:
    """Recover the architecture from tensor shapes (checkpoints only store tensors)."""
    c1 = params[f"{MODALITIES[0]}.conv1.weight"]
    return NetConfig(
        t_frames=t_frames,
        n_mels=n_mels,
        conv1_filters=c1.shape[0],
        conv2_filters=params[f"{MODALITIES[0]}.conv2.weight"].shape[0],
        hidden=params["dense1.weight"].shape[0],
        coord_channel=c1.shape[1] == 2,
    )


def init_params(cfg: NetConfig, seed: int) -> Params:
    """He-uniform weights, zero biases, float32 storage."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
            continue
        fan_in = int(np.prod(shape[1:]))
        limit = np.sqrt(6.0 / fan_in)
        params[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
    return params


def zero_params(cfg: NetConfig) -> Params:
    return {k: np.zeros(s, dtype=np.float32) for k, s in param_shapes(cfg).items()}


# --------------------------------------------------------------------------
# layers


_OFFSETS = [(i, j) for i in range(3) for j in range(3)]


def _conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-padded 3x3 convolution. x: (C,B,T,F), w: (O,C,3,3) -> (O,B,T,F)."""
    C, B, T, F = x.shape
    O = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((9, C, B, T, F))
    for k, (i, j) in enumerate(_OFFSETS):
        cols[k] = xp[:, :, i : i + T, j : j + F]
    cols = cols.reshape(9 * C, B * T * F)
    wmat = w.transpose(0, 2, 3, 1).reshape(O, 9 * C)
    out = (wmat @ cols).reshape(O, B, T, F) + b[:, None, None, None]
    return out, cols


def _conv3x3_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray, in_shape, need_dx=True):
    C, B, T, F = in_shape
    O = w.shape[0]
    dflat = dout.reshape(O, B * T * F)
    dw = (dflat @ cols.T).reshape(O, 3, 3, C).transpose(0, 3, 1, 2)
    db = dflat.sum(axis=1)
    if not need_dx:
        return None, dw, db
    dcols = (w.transpose(0, 2, 3, 1).reshape(O, 9 * C).T @ dflat).reshape(9, C, B, T, F)
    dxp = np.zeros((C, B, T + 2, F + 2))
    for k, (i, j) in enumerate(_OFFSETS):
        dxp[:, :, i : i + T, j : j + F] += dcols[k]
    return dxp[:, :, 1:-1, 1:-1], dw, db


_POOL_OFFSETS = [(0, 0), (0, 1), (1, 0), (1, 1)]


def _maxpool2(x: np.ndarray):
    """2x2/2 max pool over the last two axes; odd trailing rows/columns are dropped.

    ``idx`` records which quadrant won, first one on ties.
    """
    T2, F2 = x.shape[-2] // 2, x.shape[-1] // 2
    q = [x[..., i : 2 * T2 : 2, j : 2 * F2 : 2] for i, j in _POOL_OFFSETS]
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    idx = np.where(q[0] == out, 0, np.where(q[1] == out, 1, np.where(q[2] == out, 2, 3))).astype(np.uint8)
    return out, idx


def _maxpool2_backward(dout: np.ndarray, idx: np.ndarray, in_shape):
    T2, F2 = in_shape[-2] // 2, in_shape[-1] // 2
    dx = np.zeros(in_shape)
    for k, (i, j) in enumerate(_POOL_OFFSETS):
        np.multiply(dout, idx == k, out=dx[..., i : 2 * T2 : 2, j : 2 * F2 : 2])
    return dx


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def loss_bce(p, y):
    """Binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(p, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    out = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# forward / backward


def _as64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def _coord_plane(t_frames: int, n_mels: int) -> np.ndarray:
    """(1,1,T,F) mel-position plane in [-1, 1], constant along time."""
    return np.broadcast_to(np.linspace(-1.0, 1.0, n_mels), (1, 1, t_frames, n_mels))


def _conv1(x: np.ndarray, w1: np.ndarray, b1: np.ndarray):
    """First convolution. The coordinate plane is identical for every window, so
    its response is computed once and broadcast over the batch."""
    h1, cols = _conv3x3(x[None], w1[:, :1], b1)
    coord_cols = None
    if w1.shape[1] == 2:
        coord, coord_cols = _conv3x3(_coord_plane(*x.shape[1:]), w1[:, 1:], np.zeros_like(b1))
        h1 += coord
    return h1, cols, coord_cols


def _encoder(x: np.ndarray, params: Mapping[str, np.ndarray], modality: str):
    w1 = _as64(params[f"{modality}.conv1.weight"])
    b1 = _as64(params[f"{modality}.conv1.bias"])
    w2 = _as64(params[f"{modality}.conv2.weight"])
    b2 = _as64(params[f"{modality}.conv2.bias"])
    h1, cols1, coord_cols = _conv1(x, w1, b1)
    p1, idx1 = _maxpool2(np.maximum(h1, 0.0))
    h2, cols2 = _conv3x3(p1, w2, b2)
    p2, idx2 = _maxpool2(np.maximum(h2, 0.0))
    emb = p2.mean(axis=(2, 3)).T
    cache = dict(
        x_shape=(1, *x.shape), cols1=cols1, coord_cols=coord_cols, h1=h1, idx1=idx1, p1=p1,
        cols2=cols2, h2=h2, idx2=idx2, p2=p2, w1=w1, w2=w2,
    )
    return emb, cache


def _encoder_backward(demb: np.ndarray, cache: dict, modality: str) -> Params:
    C2, B, T2, F2 = cache["p2"].shape
    # a pooled output is positive exactly when its winning pre-activation is, so
    # the ReLU mask can be applied before unpooling
    dp2 = (demb.T / (T2 * F2))[:, :, None, None] * (cache["p2"] > 0)
    dh2 = _maxpool2_backward(dp2, cache["idx2"], cache["h2"].shape)
    dp1, dw2, db2 = _conv3x3_backward(dh2, cache["cols2"], cache["w2"], cache["p1"].shape)
    dh1 = _maxpool2_backward(dp1 * (cache["p1"] > 0), cache["idx1"], cache["h1"].shape)
    w1 = cache["w1"]
    _, dw1, db1 = _conv3x3_backward(dh1, cache["cols1"], w1[:, :1], cache["x_shape"], need_dx=False)
    if cache["coord_cols"] is not None:
        dsum = dh1.sum(axis=1, keepdims=True)
        _, dw_coord, _ = _conv3x3_backward(dsum, cache["coord_cols"], w1[:, 1:], (1, 1, *dh1.shape[2:]), need_dx=False)
        dw1 = np.concatenate([dw1, dw_coord], axis=1)
    return {
        f"{modality}.conv1.weight": dw1,
        f"{modality}.conv1.bias": db1,
        f"{modality}.conv2.weight": dw2,
        f"{modality}.conv2.bias": db2,
    }


def _check_window_shape(x: np.ndarray, params: Mapping[str, np.ndarray], t_frames=None, n_mels=None):
    if x.ndim != 3:
        raise ShapeMismatch(f"expected (batch, frames, mels), got {x.shape}")
    if t_frames is not None and x.shape[1] != t_frames or n_mels is not None and x.shape[2] != n_mels:
        raise ShapeMismatch(f"window shape {x.shape[1:]} != ({t_frames}, {n_mels})")
    if x.shape[1] < 4 or x.shape[2] < 4:
        raise ShapeMismatch(f"window {x.shape[1:]} too small for two 2x2 pools")


def encoder_forward(window, params: Mapping[str, np.ndarray], modality: str) -> np.ndarray:
    """Embed one window ``(T, F)`` or a stack ``(B, T, F)`` with one modality's encoder."""
    x = _as64(getattr(window, "values", window))
    single = x.ndim == 2
    if single:
        x = x[None]
    _check_window_shape(x, params)
    emb, _ = _encoder(x, params, modality)
    return emb[0] if single else emb


def _fuse_inputs(embeddings: np.ndarray, presence: np.ndarray) -> np.ndarray:
    B = embeddings.shape[0]
    masked = embeddings * presence[:, :, None]
    return np.concatenate([masked.reshape(B, -1), presence], axis=1)


def _head(z_in: np.ndarray, params: Mapping[str, np.ndarray]):
    h = z_in @ _as64(params["dense1.weight"]).T + _as64(params["dense1.bias"])
    a = np.maximum(h, 0.0)
    logit = (a @ _as64(params["dense2.weight"]).T + _as64(params["dense2.bias"]))[:, 0]
    return logit, h, a


def fuse_and_score(embeddings, presence, params: Mapping[str, np.ndarray]):
    """Score embeddings of shape (3, D) or (B, 3, D) with presence flags (3,) or (B, 3)."""
    emb = _as64(embeddings)
    pres = _as64(presence)
    single = emb.ndim == 2
    if single:
        emb, pres = emb[None], pres[None]
    if not np.all(pres.any(axis=1)):
        raise NoModality("at least one modality must be present")
    logit, _, _ = _head(_fuse_inputs(emb, pres), params)
    p = sigmoid(logit)
    return float(p[0]) if single else p


def forward(x, presence, params: Mapping[str, np.ndarray], keep_cache: bool = False):
    """Batch forward. x: (B, 3, T, F) windows, presence: (B, 3) -> probabilities (B,)."""
    x = _as64(x)
    pres = _as64(presence)
    if x.ndim != 4 or x.shape[1] != len(MODALITIES):
        raise ShapeMismatch(f"expected (batch, 3, frames, mels), got {x.shape}")
    if not np.all(pres.any(axis=1)):
        raise NoModality("at least one modality must be present in every example")
    B = x.shape[0]
    d = params[f"{MODALITIES[0]}.conv2.weight"].shape[0]
    embs = np.zeros((B, len(MODALITIES), d))
    caches: dict[str, dict] = {}
    for k, m in enumerate(MODALITIES):
        if not pres[:, k].any():
            continue
        _check_window_shape(x[:, k], params)
        embs[:, k], caches[m] = _encoder(x[:, k], params, m)
    z_in = _fuse_inputs(embs, pres)
    logit, h, a = _head(z_in, params)
    p = sigmoid(logit)
    if not keep_cache:
        return p
    return p, dict(encoders=caches, z_in=z_in, h=h, a=a, logit=logit, presence=pres)


# Windows per encoder pass; activations of a few windows stay cache-resident,
# which is markedly faster than one large pass.
CHUNK = 8


def backward(x, presence, y, params: Mapping[str, np.ndarray]):
    """Mean batch BCE and its exact gradient for every parameter tensor.

    Every example's contribution is independent, so the batch is processed in
    fixed chunks and the gradients summed in order.
    """
    y = _as64(y)
    B = len(y)
    total = 0.0
    grads: Params = {k: np.zeros(v.shape) for k, v in params.items()}
    for s in range(0, B, CHUNK):
        part_loss, part = _backward_sum(x[s : s + CHUNK], presence[s : s + CHUNK], y[s : s + CHUNK], params, B)
        total += part_loss
        for k, g in part.items():
            grads[k] += g
    return total / B, grads


def _backward_sum(x, presence, y, params: Mapping[str, np.ndarray], n_total: int):
    """Summed BCE over ``x`` and its gradient scaled by ``1 / n_total``."""
    p, cache = forward(x, presence, params, keep_cache=True)
    loss = float(np.sum(loss_bce(p, y)))
    inside = (p >= P_CLAMP) & (p <= 1.0 - P_CLAMP)
    dlogit = np.where(inside, p - y, 0.0) / n_total

    grads: Params = {}
    a, h, z_in = cache["a"], cache["h"], cache["z_in"]
    grads["dense2.weight"] = (dlogit @ a)[None, :]
    grads["dense2.bias"] = np.array([dlogit.sum()])
    dh = np.outer(dlogit, _as64(params["dense2.weight"])[0]) * (h > 0)
    grads["dense1.weight"] = dh.T @ z_in
    grads["dense1.bias"] = dh.sum(axis=0)
    dz = dh @ _as64(params["dense1.weight"])
    pres = cache["presence"]
    d = params[f"{MODALITIES[0]}.conv2.weight"].shape[0]
    for k, m in enumerate(MODALITIES):
        if m in cache["encoders"]:
            demb = dz[:, k * d : (k + 1) * d] * pres[:, k : k + 1]
            grads.update(_encoder_backward(demb, cache["encoders"][m], m))
    return loss, grads


def activation_pattern(x, presence, params: Mapping[str, np.ndarray]) -> list[np.ndarray]:
    """Every piecewise-linear branch decision of a forward pass.

    Two parameter settings with equal patterns lie on the same smooth piece of
    the loss, which is what makes a finite-difference comparison meaningful.
    """
    p, cache = forward(x, presence, params, keep_cache=True)
    pattern = [cache["h"] > 0, (p >= P_CLAMP) & (p <= 1.0 - P_CLAMP)]
    for m in MODALITIES:
        enc = cache["encoders"].get(m)
        if enc is not None:
            pattern += [enc["h1"] > 0, enc["idx1"], enc["h2"] > 0, enc["idx2"]]
    return pattern


# --------------------------------------------------------------------------
# optimizer and training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")


class Adam:
    def __init__(self, params: Params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros(v.shape) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape) for k, v in params.items()}
        self.t = 0

    def step(self, params: Params, grads: Mapping[str, np.ndarray]) -> Params:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        out = {}
        for k in sorted(params):
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            out[k] = (_as64(params[k]) - update).astype(np.float32)
        return out


@dataclass
class Dataset:
    """Center-cropped training inputs: one window per modality per session."""

    x: np.ndarray  # (N, 3, T, F)
    presence: np.ndarray  # (N, 3)
    y: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class TrainResult:
    params: Params
    log: list[tuple[int, float, float, float]] = field(default_factory=list)
    best_epoch: int = 0
    best_val_auc: float = float("nan")

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_auc", "val_loss"])
        for epoch, loss, val_auc, val_loss in self.log:
            w.writerow([epoch, f"{loss:.8f}", f"{val_auc:.8f}", f"{val_loss:.8f}"])
        return buf.getvalue()


def predict_batch(x, presence, params, batch_size: int = CHUNK) -> np.ndarray:
    out = [forward(x[i : i + batch_size], presence[i : i + batch_size], params) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


def train(train_set: Dataset, val_set: Dataset, cfg: NetConfig, config: TrainConfig = TrainConfig()) -> TrainResult:
    """Adam with early stopping on validation AUC; keeps the best-AUC weights.

    Equal validation AUCs are ranked by validation loss, so training keeps
    improving calibration once a small validation set is perfectly ranked.
    """
    from .evaluation import auc_score

    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptySplit("train and validation sets must both be non-empty")
    if len(np.unique(val_set.y)) < 2:
        raise EmptySplit("validation set needs both positive and negative sessions")

    params = init_params(cfg, config.seed)
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.epsilon)
    result = TrainResult(params=params)
    best = (-np.inf, -np.inf)
    for epoch in range(1, config.max_epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_set))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = np.sort(order[start : start + config.batch_size])
            loss, grads = backward(train_set.x[idx], train_set.presence[idx], train_set.y[idx], params)
            params = opt.step(params, grads)
            total += loss * len(idx)
        val_p = predict_batch(val_set.x, val_set.presence, params)
        val_auc = auc_score(val_p, val_set.y)
        val_loss = float(np.mean(loss_bce(val_p, val_set.y)))
        train_loss = total / len(train_set)
        result.log.append((epoch, train_loss, val_auc, val_loss))
        log.info("epoch %d loss %.4f val_auc %.4f val_loss %.4f", epoch, train_loss, val_auc, val_loss)
        if (val_auc, -val_loss) > best:
            best = (val_auc, -val_loss)
            result.params = {k: v.copy() for k, v in params.items()}
            result.best_epoch = epoch
            result.best_val_auc = float(val_auc)
        elif epoch - result.best_epoch >= config.patience:
            break
    return result


def predict(session: Mapping[str, Sequence[np.ndarray]], params: Mapping[str, np.ndarray]) -> float:
    """Probability for one session.

    ``session`` maps modality name to that recording's tiled windows (each
    ``(T, F)``); a modality may hold windows from several recordings. Each
    modality's window embeddings are averaged before a single fused score.
    """
    return float(predict_sessions([session], params)[0])


def predict_sessions(sessions: Sequence[Mapping[str, Sequence[np.ndarray]]], params, chunk: int = CHUNK) -> np.ndarray:
    n = len(sessions)
    d = params[f"{MODALITIES[0]}.conv2.weight"].shape[0]
    embs = np.zeros((n, len(MODALITIES), d))
    pres = np.zeros((n, len(MODALITIES)))
    for k, m in enumerate(MODALITIES):
        owners, stack = [], []
        for i, s in enumerate(sessions):
            wins = s.get(m) or []
            for w in wins:
                owners.append(i)
                stack.append(_as64(getattr(w, "values", w)))
            if wins:
                pres[i, k] = 1.0
        if not stack:
            continue
        x = np.stack(stack)
        _check_window_shape(x, params)
        e = np.concatenate([_encoder(x[j : j + chunk], params, m)[0] for j in range(0, len(x), chunk)])
        owners_arr = np.asarray(owners)
        sums = np.zeros((n, d))
        np.add.at(sums, owners_arr, e)
        counts = np.bincount(owners_arr, minlength=n)
        has = counts > 0
        embs[has, k] = sums[has] / counts[has, None]
    if not np.all(pres.any(axis=1)):
        raise NoModality("session has no modality recordings")
    return fuse_and_score(embs, pres, params)


# --------------------------------------------------------------------------
# checkpoint I/O

_CKPT_MAGIC = b"SNDM"
_CKPT_VERSION = 1


def save_checkpoint(params: Mapping[str, np.ndarray]) -> bytes:
    out = bytearray(_CKPT_MAGIC)
    out += struct.pack("<HI", _CKPT_VERSION, len(params))
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f4")
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes(order="C")
    return bytes(out)


def load_checkpoint(data: bytes) -> Params:
    if data[:4] != _CKPT_MAGIC:
        raise ValueError("not a SNDM checkpoint")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 10
    params: Params = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    return params
