"""Independent reference implementations used as test oracles.

Nothing here imports the package code it checks; each oracle is written the
slow, obvious way.
"""

from __future__ import annotations

import itertools

import numpy as np

MODALITIES = ("breathing", "cough", "voice")


# --------------------------------------------------------------------------
# AUC / ROC


def brute_force_auc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for a, b in itertools.product(pos, neg):
        total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


# --------------------------------------------------------------------------
# DSP


def direct_dft_power(frame: np.ndarray) -> np.ndarray:
    """|X_k|^2 for k = 0..N/2 by the O(N^2) definition."""
    n = len(frame)
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    basis = np.exp(-2j * np.pi * k * t / n)
    return np.abs(basis @ frame) ** 2


def one_sided_energy(power: np.ndarray, n: int) -> float:
    """Total two-sided spectral energy from a one-sided power spectrum."""
    weights = np.full(len(power), 2.0)
    weights[0] = 1.0
    if n % 2 == 0:
        weights[-1] = 1.0
    return float(np.sum(weights * power))


# --------------------------------------------------------------------------
# network reference: (batch, channel, time, freq) layout, explicit loops over
# kernel taps, optional leading perturbation axis on any parameter


def _conv_same(x, w, b):
    """x: (..., B, C, T, F), w: (..., O, C, 3, 3), b: (..., O)."""
    T, F = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    xp = np.pad(x, pad)
    # taps stacked along the channel axis: (..., B, T, F, 9C) @ (..., 9C, O)
    taps = [np.moveaxis(xp[..., i : i + T, j : j + F], -3, -1) for i in range(3) for j in range(3)]
    patches = np.concatenate(taps, axis=-1)
    kernel = np.concatenate([np.swapaxes(w[..., i, j], -1, -2) for i in range(3) for j in range(3)], axis=-2)
    out = patches @ kernel[..., None, None, :, :]
    return np.moveaxis(out, -1, -3) + b[..., None, :, None, None]


def _pool(x):
    T2, F2 = x.shape[-2] // 2, x.shape[-1] // 2
    x = x[..., : 2 * T2, : 2 * F2]
    blocks = x.reshape(*x.shape[:-2], T2, 2, F2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*x.shape[:-2], T2, F2, 4)
    return blocks.max(axis=-1), blocks.argmax(axis=-1)


def reference_loss(x, presence, y, params, coord=True):
    """Mean clamped BCE and the list of branch decisions.

    Any entry of ``params`` may carry an extra leading axis P; the outputs
    then carry it too.
    """
    x = np.asarray(x, dtype=np.float64)
    B, _, T, F = x.shape
    lead = max(v.ndim - ref for v, ref in ((params[k], _base_ndim(k)) for k in params))
    embs, pattern = [], []
    for k, m in enumerate(MODALITIES):
        xm = x[:, k][:, None]
        if coord:
            grid = np.broadcast_to(np.linspace(-1.0, 1.0, F), (B, 1, T, F))
            xm = np.concatenate([xm, grid], axis=1)
        h1 = _conv_same(xm, params[f"{m}.conv1.weight"], params[f"{m}.conv1.bias"])
        p1, a1 = _pool(np.maximum(h1, 0.0))
        h2 = _conv_same(p1, params[f"{m}.conv2.weight"], params[f"{m}.conv2.bias"])
        p2, a2 = _pool(np.maximum(h2, 0.0))
        emb = p2.mean(axis=(-2, -1)) * presence[:, k : k + 1]
        embs.append(emb)
        pattern += [h1 > 0, a1, h2 > 0, a2]
    shape = np.broadcast_shapes(*(e.shape for e in embs))
    z = np.concatenate([np.broadcast_to(e, shape) for e in embs]
                       + [np.broadcast_to(presence, shape[:-1] + (3,))], axis=-1)
    h = np.einsum("...bi,...ji->...bj", z, params["dense1.weight"]) + params["dense1.bias"][..., None, :]
    a = np.maximum(h, 0.0)
    logit = np.einsum("...bj,...j->...b", a, params["dense2.weight"][..., 0, :]) + params["dense2.bias"][..., :1]
    p = 1.0 / (1.0 + np.exp(-logit))
    inside = (p >= 1e-7) & (p <= 1 - 1e-7)
    pc = np.clip(p, 1e-7, 1 - 1e-7)
    loss = -(y * np.log(pc) + (1 - y) * np.log(1 - pc)).mean(axis=-1)
    pattern += [h > 0, inside]
    return loss, pattern, lead


def _base_ndim(name: str) -> int:
    if name.endswith("conv1.weight") or name.endswith("conv2.weight"):
        return 4
    return 2 if name.endswith(".weight") else 1


def same_pattern(pattern, base, lead: int) -> np.ndarray:
    """Per-perturbation flag: every branch decision equals the unperturbed one."""
    ok = True
    for cur, ref in zip(pattern, base):
        cur = np.asarray(cur)
        diff = cur != ref
        if lead and diff.ndim > ref.ndim:
            ok = ok & ~diff.reshape(diff.shape[0], -1).any(axis=1)
        else:
            ok = ok & ~diff.any()
    return np.broadcast_to(ok, (1,)) if np.ndim(ok) == 0 else ok


def _perturbed(x, presence, y, base, name, step, index):
    """Reference loss with entry ``index[k]`` of ``params[name]`` moved by ``step`` (one per k)."""
    w = base[name]
    delta = np.zeros((len(index), w.size))
    delta[np.arange(len(index)), index] = step
    pert = dict(base)
    pert[name] = w[None] + delta.reshape(len(index), *w.shape)
    return reference_loss(x, presence, y, pert)


def finite_difference(x, presence, y, params, name, h=1e-5):
    """Finite-difference gradient of the reference loss for every entry of ``params[name]``.

    Central differences where both +h and -h keep the unperturbed activation
    pattern; otherwise a second-order one-sided difference on a side that
    keeps it. Returns (gradient, resolved); unresolved entries sit on a kink
    from both sides and carry NaN.
    """
    base = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    loss0, base_pattern, _ = reference_loss(x, presence, y, base)
    shape = base[name].shape
    everything = np.arange(base[name].size)
    f, keep = {}, {}
    for step in (h, -h):
        loss, pattern, lead = _perturbed(x, presence, y, base, name, step, everything)
        f[step], keep[step] = loss, same_pattern(pattern, base_pattern, lead)
    grad = (f[h] - f[-h]) / (2 * h)
    resolved = keep[h] & keep[-h]
    for sign in (1.0, -1.0):
        todo = everything[~resolved & keep[sign * h]]
        if len(todo) == 0:
            continue
        half, pattern, lead = _perturbed(x, presence, y, base, name, sign * h / 2, todo)
        ok = same_pattern(pattern, base_pattern, lead)
        one_sided = sign * (4 * half - f[sign * h][todo] - 3 * loss0) / h
        grad[todo[ok]] = one_sided[ok]
        resolved[todo[ok]] = True
    grad[~resolved] = np.nan
    return grad.reshape(shape), resolved.reshape(shape)
