"""Fused neural-network primitives with hand-written derivatives.

Images use channels-last layout: ``(batch, height, width, channels)``.
Convolution kernels are ``(kh, kw, c_in, c_out)``.
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import ContractError
from .tensor import Tensor, _result, as_tensor, mean, square, sub


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, wd.shape[1])

    def bwd(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        return (gx, gw) if bias is None else (gx, gw, g2.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bwd, "linear")


def embedding(weight: Tensor, indices) -> Tensor:
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise ContractError(f"embedding index out of range [0, {weight.shape[0]})")
    wshape = weight.shape

    def bwd(g):
        full = np.zeros(wshape, dtype=g.dtype)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, wshape[1]))
        return (full,)

    return _result(weight.data[idx], (weight,), bwd, "embedding")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _result(out, (x, gain, bias), bwd, "layer_norm")


def _conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[0], xp.shape[3]
    cols = np.empty((b, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(b * ho * wo, kh * kw * c)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col, channels-last."""
    xd, wd = x.data, weight.data
    if xd.ndim != 4:
        raise ContractError(f"conv2d expects (B, H, W, C) input, got {xd.shape}")
    kh, kw, cin, cout = wd.shape
    b, h, w, c = xd.shape
    if c != cin:
        raise ContractError(f"conv2d channel mismatch: input {c}, kernel {cin}")
    ho = _conv_output_size(h, kh, stride, padding)
    wo = _conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ContractError("conv2d kernel larger than padded input")
    xp = _pad(xd, padding)
    cols2 = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = wd.reshape(kh * kw * cin, cout)
    out = cols2 @ w2
    if bias is not None:
        out += bias.data
    out = out.reshape(b, ho, wo, cout)
    same = stride == 1 and kh == kw and kh == 2 * padding + 1

    def grad_input(g):
        if same:
            # transposed convolution of a "same" conv is a "same" conv with the flipped kernel
            wt = wd[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
            return (_im2col(_pad(g, padding), kh, kw, 1, h, w) @ wt).reshape(xd.shape)
        dcols = (g.reshape(-1, cout) @ w2.T).reshape(b, ho, wo, kh, kw, cin)
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
        return dxp[:, padding:padding + h, padding:padding + w, :] if padding else dxp

    def bwd(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.T @ g2).reshape(wd.shape)
        gx = grad_input(g) if x.requires_grad else None
        return (gx, gw) if bias is None else (gx, gw, g2.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bwd, "conv2d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    xd = x.data
    b, h, w, c = xd.shape
    out = np.repeat(np.repeat(xd, factor, axis=1), factor, axis=2)
    return _result(out, (x,),
                   lambda g: (g.reshape(b, h, factor, w, factor, c).sum(axis=(2, 4)),),
                   "upsample_nearest")


def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Softmax attention with a causal mask; inputs are ``(B, heads, T, D)``."""
    qd, kd, vd = q.data, k.data, v.data
    t, d = qd.shape[-2], qd.shape[-1]
    scale = 1.0 / math.sqrt(d)
    scores = (qd @ np.swapaxes(kd, -1, -2)) * scale
    future = np.triu(np.ones((t, t), dtype=bool), k=1)
    scores = np.where(future, -np.inf, scores)
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    out = probs @ vd

    def bwd(g):
        dv = np.swapaxes(probs, -1, -2) @ g
        dp = g @ np.swapaxes(vd, -1, -2)
        ds = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True))
        dq = (ds @ kd) * scale
        dk = (np.swapaxes(ds, -1, -2) @ qd) * scale
        return dq, dk, dv

    return _result(out, (q, k, v), bwd, "causal_attention")


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``, 64-bit accumulation."""
    ld = logits.data
    tgt = np.asarray(targets)
    if ld.ndim != 2 or tgt.shape != (ld.shape[0],):
        raise ContractError(f"logits {ld.shape} and targets {tgt.shape} do not match")
    n, vocab = ld.shape
    if n == 0:
        raise ContractError("empty batch")
    if not np.issubdtype(tgt.dtype, np.integer) or tgt.min() < 0 or tgt.max() >= vocab:
        raise ContractError(f"targets must be integers in [0, {vocab})")
    logp = log_softmax_np(ld)
    rows = np.arange(n)
    loss = -logp[rows, tgt].sum() / n

    def bwd(g):
        grad = np.exp(logp)
        grad[rows, tgt] -= 1.0
        return ((grad * (float(g) / n)).astype(ld.dtype),)

    return _result(np.asarray(loss), (logits,), bwd, "softmax_cross_entropy")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) * (1.0 / (1.0 - rate))
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def straight_through(encoded: Tensor, quantized: np.ndarray) -> Tensor:
    """Forward value ``quantized``; gradient copied unchanged to ``encoded``."""
    if quantized.shape != encoded.shape:
        raise ContractError("straight-through shapes differ")
    return _result(np.array(quantized, dtype=encoded.data.dtype), (encoded,), lambda g: (g,), "straight_through")


def mse_loss(pred: Tensor, target) -> Tensor:
    return mean(square(sub(pred, as_tensor(target))))


def space_to_depth(x: Tensor, r: int = 2) -> Tensor:
    """``(B, H, W, C)`` -> ``(B, H/r, W/r, r*r*C)``; each r x r block becomes one pixel."""
    b, h, w, c = x.shape
    if h % r or w % r:
        raise ContractError(f"space_to_depth needs sides divisible by {r}, got {h}x{w}")
    y = x.reshape(b, h // r, r, w // r, r, c).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(b, h // r, w // r, r * r * c)


def depth_to_space(x: Tensor, r: int = 2) -> Tensor:
    """Inverse of :func:`space_to_depth`."""
    b, h, w, c = x.shape
    if c % (r * r):
        raise ContractError(f"depth_to_space needs channels divisible by {r * r}, got {c}")
    y = x.reshape(b, h, w, r, r, c // (r * r)).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(b, h * r, w * r, c // (r * r))
