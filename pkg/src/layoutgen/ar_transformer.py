"""Stage 2: decoder-only transformer over [conditioning | image tokens].

Training maximizes the likelihood of the image tokens given the layout
conditioning; the conditioning positions themselves are never scored.
Sampling runs a plain-numpy incremental decoder with a key/value cache,
restricted to the image-token range of the vocabulary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, SamplingError
from .layout_codec import GridSpec, LayoutObject, Viewport, VocabularyMap, tokenize_layout
from .numerics import Embedding, LayerNorm, Linear, Module, Tensor
from .numerics import functional as F


@dataclass(frozen=True)
class TransformerConfig:
    vocab_size: int = 1297
    cond_length: int = 26
    context_length: int = 90
    n_layers: int = 4
    n_heads: int = 4
    n_embd: int = 128
    dropout: float = 0.1

    def validate(self) -> None:
        if min(self.n_layers, self.n_heads, self.n_embd, self.vocab_size) < 1:
            raise ConfigError("ar.layers, ar.heads, ar.embd, vocabulary size all positive")
        if self.n_embd % self.n_heads:
            raise ConfigError("ar.embd divisible by ar.heads", f"{self.n_embd} % {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("ar.dropout in [0, 1)", str(self.dropout))
        if self.context_length < self.cond_length + 1:
            raise ConfigError("context length >= conditioning length + 1",
                              f"{self.context_length} < {self.cond_length} + 1")

    @property
    def n_image_tokens(self) -> int:
        return self.context_length - self.cond_length


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 1.0
    top_k: int = 100
    seed: int = 0
    greedy: bool = False

    def validate(self) -> None:
        if not self.temperature > 0:
            raise ConfigError("sample.temperature > 0", str(self.temperature))
        if self.top_k < 1:
            raise ConfigError("sample.top_k >= 1", str(self.top_k))


class Block(Module):
    def __init__(self, rng, cfg: TransformerConfig):
        d = cfg.n_embd
        self.ln1 = LayerNorm(d)
        self.qkv = Linear(rng, d, 3 * d)
        self.proj = Linear(rng, d, d, std=0.02 / math.sqrt(2 * cfg.n_layers))
        self.ln2 = LayerNorm(d)
        self.fc = Linear(rng, d, 4 * d)
        self.fc_out = Linear(rng, 4 * d, d, std=0.02 / math.sqrt(2 * cfg.n_layers))
        self.n_heads = cfg.n_heads

    def forward(self, x: Tensor, drop) -> Tensor:
        b, t, d = x.shape
        hd = d // self.n_heads
        qkv = self.qkv(self.ln1(x)).reshape(b, t, 3, self.n_heads, hd).transpose(2, 0, 3, 1, 4)
        att = F.causal_attention(qkv[0], qkv[1], qkv[2])
        x = x + drop(self.proj(att.transpose(0, 2, 1, 3).reshape(b, t, d)))
        return x + drop(self.fc_out(nx.gelu(self.fc(self.ln2(x)))))


class GPT(Module):
    """Pre-norm transformer with learned absolute position embeddings."""

    def __init__(self, cfg: TransformerConfig, seed: int = 0):
        cfg.validate()
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.tok_emb = Embedding(rng, cfg.vocab_size, cfg.n_embd)
        self.pos_emb = nx.parameter(rng.normal(0.0, 0.02, size=(cfg.context_length, cfg.n_embd)))
        self.blocks = [Block(rng, cfg) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.n_embd)
        self.head = Linear(rng, cfg.n_embd, cfg.vocab_size, bias=False)
        self.dropout_rng = np.random.default_rng([seed, 3])

    def forward(self, tokens, first: int = 0) -> Tensor:
        """Logits ``(B, T - first, V)``; positions before ``first`` skip the output head."""
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        cfg = self.config
        t = tokens.shape[1]
        if t > cfg.context_length:
            raise ContractError(f"sequence length {t} exceeds context length {cfg.context_length}")
        _check_range(tokens, cfg.vocab_size)
        rate = cfg.dropout if self.training else 0.0

        def drop(h):
            return F.dropout(h, rate, self.dropout_rng, self.training)

        x = drop(self.tok_emb(tokens) + self.pos_emb[:t])
        for block in self.blocks:
            x = block(x, drop)
        if first:
            x = x[:, first:]
        return self.head(self.ln_f(x))


def _check_range(tokens: np.ndarray, vocab_size: int) -> None:
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ContractError("tokens must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise ContractError(f"tokens must lie in [0, {vocab_size})")


def forward_logits(sequence, model: GPT) -> np.ndarray:
    """Logits ``(len, vocabulary)`` for one sequence, evaluation mode."""
    was_training = model.training
    model.eval()
    try:
        with nx.no_grad():
            return model(np.asarray(sequence)[None]).data[0]
    finally:
        model.train(was_training)


def ar_loss(image_tokens, cond, model: GPT) -> Tensor:
    """Mean negative log-likelihood of the image tokens given the conditioning.

    ``image_tokens`` is ``(n,)`` or ``(B, n)`` (raster order), ``cond`` is
    ``(Lc,)`` or ``(B, Lc)``. Position ``Lc - 1 + i`` predicts image token ``i``.
    """
    image_tokens = np.asarray(image_tokens)
    cond = np.asarray(cond)
    if image_tokens.ndim == 1:
        image_tokens, cond = image_tokens[None], cond[None]
    if len(image_tokens) != len(cond):
        raise ContractError("batch sizes of image tokens and conditioning differ")
    cfg = model.config
    lc, n = cond.shape[1], image_tokens.shape[1]
    if lc + n > cfg.context_length + 1:
        raise ContractError(f"{lc} conditioning + {n} image tokens do not fit context {cfg.context_length}")
    _check_range(image_tokens, cfg.vocab_size)
    seq = np.concatenate([cond, image_tokens], axis=1)
    logits = model(seq[:, :-1], first=lc - 1)
    return image_token_loss(logits, image_tokens)


def image_token_loss(logits: Tensor, image_tokens) -> Tensor:
    """Cross-entropy of ``(B, n, V)`` logits against ``(B, n)`` targets."""
    return F.softmax_cross_entropy(logits.reshape(-1, logits.shape[-1]), np.asarray(image_tokens).reshape(-1))


def top_k_filter(logits, k: int) -> np.ndarray:
    """Softmax over the ``k`` largest logits (ties at the boundary go to lower indices)."""
    if k < 1:
        raise ContractError("top_k must be >= 1")
    z = np.asarray(logits, dtype=np.float64)
    keep = np.argsort(-z, kind="stable")[:k]
    probs = np.zeros_like(z)
    kept = z[keep] - z[keep].max()
    e = np.exp(kept)
    probs[keep] = e / e.sum()
    return probs


# -- incremental decoding ------------------------------------------------------

def _layer_norm(x, ln):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(-1, keepdims=True) + ln.eps) * ln.gain.data + ln.bias.data


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * (x * x * x))))


class KVCache:
    """Per-layer keys/values for a batch of sequences decoded in lock step."""

    def __init__(self, model: GPT, batch: int):
        cfg = model.config
        hd = cfg.n_embd // cfg.n_heads
        shape = (batch, cfg.n_heads, cfg.context_length, hd)
        self.keys = [np.zeros(shape, np.float32) for _ in model.blocks]
        self.values = [np.zeros(shape, np.float32) for _ in model.blocks]
        self.length = 0

    def extend(self, model: GPT, tokens: np.ndarray) -> np.ndarray:
        """Feed ``(B, n)`` new tokens; returns logits at the last new position."""
        cfg = model.config
        b, n = tokens.shape
        t0, t1 = self.length, self.length + n
        if t1 > cfg.context_length:
            raise ContractError("sequence exceeds context length")
        nh, hd = cfg.n_heads, cfg.n_embd // cfg.n_heads
        x = model.tok_emb.weight.data[tokens] + model.pos_emb.data[t0:t1]
        future = np.triu(np.ones((n, t1), dtype=bool), k=t0 + 1)
        for li, blk in enumerate(model.blocks):
            h = _layer_norm(x, blk.ln1) @ blk.qkv.weight.data + blk.qkv.bias.data
            q, k, v = h.reshape(b, n, 3, nh, hd).transpose(2, 0, 3, 1, 4)
            self.keys[li][:, :, t0:t1] = k
            self.values[li][:, :, t0:t1] = v
            keys, vals = self.keys[li][:, :, :t1], self.values[li][:, :, :t1]
            s = (q @ keys.transpose(0, 1, 3, 2)) / np.float32(math.sqrt(hd))
            s = np.where(future, -np.inf, s)
            s = np.exp(s - s.max(-1, keepdims=True))
            att = (s / s.sum(-1, keepdims=True)) @ vals
            x = x + att.transpose(0, 2, 1, 3).reshape(b, n, -1) @ blk.proj.weight.data + blk.proj.bias.data
            m = _gelu(_layer_norm(x, blk.ln2) @ blk.fc.weight.data + blk.fc.bias.data)
            x = x + m @ blk.fc_out.weight.data + blk.fc_out.bias.data
        self.length = t1
        return _layer_norm(x[:, -1], model.ln_f) @ model.head.weight.data


def _draw(logits: np.ndarray, sampler: SamplerConfig, rng: np.random.Generator) -> int:
    if sampler.greedy:
        return int(np.argmax(logits))
    probs = top_k_filter(logits / sampler.temperature, sampler.top_k)
    cdf = np.cumsum(probs)
    if not np.isfinite(cdf[-1]) or cdf[-1] <= 0:
        raise SamplingError("next-token distribution has no mass")
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(probs) - 1))


def _rngs(sampler: SamplerConfig, n: int, rngs) -> list[np.random.Generator]:
    if rngs is not None:
        return list(rngs)
    return [np.random.default_rng(sampler.seed)] if n == 1 else [np.random.default_rng([sampler.seed, i]) for i in range(n)]


def sample_tokens(cond, sampler: SamplerConfig, model: GPT, grid_shape: tuple[int, int],
                  codebook_size: int, rngs: Sequence[np.random.Generator] | None = None) -> np.ndarray:
    """Draw an ``(h, w)`` token grid for ``cond`` (or ``(B, h, w)`` for a batch of conditionings).

    Each sequence uses its own generator: ``default_rng(seed)`` for a single
    conditioning, ``default_rng([seed, i])`` for row ``i`` of a batch, unless
    ``rngs`` is given. Only image tokens ``[0, codebook_size)`` can be drawn.
    """
    sampler.validate()
    cond = np.asarray(cond)
    single = cond.ndim == 1
    cond = cond[None] if single else cond
    h, w = grid_shape
    cfg = model.config
    _check_range(cond, cfg.vocab_size)
    if cond.shape[1] + h * w - 1 > cfg.context_length:
        raise ContractError("conditioning plus grid does not fit the context")
    gens = _rngs(sampler, len(cond), rngs)
    cache = KVCache(model, len(cond))
    logits = cache.extend(model, cond)
    out = np.zeros((len(cond), h * w), dtype=np.int64)
    for i in range(h * w):
        image_logits = logits[:, :codebook_size]
        out[:, i] = [_draw(row, sampler, g) for row, g in zip(image_logits, gens)]
        if i + 1 < h * w:
            logits = cache.extend(model, out[:, i:i + 1])
    grids = out.reshape(-1, h, w)
    return grids[0] if single else grids


def window_origin(r: int, c: int, global_shape: tuple[int, int], window: tuple[int, int]) -> tuple[int, int]:
    """Top-left of the window that holds ``(r, c)`` with the most already-generated context.

    In raster order everything above row ``r`` and left of ``c`` is done, so the
    target sits in the window's last row and column, clamped at the borders.
    """
    (H, W), (h, w) = global_shape, window
    return min(max(r - h + 1, 0), H - h), min(max(c - w + 1, 0), W - w)


def sliding_window_sample(layout: Sequence[LayoutObject], global_shape: tuple[int, int], window: tuple[int, int],
                          sampler: SamplerConfig, model: GPT, grid: GridSpec, vocab: VocabularyMap, n_max: int,
                          rng: np.random.Generator | None = None, coverage: np.ndarray | None = None) -> np.ndarray:
    """Token grid of ``global_shape`` generated with a ``window``-sized model.

    Layout coordinates stay global; the viewport tokens carry the window's
    footprint on the canvas. ``coverage`` (if given) counts visits per cell.
    """
    rng = rng if rng is not None else np.random.default_rng(sampler.seed)
    return sliding_window_sample_batch([layout], global_shape, window, sampler, model, grid, vocab, n_max,
                                       [rng], coverage)[0]


def sliding_window_sample_batch(layouts, global_shape, window, sampler: SamplerConfig, model: GPT,
                                grid: GridSpec, vocab: VocabularyMap, n_max: int,
                                rngs: Sequence[np.random.Generator], coverage: np.ndarray | None = None) -> np.ndarray:
    """Several layouts in lock step; every layout visits the same window positions."""
    sampler.validate()
    H, W = global_shape
    h, w = window
    if h > H or w > W:
        raise ContractError(f"window {window} larger than global grid {global_shape}")
    if not vocab.viewport:
        raise ContractError("sliding-window sampling needs a vocabulary with viewport tokens")
    if len(rngs) != len(layouts):
        raise ContractError("one generator per layout")
    out = np.zeros((len(layouts), H, W), dtype=np.int64)
    conds: dict[tuple[int, int], np.ndarray] = {}
    for r in range(H):
        for c in range(W):
            wr, wc = window_origin(r, c, global_shape, window)
            if (wr, wc) not in conds:
                vp = Viewport((wc / W, wr / H), ((wc + w) / W, (wr + h) / H))
                conds[(wr, wc)] = np.asarray([tokenize_layout(lay, n_max, grid, vocab, vp) for lay in layouts])
            local = (r - wr) * w + (c - wc)
            context = out[:, wr:wr + h, wc:wc + w].reshape(len(layouts), -1)[:, :local]
            logits = KVCache(model, len(layouts)).extend(model, np.concatenate([conds[(wr, wc)], context], axis=1))
            out[:, r, c] = [_draw(row[:vocab.codebook_size], sampler, g) for row, g in zip(logits, rngs)]
            if coverage is not None:
                coverage[r, c] += 1
    return out


# -- crops for training the windowed model ------------------------------------------

@dataclass
class CropSample:
    image: np.ndarray
    layout: list[LayoutObject]
    viewport: Viewport


def random_quadratic_crop(record, rng: np.random.Generator, min_size: int) -> CropSample | None:
    """Square crop of uniform random side in ``[min_size, min(W, H)]`` at a uniform position.

    The layout is passed through unchanged (global coordinates, nothing
    dropped); the viewport records where the crop sits on the canvas.
    Returns ``None`` when the image is smaller than ``min_size``.
    """
    image = record.image
    H, W = image.shape[:2]
    if min(H, W) < min_size:
        return None
    side = int(rng.integers(min_size, min(H, W) + 1))
    top = int(rng.integers(0, H - side + 1))
    left = int(rng.integers(0, W - side + 1))
    vp = Viewport((left / W, top / H), ((left + side) / W, (top + side) / H))
    return CropSample(image[top:top + side, left:left + side], list(record.layout), vp)
