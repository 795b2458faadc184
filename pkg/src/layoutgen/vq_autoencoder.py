"""Stage 1: convolutional encoder/decoder around a learnable codebook.

Images go in as ``(H, W, 3)`` (or batched ``(B, H, W, 3)``) arrays in
``[-1, 1]`` and come out as ``(h, w)`` integer token grids with
``h = H / 2**f_stages``. There are no skip connections between encoder and
decoder, so everything the decoder sees passes through the codebook.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError, TrainingDivergedError
from .numerics import Conv2d, Module, Tensor
from .numerics import functional as F


@dataclass(frozen=True)
class AutoencoderConfig:
    width: int = 64
    height: int = 64
    f_stages: int = 3
    base_channels: int = 32
    codebook_size: int = 256
    codebook_dim: int = 32
    beta: float = 0.25
    adv_weight: float = 0.0
    adv_warmup: int = 1000
    disc_channels: int = 32
    lr: float = 1e-3
    restart_dead_every: int = 50

    @property
    def latent_height(self) -> int:
        return self.height >> self.f_stages

    @property
    def latent_width(self) -> int:
        return self.width >> self.f_stages

    def channels(self, level: int) -> int:
        return int(min(max(8, self.base_channels * 2 ** level // 2), 2 * self.base_channels))

    def validate(self) -> None:
        from .errors import ConfigError

        factor = 2 ** self.f_stages
        if self.width % factor or self.height % factor:
            raise ConfigError("vq image size divisible by 2^f_stages",
                              f"{self.width}x{self.height} vs {factor}")
        if self.codebook_size < 2:
            raise ConfigError("vq.codebook_size >= 2")
        if self.codebook_dim < 1 or self.f_stages < 1:
            raise ConfigError("vq.codebook_dim >= 1 and vq.f_stages >= 1")


class ResBlock(Module):
    def __init__(self, rng, channels: int):
        self.conv1 = Conv2d(rng, channels, channels, 3)
        self.conv2 = Conv2d(rng, channels, channels, 3)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(nx.silu(x))
        h = self.conv2(nx.silu(h))
        return x + h


class Encoder(Module):
    # the first halving is a lossless space-to-depth, so no conv runs at full resolution
    def __init__(self, rng, cfg: AutoencoderConfig):
        self.conv_in = Conv2d(rng, 12, cfg.channels(1), 3)
        self.down = [Conv2d(rng, cfg.channels(i), cfg.channels(i + 1), 3, stride=2) for i in range(1, cfg.f_stages)]
        self.blocks = [ResBlock(rng, cfg.channels(i + 1)) for i in range(1, cfg.f_stages)]
        self.conv_out = Conv2d(rng, cfg.channels(cfg.f_stages), cfg.codebook_dim, 1)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv_in(F.space_to_depth(x, 2))
        for down, block in zip(self.down, self.blocks):
            h = block(down(nx.silu(h)))
        return self.conv_out(nx.silu(h))


class Decoder(Module):
    # mirror image: the last doubling is a sub-pixel (depth-to-space) output layer
    def __init__(self, rng, cfg: AutoencoderConfig):
        top = cfg.channels(cfg.f_stages)
        self.conv_in = Conv2d(rng, cfg.codebook_dim, top, 3)
        self.mid = ResBlock(rng, top)
        levels = list(reversed(range(1, cfg.f_stages)))
        self.up = [Conv2d(rng, cfg.channels(i + 1), cfg.channels(i), 3) for i in levels]
        self.blocks = [ResBlock(rng, cfg.channels(i)) for i in levels if i > 1]
        self.conv_out = Conv2d(rng, cfg.channels(1), 12, 3)

    def forward(self, z: Tensor) -> Tensor:
        h = self.mid(self.conv_in(z))
        for i, up in enumerate(self.up):
            h = up(F.upsample_nearest(h, 2))
            if i < len(self.blocks):
                h = self.blocks[i](h)
        return nx.tanh(F.depth_to_space(self.conv_out(nx.silu(h)), 2))


class PatchDiscriminator(Module):
    """Strided convolutions ending in one realism score per receptive-field patch."""

    def __init__(self, rng, cfg: AutoencoderConfig, n_layers: int = 3):
        ch = cfg.disc_channels
        widths = [3] + [ch * min(2 ** i, 4) for i in range(n_layers)]
        self.convs = [Conv2d(rng, widths[i], widths[i + 1], 4, stride=2, padding=1) for i in range(n_layers)]
        self.head = Conv2d(rng, widths[-1], 1, 3)
        self.size = (cfg.height, cfg.width)

    def forward(self, x: Tensor) -> Tensor:
        if tuple(x.shape[1:3]) != self.size:
            raise ContractError(f"discriminator expects {self.size} images, got {x.shape[1:3]}")
        h = x
        for conv in self.convs:
            h = nx.leaky_relu(conv(h), 0.2)
        return self.head(h)[..., 0]


class VQModel(Module):
    def __init__(self, cfg: AutoencoderConfig, seed: int = 0):
        cfg.validate()
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.encoder = Encoder(rng, cfg)
        self.decoder = Decoder(rng, cfg)
        k = cfg.codebook_size
        self.codebook = nx.parameter(rng.uniform(-1.0 / k, 1.0 / k, size=(k, cfg.codebook_dim)))


def quantize_latents(latents: np.ndarray, codebook: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest codebook row per latent vector (squared Euclidean, lowest index on ties).

    ``latents`` is ``(..., n_z)``; returns integer tokens of shape ``latents.shape[:-1]``
    and the selected rows.
    """
    codebook = np.asarray(codebook)
    if codebook.ndim != 2 or codebook.shape[0] == 0:
        raise ContractError("codebook must be a non-empty (|Z|, n_z) matrix")
    latents = np.asarray(latents)
    if latents.shape[-1] != codebook.shape[1]:
        raise ContractError(f"latent dimension {latents.shape[-1]} != codebook dimension {codebook.shape[1]}")
    flat = latents.reshape(-1, codebook.shape[1]).astype(np.float64)
    cb = codebook.astype(np.float64)
    dist = (flat * flat).sum(1, keepdims=True) - 2.0 * flat @ cb.T + (cb * cb).sum(1)[None, :]
    tokens = np.argmin(dist, axis=1)
    return tokens.reshape(latents.shape[:-1]), codebook[tokens].reshape(latents.shape)


def _as_batch(images: np.ndarray, cfg: AutoencoderConfig) -> tuple[np.ndarray, bool]:
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 3
    batch = images[None] if single else images
    if batch.ndim != 4 or batch.shape[1:] != (cfg.height, cfg.width, 3):
        raise ContractError(f"expected ({cfg.height}, {cfg.width}, 3) images, got {images.shape}")
    return batch, single


def encode_to_tokens(images: np.ndarray, model: VQModel, chunk: int = 64) -> np.ndarray:
    """Token grid ``(h, w)`` for one image, or ``(B, h, w)`` for a batch."""
    batch, single = _as_batch(images, model.config)
    out = []
    with nx.no_grad():
        for i in range(0, len(batch), chunk):
            z = model.encoder(Tensor(batch[i:i + chunk])).data
            out.append(quantize_latents(z, model.codebook.data)[0])
    tokens = np.concatenate(out) if out else np.zeros((0, model.config.latent_height, model.config.latent_width), int)
    return tokens[0] if single else tokens


def decode_tokens(tokens: np.ndarray, model: VQModel, chunk: int = 64) -> np.ndarray:
    """Images in ``[-1, 1]`` for a ``(h, w)`` grid or a ``(B, h, w)`` batch of grids."""
    tokens = np.asarray(tokens)
    single = tokens.ndim == 2
    batch = tokens[None] if single else tokens
    k = model.config.codebook_size
    if not np.issubdtype(batch.dtype, np.integer) or batch.min() < 0 or batch.max() >= k:
        raise ContractError(f"tokens must be integers in [0, {k})")
    out = []
    with nx.no_grad():
        for i in range(0, len(batch), chunk):
            z = model.codebook.data[batch[i:i + chunk]]
            out.append(model.decoder(Tensor(z)).data)
    images = np.concatenate(out)
    return images[0] if single else images


def discriminator_logits(images: np.ndarray, disc: PatchDiscriminator) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 3
    with nx.no_grad():
        scores = disc(Tensor(images[None] if single else images)).data
    return scores[0] if single else scores


def hinge_d_loss(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    return nx.mean(nx.relu(1.0 - real_scores)) + nx.mean(nx.relu(1.0 + fake_scores))


class VQTrainer:
    """Optimizer state and the training step for the autoencoder.

    The discriminator and its optimizer exist only when ``adv_weight > 0``.
    Dead codes (unused since the last restart) are re-seeded from random
    encoder outputs of the current batch every ``restart_dead_every`` steps.
    """

    def __init__(self, model: VQModel, seed: int = 0):
        cfg = model.config
        self.model = model
        self.rng = np.random.default_rng([seed, 1])
        self.opt = nx.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.99))
        self.disc = PatchDiscriminator(np.random.default_rng([seed, 2]), cfg) if cfg.adv_weight > 0 else None
        self.disc_opt = nx.Adam(self.disc.parameters(), lr=cfg.lr, betas=(0.5, 0.9)) if self.disc else None
        self.step_count = 0
        self.usage = np.zeros(cfg.codebook_size, dtype=np.int64)

    def _check(self, report: dict) -> None:
        for name, value in report.items():
            if value is not None and not np.isfinite(value):
                raise TrainingDivergedError(self.step_count, name, value)

    def step(self, images: np.ndarray) -> dict:
        cfg = self.model.config
        batch, _ = _as_batch(images, cfg)
        if len(batch) == 0:
            raise ContractError("empty batch")
        self.step_count += 1
        model = self.model
        x = Tensor(batch)
        z_e = model.encoder(x)
        tokens, z_q = quantize_latents(z_e.data, model.codebook.data)
        codebook_loss = F.mse_loss(F.embedding(model.codebook, tokens), z_e.detach())
        commitment = F.mse_loss(z_e, z_q) * cfg.beta
        recon_img = model.decoder(F.straight_through(z_e, z_q))
        reconstruction = F.mse_loss(recon_img, batch)
        total = reconstruction + codebook_loss + commitment
        adversarial = None
        adv_active = self.disc is not None and self.step_count > cfg.adv_warmup
        if adv_active:
            g_adv = -nx.mean(self.disc(recon_img))
            total = total + g_adv * cfg.adv_weight
            adversarial = g_adv.item()
        report = {"reconstruction": reconstruction.item(), "codebook": codebook_loss.item(),
                  "commitment": commitment.item(), "adversarial": adversarial}
        self._check(report)
        self.opt.zero_grad()
        nx.backward(total)
        self.opt.step()
        if adv_active:
            self.disc_opt.zero_grad()
            d_loss = hinge_d_loss(self.disc(x), self.disc(recon_img.detach()))
            report["discriminator"] = d_loss.item()
            self._check(report)
            nx.backward(d_loss)
            self.disc_opt.step()
        self.usage += np.bincount(tokens.reshape(-1), minlength=cfg.codebook_size)
        if self.step_count == 1 or (cfg.restart_dead_every and self.step_count % cfg.restart_dead_every == 0):
            self._restart_dead_codes(z_e.data.reshape(-1, cfg.codebook_dim))
        return report

    def _restart_dead_codes(self, latents: np.ndarray) -> None:
        dead = np.flatnonzero(self.usage == 0)
        if len(dead):
            picks = self.rng.integers(0, len(latents), size=len(dead))
            noise = self.rng.normal(0.0, 1e-3, size=(len(dead), latents.shape[1]))
            self.model.codebook.data[dead] = (latents[picks] + noise).astype(np.float32)
            self.opt.state.m[self._codebook_index][dead] = 0.0
            self.opt.state.v[self._codebook_index][dead] = 0.0
        self.usage[:] = 0

    @property
    def _codebook_index(self) -> int:
        return next(i for i, p in enumerate(self.opt.params) if p is self.model.codebook)


def codebook_usage(tokens: np.ndarray, codebook_size: int) -> float:
    """Fraction of codebook entries selected at least once."""
    return float(np.count_nonzero(np.bincount(np.asarray(tokens).reshape(-1), minlength=codebook_size))) / codebook_size
