"""Run configuration: flat ``section.key=value`` text files.

Every key has a default (see the dataclasses below). Lines starting with
``#`` and blank lines are ignored. Unknown keys are rejected so typos do not
silently fall back to defaults.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .ar_transformer import SamplerConfig, TransformerConfig
from .errors import ConfigError
from .layout_codec import GridSpec, VocabularyMap
from .scene_data import FilterRule, SceneConfig
from .vq_autoencoder import AutoencoderConfig


@dataclass
class DataSection:
    n_scenes: int = 10000
    canvas: int = 128
    n_categories: int = 16
    min_objects: int = 3
    max_objects: int = 6
    filter_min_objects: int = 3
    filter_max_objects: int = 8
    filter_min_area: float = 0.02


@dataclass
class VQSection:
    image_size: int = 64
    f_stages: int = 3
    base_channels: int = 32
    codebook_size: int = 256
    codebook_dim: int = 32
    beta: float = 0.25
    adv_weight: float = 0.0
    adv_warmup: int = 1000
    lr: float = 1e-3
    restart_dead_every: int = 50
    steps: int = 3000
    batch_size: int = 16
    min_crop: int = 64


@dataclass
class LayoutSection:
    n_max: int = 8
    n_positions: int = 1024
    viewport: bool = True


@dataclass
class ARSection:
    layers: int = 4
    heads: int = 4
    embd: int = 128
    dropout: float = 0.1
    context_length: int = 90
    vocab_size: int = 1297
    lr: float = 5e-4
    steps: int = 6000
    batch_size: int = 32
    crops_per_scene: int = 3
    min_crop: int = 64


@dataclass
class SampleSection:
    temperature: float = 1.0
    top_k: int = 100
    count: int = 500
    batch_size: int = 100


@dataclass
class EvalSection:
    crop_size: int = 32
    extractor_scenes: int = 1500
    extractor_steps: int = 600
    min_extractor_accuracy: float = 0.9


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    vq: VQSection = field(default_factory=VQSection)
    layout: LayoutSection = field(default_factory=LayoutSection)
    ar: ARSection = field(default_factory=ARSection)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- derived module configs -------------------------------------------------

    def scene_config(self) -> SceneConfig:
        d = self.data
        return SceneConfig(width=d.canvas, height=d.canvas, n_categories=d.n_categories,
                           min_objects=d.min_objects, max_objects=d.max_objects)

    def filter_rule(self) -> FilterRule:
        d = self.data
        return FilterRule(d.filter_min_objects, d.filter_max_objects, d.filter_min_area)

    def autoencoder_config(self) -> AutoencoderConfig:
        v = self.vq
        return AutoencoderConfig(width=v.image_size, height=v.image_size, f_stages=v.f_stages,
                                 base_channels=v.base_channels, codebook_size=v.codebook_size,
                                 codebook_dim=v.codebook_dim, beta=v.beta, adv_weight=v.adv_weight,
                                 adv_warmup=v.adv_warmup, lr=v.lr, restart_dead_every=v.restart_dead_every)

    def grid(self) -> GridSpec:
        return GridSpec(self.layout.n_positions)

    def vocabulary(self) -> VocabularyMap:
        return VocabularyMap.build(self.vq.codebook_size, self.data.n_categories, self.grid(), self.layout.viewport)

    def latent_shape(self) -> tuple[int, int]:
        side = self.vq.image_size >> self.vq.f_stages
        return side, side

    def transformer_config(self) -> TransformerConfig:
        a = self.ar
        return TransformerConfig(vocab_size=a.vocab_size, cond_length=self.vocabulary().conditioning_length(self.layout.n_max),
                                 context_length=a.context_length, n_layers=a.layers, n_heads=a.heads,
                                 n_embd=a.embd, dropout=a.dropout)

    def sampler_config(self, seed: int | None = None) -> SamplerConfig:
        return SamplerConfig(self.sample.temperature, self.sample.top_k, self.seed if seed is None else seed)

    # -- checks -----------------------------------------------------------------

    def validate(self) -> None:
        """Check every cross-module invariant; raises :class:`ConfigError` naming the first violation."""
        self.scene_config().validate()
        self.filter_rule()  # validates on construction
        self.autoencoder_config().validate()
        vocab = self.vocabulary()
        h, w = self.latent_shape()
        cond = vocab.conditioning_length(self.layout.n_max)
        if self.ar.context_length != cond + h * w:
            raise ConfigError("ar.context_length = 3*layout.n_max (+2 if layout.viewport) + h*w",
                              f"{self.ar.context_length} != {cond} + {h * w}")
        if self.ar.vocab_size != vocab.size:
            raise ConfigError("ar.vocab_size = codebook + categories + positions + 1",
                              f"{self.ar.vocab_size} != {vocab.size}")
        if self.data.max_objects > self.layout.n_max:
            raise ConfigError("data.max_objects <= layout.n_max", f"{self.data.max_objects} > {self.layout.n_max}")
        if self.data.filter_max_objects > self.layout.n_max:
            raise ConfigError("data.filter_max_objects <= layout.n_max",
                              f"{self.data.filter_max_objects} > {self.layout.n_max}")
        if not self.vq.min_crop <= self.data.canvas or not self.ar.min_crop <= self.data.canvas:
            raise ConfigError("vq.min_crop and ar.min_crop <= data.canvas")
        if self.data.n_scenes < 20:
            raise ConfigError("data.n_scenes >= 20", "train/val/test splits would be empty")
        for name in ("vq.steps", "vq.batch_size", "ar.steps", "ar.batch_size", "sample.count",
                     "sample.batch_size", "ar.crops_per_scene", "eval.extractor_steps"):
            if self.get(name) < 0 or (name.endswith("batch_size") and self.get(name) < 1):
                raise ConfigError(f"{name} must be non-negative (batch sizes positive)")
        self.transformer_config().validate()
        self.sampler_config().validate()

    # -- key/value access ---------------------------------------------------------

    def get(self, key: str):
        section, _, name = key.rpartition(".")
        return getattr(getattr(self, section) if section else self, name)

    def set(self, key: str, text: str) -> None:
        section, _, name = key.rpartition(".")
        target = getattr(self, section, None) if section else self
        if not dataclasses.is_dataclass(target):
            raise ConfigError("known configuration key", key)
        # annotations are strings here (postponed evaluation)
        types = {f.name: f.type for f in dataclasses.fields(target)}
        if types.get(name) not in ("int", "float", "bool"):
            raise ConfigError("known configuration key", key)
        setattr(target, name, _parse(types[name], text, key))

    def items(self) -> list[tuple[str, object]]:
        out = [("seed", self.seed)]
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                out.extend((f"{f.name}.{g.name}", getattr(value, g.name)) for g in dataclasses.fields(value))
        return out

    def dump(self) -> str:
        lines = []
        for key, value in self.items():
            lines.append(f"{key}={_format(value)}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {k: v for k, v in self.items()}


def _parse(kind: str, text: str, key: str):
    text = text.strip()
    try:
        if kind == "bool":
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        return int(text) if kind == "int" else float(text)
    except ValueError:
        raise ConfigError(f"{key} must be {kind}", repr(text)) from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError("lines have the form key=value", f"line {lineno}: {line!r}")
        cfg.set(key.strip(), value)
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def bundled_config(name: str) -> Path:
    return Path(__file__).with_name("configs") / f"{name}.cfg"
