"""The five pipeline stages, shared by the command line and the acceptance tests.

All artifacts of one run live under a single output directory::

    <out>/data/annotations.json, data/images/*.png     gen-data
    <out>/vq/vq.ckpt, vq/log.jsonl                      train-vq
    <out>/ar/ar.ckpt, ar/log.jsonl                      train-ar
    <out>/samples/sample_<i>_seed<s>.png + annotations  sample
    <out>/eval/report.json, eval/extractor.ckpt         eval

Every random draw comes from a generator derived from the run seed, so a
(config, seed) pair fixes every artifact byte for byte; only the ``wall_ms``
field of log lines varies between runs.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .ar_transformer import GPT, ar_loss, random_quadratic_crop, sample_tokens, sliding_window_sample_batch
from .checkpoint import Checkpoint, load_checkpoint, restore_rng, rng_state, save_checkpoint
from .config import RunConfig
from .errors import ContractError, TrainingDivergedError
from .evaluation import (
    FeatureExtractor,
    box_consistency,
    fid,
    metric_report,
    scene_fid,
    train_feature_extractor,
    write_report,
)
from .images import load_png, resize_bilinear, save_png
from .layout_codec import FULL_VIEWPORT, LayoutObject, tokenize_layout
from .scene_data import (
    SceneDescriptor,
    SceneRecord,
    assign_splits,
    category_names,
    filter_dataset,
    flip_layout,
    generate_dataset,
    load_annotations,
    write_annotations,
)
from .vq_autoencoder import VQModel, VQTrainer, decode_tokens, encode_to_tokens


class MissingStageError(FileNotFoundError):
    """A stage needs an artifact that an earlier stage has not produced."""


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingStageError(f"missing {path} (run `{stage}` first)")
    return path


def data_dir(out: Path) -> Path:
    return Path(out) / "data"


def vq_checkpoint_path(out: Path) -> Path:
    return Path(out) / "vq" / "vq.ckpt"


def ar_checkpoint_path(out: Path) -> Path:
    return Path(out) / "ar" / "ar.ckpt"


class StepLog:
    """One JSON line per training step: ``{"step", <loss components>, "wall_ms"}``."""

    def __init__(self, path: Path, append: bool):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(path, "a" if append else "w")
        self.last = time.perf_counter()

    def write(self, step: int, losses: dict) -> None:
        now = time.perf_counter()
        entry = {"step": step, **{k: v for k, v in losses.items() if v is not None},
                 "wall_ms": round((now - self.last) * 1000.0, 3)}
        self.last = now
        self.fh.write(json.dumps(entry) + "\n")

    def close(self) -> None:
        self.fh.close()


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# -- gen-data -------------------------------------------------------------------------

def gen_data(cfg: RunConfig, out: Path) -> list[SceneDescriptor]:
    """Synthesize scenes, apply the dataset filter, assign splits, write PNGs and annotations."""
    root = data_dir(out)
    (root / "images").mkdir(parents=True, exist_ok=True)
    scenes = filter_dataset(list(generate_dataset(cfg.data.n_scenes, cfg.seed, cfg.scene_config())), cfg.filter_rule())
    splits = assign_splits(len(scenes), cfg.seed)
    descriptors = []
    for i, (scene, split) in enumerate(zip(scenes, splits)):
        name = f"images/{scene.source_id}.png"
        save_png(root / name, scene.image)
        descriptors.append(SceneDescriptor(i, name, scene.width, scene.height, scene.layout, split=split))
    write_annotations(root / "annotations.json", descriptors, category_names(cfg.data.n_categories))
    return descriptors


def load_scenes(path: Path, split: str | None = None) -> list[SceneRecord]:
    """Scenes from a data directory (or an annotation file next to its images)."""
    path = Path(path)
    ann = path / "annotations.json" if path.is_dir() else path
    _require(ann, "gen-data")
    records = load_annotations(ann).records
    if split is not None and any(r.split for r in records):
        records = [r for r in records if r.split == split]
    return [SceneRecord(load_png(ann.parent / r.file_name), r.layout, r.file_name) for r in records]


# -- shared augmentation ---------------------------------------------------------------

def _flip(record: SceneRecord, rng: np.random.Generator) -> SceneRecord:
    if rng.random() < 0.5:
        return SceneRecord(np.ascontiguousarray(record.image[:, ::-1]), flip_layout(record.layout), record.source_id)
    return record


def _crop_batch(scenes: Sequence[SceneRecord], rng: np.random.Generator, batch: int, min_crop: int, size: int):
    out = []
    for i in rng.integers(0, len(scenes), size=batch):
        crop = random_quadratic_crop(_flip(scenes[i], rng), rng, min_crop)
        out.append(resize_bilinear(crop.image, size, size))
    return np.stack(out)


# -- train-vq ---------------------------------------------------------------------------

@dataclass
class VQState:
    model: VQModel
    trainer: VQTrainer
    data_rng: np.random.Generator

    @classmethod
    def fresh(cls, cfg: RunConfig) -> "VQState":
        model = VQModel(cfg.autoencoder_config(), seed=cfg.seed)
        return cls(model, VQTrainer(model, seed=cfg.seed), np.random.default_rng([cfg.seed, 11]))

    def save(self, path: Path, cfg: RunConfig) -> None:
        tr = self.trainer
        arrays = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        arrays.update({f"adam.{k}": v for k, v in tr.opt.state_arrays().items()})
        if tr.disc is not None:
            arrays.update({f"disc.{k}": v for k, v in tr.disc.state_dict().items()})
            arrays.update({f"disc_adam.{k}": v for k, v in tr.disc_opt.state_arrays().items()})
        meta = {"stage": "vq", "adam_t": tr.opt.state.t, "usage": tr.usage.tolist(),
                "disc_adam_t": tr.disc_opt.state.t if tr.disc_opt else 0}
        rngs = {"trainer": rng_state(tr.rng), "data": rng_state(self.data_rng)}
        save_checkpoint(path, Checkpoint(cfg.to_dict(), tr.step_count, arrays, rngs, meta))

    @classmethod
    def load(cls, path: Path, cfg: RunConfig) -> "VQState":
        ckpt = load_checkpoint(path)
        state = cls.fresh(cfg)
        tr = state.trainer
        state.model.load_state_dict(_strip(ckpt.arrays, "model."))
        tr.opt.load_state_arrays(_strip(ckpt.arrays, "adam."), ckpt.meta["adam_t"])
        if tr.disc is not None:
            tr.disc.load_state_dict(_strip(ckpt.arrays, "disc."))
            tr.disc_opt.load_state_arrays(_strip(ckpt.arrays, "disc_adam."), ckpt.meta["disc_adam_t"])
        tr.usage = np.asarray(ckpt.meta["usage"], dtype=np.int64)
        tr.step_count = ckpt.step
        tr.rng = restore_rng(ckpt.rng_states["trainer"])
        state.data_rng = restore_rng(ckpt.rng_states["data"])
        return state


def _strip(arrays: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def load_vq_model(path: Path, cfg: RunConfig) -> VQModel:
    ckpt = load_checkpoint(_require(path, "train-vq"))
    model = VQModel(cfg.autoencoder_config(), seed=cfg.seed)
    model.load_state_dict(_strip(ckpt.arrays, "model."))
    return model


def _last_step(total: int, stop_at: int | None) -> int:
    return total if stop_at is None else min(total, stop_at)


def train_vq(cfg: RunConfig, out: Path, resume: bool = False, scenes: Sequence[SceneRecord] | None = None,
             stop_at: int | None = None) -> VQState:
    """Train to ``vq.steps`` (or checkpoint early at ``stop_at``, as if interrupted)."""
    ckpt_path = vq_checkpoint_path(out)
    if scenes is None:
        scenes = load_scenes(data_dir(out), "train")
    state = VQState.load(ckpt_path, cfg) if resume and ckpt_path.exists() else VQState.fresh(cfg)
    log = StepLog(ckpt_path.parent / "log.jsonl", append=resume)
    try:
        while state.trainer.step_count < _last_step(cfg.vq.steps, stop_at):
            batch = _crop_batch(scenes, state.data_rng, cfg.vq.batch_size, cfg.vq.min_crop, cfg.vq.image_size)
            losses = state.trainer.step(batch)
            log.write(state.trainer.step_count, losses)
    finally:
        log.close()
    state.save(ckpt_path, cfg)
    return state


# -- train-ar ---------------------------------------------------------------------------

def token_dataset(cfg: RunConfig, scenes: Sequence[SceneRecord], vq: VQModel) -> tuple[np.ndarray, np.ndarray]:
    """(conditioning, image tokens) pairs: one full-canvas view plus random crops per scene."""
    rng = np.random.default_rng([cfg.seed, 21])
    grid, vocab, n_max, size = cfg.grid(), cfg.vocabulary(), cfg.layout.n_max, cfg.vq.image_size
    conds, images, tokens = [], [], []
    for scene in scenes:
        for view in range(1 + cfg.ar.crops_per_scene):
            rec = _flip(scene, rng)
            if view == 0:
                image, viewport = rec.image, FULL_VIEWPORT
            else:
                crop = random_quadratic_crop(rec, rng, cfg.ar.min_crop)
                image, viewport = crop.image, crop.viewport
            conds.append(tokenize_layout(rec.layout, n_max, grid, vocab, viewport if vocab.viewport else None))
            images.append(resize_bilinear(image, size, size))
            # encode in bounded chunks (a multiple of the encoder's own batch) to cap memory
            if len(images) == 1024:
                tokens.append(encode_to_tokens(np.stack(images), vq))
                images = []
    if images:
        tokens.append(encode_to_tokens(np.stack(images), vq))
    grids = np.concatenate(tokens) if tokens else np.zeros((0, *cfg.latent_shape()), np.int64)
    return np.asarray(conds, dtype=np.int64), grids.reshape(len(grids), -1).astype(np.int64)


@dataclass
class ARState:
    model: GPT
    opt: nx.Adam
    data_rng: np.random.Generator
    step: int = 0

    @classmethod
    def fresh(cls, cfg: RunConfig) -> "ARState":
        model = GPT(cfg.transformer_config(), seed=cfg.seed)
        opt = nx.Adam(model.parameters(), lr=cfg.ar.lr, betas=(0.9, 0.95), clip_norm=1.0)
        return cls(model, opt, np.random.default_rng([cfg.seed, 31]))

    def save(self, path: Path, cfg: RunConfig) -> None:
        arrays = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        arrays.update({f"adam.{k}": v for k, v in self.opt.state_arrays().items()})
        rngs = {"data": rng_state(self.data_rng), "dropout": rng_state(self.model.dropout_rng)}
        save_checkpoint(path, Checkpoint(cfg.to_dict(), self.step, arrays, rngs,
                                         {"stage": "ar", "adam_t": self.opt.state.t}))

    @classmethod
    def load(cls, path: Path, cfg: RunConfig) -> "ARState":
        ckpt = load_checkpoint(path)
        state = cls.fresh(cfg)
        state.model.load_state_dict(_strip(ckpt.arrays, "model."))
        state.opt.load_state_arrays(_strip(ckpt.arrays, "adam."), ckpt.meta["adam_t"])
        state.data_rng = restore_rng(ckpt.rng_states["data"])
        state.model.dropout_rng = restore_rng(ckpt.rng_states["dropout"])
        state.step = ckpt.step
        return state


def ar_learning_rate(cfg: RunConfig, step: int) -> float:
    """Linear warm-up over the first 200 steps, then cosine decay to a tenth."""
    total = max(cfg.ar.steps, 1)
    warm = min(200, total)
    if step <= warm:
        return cfg.ar.lr * step / warm
    frac = (step - warm) / max(total - warm, 1)
    return cfg.ar.lr * (0.1 + 0.45 * (1.0 + np.cos(np.pi * min(frac, 1.0))))


def train_ar(cfg: RunConfig, out: Path, resume: bool = False,
             dataset: tuple[np.ndarray, np.ndarray] | None = None, stop_at: int | None = None) -> ARState:
    vq_path = _require(vq_checkpoint_path(out), "train-vq")
    if dataset is None:
        scenes = load_scenes(data_dir(out), "train")
        dataset = token_dataset(cfg, scenes, load_vq_model(vq_path, cfg))
    conds, tokens = dataset
    ckpt_path = ar_checkpoint_path(out)
    state = ARState.load(ckpt_path, cfg) if resume and ckpt_path.exists() else ARState.fresh(cfg)
    state.model.train()
    log = StepLog(ckpt_path.parent / "log.jsonl", append=resume)
    try:
        while state.step < _last_step(cfg.ar.steps, stop_at):
            state.step += 1
            idx = state.data_rng.integers(0, len(tokens), size=cfg.ar.batch_size)
            state.opt.state.lr = ar_learning_rate(cfg, state.step)
            state.opt.zero_grad()
            loss = ar_loss(tokens[idx], conds[idx], state.model)
            nll = loss.item()
            if not np.isfinite(nll):
                raise TrainingDivergedError(state.step, "nll", nll)
            nx.backward(loss)
            grad_norm = state.opt.step()
            log.write(state.step, {"nll": nll, "grad_norm": grad_norm, "lr": state.opt.state.lr})
    finally:
        log.close()
    state.save(ckpt_path, cfg)
    return state


def load_ar_model(path: Path, cfg: RunConfig) -> GPT:
    ckpt = load_checkpoint(_require(path, "train-ar"))
    model = GPT(cfg.transformer_config(), seed=cfg.seed)
    model.load_state_dict(_strip(ckpt.arrays, "model."))
    return model.eval()


# -- sample -------------------------------------------------------------------------------

def parse_grid(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ContractError(f"--grid expects <H>x<W>, got {text!r}") from None
    if h < 1 or w < 1:
        raise ContractError(f"--grid must be positive, got {text!r}")
    return h, w


def sample_layouts(cfg: RunConfig, out: Path, source: str) -> list[list[LayoutObject]]:
    if source == "test-split":
        ann = _require(data_dir(out) / "annotations.json", "gen-data")
        records = [r for r in load_annotations(ann).records if r.split == "test"]
    else:
        records = load_annotations(source).records
    return [r.layout for r in records[:cfg.sample.count]]


def generate_samples(cfg: RunConfig, layouts, vq: VQModel, ar: GPT, seed: int,
                     grid_shape: tuple[int, int] | None = None, temperature: float | None = None,
                     top_k: int | None = None, greedy: bool = False) -> np.ndarray:
    """Images for ``layouts``; sample ``i`` draws from ``default_rng([seed, i])``."""
    latent = cfg.latent_shape()
    grid_shape = grid_shape or latent
    base = cfg.sampler_config(seed)
    sampler = type(base)(base.temperature if temperature is None else temperature,
                         base.top_k if top_k is None else top_k, seed, greedy)
    grid, vocab, n_max = cfg.grid(), cfg.vocabulary(), cfg.layout.n_max
    images = []
    for lo in range(0, len(layouts), cfg.sample.batch_size):
        chunk = layouts[lo:lo + cfg.sample.batch_size]
        rngs = [np.random.default_rng([seed, lo + i]) for i in range(len(chunk))]
        if tuple(grid_shape) == tuple(latent):
            vp = FULL_VIEWPORT if vocab.viewport else None
            conds = np.asarray([tokenize_layout(lay, n_max, grid, vocab, vp) for lay in chunk])
            toks = sample_tokens(conds, sampler, ar, latent, vocab.codebook_size, rngs=rngs)
        else:
            toks = sliding_window_sample_batch(chunk, grid_shape, latent, sampler, ar, grid, vocab, n_max, rngs)
        images.append(decode_tokens(toks, vq))
    return np.concatenate(images) if images else np.zeros((0, 0, 0, 3), np.float32)


def run_sample(cfg: RunConfig, out: Path, seed: int, layout_source: str = "test-split",
               grid_shape: tuple[int, int] | None = None, temperature: float | None = None,
               top_k: int | None = None) -> list[Path]:
    vq = load_vq_model(vq_checkpoint_path(out), cfg)
    ar = load_ar_model(ar_checkpoint_path(out), cfg)
    layouts = sample_layouts(cfg, out, layout_source)
    images = generate_samples(cfg, layouts, vq, ar, seed, grid_shape, temperature, top_k)
    target = Path(out) / "samples"
    target.mkdir(parents=True, exist_ok=True)
    paths, descriptors = [], []
    for i, (image, layout) in enumerate(zip(images, layouts)):
        name = f"sample_{i}_seed{seed}.png"
        save_png(target / name, image)
        paths.append(target / name)
        descriptors.append(SceneDescriptor(i, name, image.shape[1], image.shape[0], layout))
    write_annotations(target / "annotations.json", descriptors, category_names(cfg.data.n_categories))
    return paths


# -- eval ------------------------------------------------------------------------------------

def feature_extractor(cfg: RunConfig, out: Path) -> FeatureExtractor:
    """Train (or reload) the metric backbone; deterministic in the run seed."""
    path = Path(out) / "eval" / "extractor.ckpt"
    net = FeatureExtractor(cfg.data.n_categories, seed=cfg.seed)
    if path.exists():
        net.load_state_dict(_strip(load_checkpoint(path).arrays, "model."))
        return net
    net, accuracy = train_feature_extractor(cfg.data.n_categories, cfg.seed, cfg.eval.extractor_scenes,
                                            cfg.eval.extractor_steps, scene_config=cfg.scene_config(),
                                            min_accuracy=cfg.eval.min_extractor_accuracy)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"model.{k}": v for k, v in net.state_dict().items()}
    save_checkpoint(path, Checkpoint(cfg.to_dict(), cfg.eval.extractor_steps, arrays, {},
                                     {"stage": "extractor", "accuracy": accuracy}))
    return net


def evaluate(cfg: RunConfig, out: Path, real: Path | None = None, fake: Path | None = None) -> dict:
    real_scenes = load_scenes(real or data_dir(out), "test")
    fake_scenes = load_scenes(_require(Path(fake or Path(out) / "samples"), "sample"))
    net = feature_extractor(cfg, out)
    fid_value = fid([s.image for s in real_scenes], [s.image for s in fake_scenes], net, cfg.eval.crop_size)
    sfid = scene_fid([(s.image, s.layout) for s in real_scenes], [(s.image, s.layout) for s in fake_scenes],
                     net, cfg.eval.crop_size)
    consistency = box_consistency((s.image, s.layout) for s in fake_scenes)
    report = metric_report(fid_value, sfid, consistency, len(real_scenes), len(fake_scenes), cfg.seed)
    write_report(Path(out) / "eval" / "report.json", report)
    return report
