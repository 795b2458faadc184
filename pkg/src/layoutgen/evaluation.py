"""Fréchet distances over learned features, and a palette-based layout check.

The feature network is a small convolutional classifier trained to name the
category of single-object crops from synthetic scenes; its penultimate layer
(global average pool, 64 channels) provides the features.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .errors import ContractError
from .images import box_pixels, center_crop, crop_box, resize_bilinear
from .layout_codec import LayoutObject
from .numerics import Conv2d, Linear, Module, Tensor
from .scene_data import SceneConfig, category_color, generate_dataset

FEATURE_DIM = 64
CROP_SIZE = 32


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int


def gaussian_stats(features) -> GaussianStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ContractError(f"need an (n >= 2, d) feature matrix, got shape {x.shape}")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (len(x) - 1)
    return GaussianStats(mu, 0.5 * (cov + cov.T), len(x))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Squared Fréchet distance between two Gaussians, clamped at 0."""
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise ContractError(f"feature dimensions differ: {a.mean.shape} vs {b.mean.shape}")
    for s in (a, b):
        if not (np.all(np.isfinite(s.mean)) and np.all(np.isfinite(s.cov))):
            raise ValueError("non-finite Gaussian statistics")
    root_a = _psd_sqrt(a.cov)
    inner = root_a @ b.cov @ root_a
    eig = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    trace_sqrt = np.sqrt(np.clip(eig, 0.0, None)).sum()
    diff = a.mean - b.mean
    d2 = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_sqrt
    return float(max(d2, 0.0))


# -- feature network ------------------------------------------------------------

class FeatureExtractor(Module):
    def __init__(self, n_classes: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.convs = [Conv2d(rng, 3, 32, 3), Conv2d(rng, 32, 48, 3, stride=2),
                      Conv2d(rng, 48, FEATURE_DIM, 3, stride=2), Conv2d(rng, FEATURE_DIM, FEATURE_DIM, 3, stride=2)]
        self.classifier = Linear(rng, FEATURE_DIM, n_classes)
        self.n_classes = n_classes

    def embed(self, x: Tensor) -> Tensor:
        h = x
        for conv in self.convs:
            h = nx.relu(conv(h))
        return h.mean(axis=(1, 2))

    def forward(self, x: Tensor) -> Tensor:
        return self.classifier(self.embed(x))

    def features(self, images: np.ndarray, chunk: int = 256) -> np.ndarray:
        """``(N, 32, 32, 3)`` images -> ``(N, 64)`` float64 features."""
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[1:] != (CROP_SIZE, CROP_SIZE, 3):
            raise ContractError(f"expected (N, {CROP_SIZE}, {CROP_SIZE}, 3) images, got {images.shape}")
        out = []
        with nx.no_grad():
            for i in range(0, len(images), chunk):
                out.append(self.embed(Tensor(images[i:i + chunk])).data.astype(np.float64))
        return np.concatenate(out) if out else np.zeros((0, FEATURE_DIM))

    def predict(self, images: np.ndarray) -> np.ndarray:
        with nx.no_grad():
            return self(Tensor(np.asarray(images, dtype=np.float32))).data.argmax(axis=1)


def object_crops(pairs: Iterable[tuple[np.ndarray, Sequence[LayoutObject]]], size: int = CROP_SIZE):
    """Bilinear ``size x size`` crops of every layout box, plus their categories."""
    crops, labels = [], []
    for image, layout in pairs:
        for obj in layout:
            if obj.area <= 0:
                raise ContractError("layout boxes must have positive area")
            crops.append(resize_bilinear(crop_box(image, obj.tl, obj.br), size, size))
            labels.append(obj.category)
    if not crops:
        return np.zeros((0, size, size, 3), np.float32), np.zeros(0, np.int64)
    return np.stack(crops), np.asarray(labels)


def train_feature_extractor(n_categories: int = 16, seed: int = 0, n_scenes: int = 1500, steps: int = 600,
                            batch: int = 64, scene_config: SceneConfig | None = None,
                            min_accuracy: float = 0.9) -> tuple[FeatureExtractor, float]:
    """Train on object crops of fresh synthetic scenes; returns (network, held-out accuracy).

    Raises when held-out accuracy falls below ``min_accuracy``: features from
    a network that cannot tell categories apart make the distances meaningless.
    """
    cfg = scene_config or SceneConfig(n_categories=n_categories)
    scenes = list(generate_dataset(n_scenes, seed + 1_000_003, cfg))
    crops, labels = object_crops((s.image, s.layout) for s in scenes)
    n_test = max(len(crops) // 10, 1)
    train_x, train_y, test_x, test_y = crops[n_test:], labels[n_test:], crops[:n_test], labels[:n_test]
    net = FeatureExtractor(n_categories, seed)
    opt = nx.Adam(net.parameters(), lr=2e-3)
    rng = np.random.default_rng([seed, 7])
    for _ in range(steps):
        idx = rng.integers(0, len(train_x), size=batch)
        x = train_x[idx]
        flip = rng.random(batch) < 0.5
        x[flip] = x[flip, :, ::-1]
        opt.zero_grad()
        loss = nx.softmax_cross_entropy(net(Tensor(x)), train_y[idx])
        nx.backward(loss)
        opt.step()
    accuracy = float(np.mean(net.predict(test_x) == test_y))
    if accuracy < min_accuracy:
        raise RuntimeError(f"feature extractor accuracy {accuracy:.3f} below the {min_accuracy} gate")
    return net, accuracy


# -- metrics ----------------------------------------------------------------------

def _whole_images(images: Sequence[np.ndarray], size: int) -> np.ndarray:
    return np.stack([resize_bilinear(center_crop(np.asarray(im)), size, size) for im in images])


def fid(real_images: Sequence[np.ndarray], fake_images: Sequence[np.ndarray], extractor: FeatureExtractor,
        size: int = CROP_SIZE) -> float:
    if len(real_images) < 2 or len(fake_images) < 2:
        raise ContractError("FID needs at least two images per side")
    fr = extractor.features(_whole_images(real_images, size))
    ff = extractor.features(_whole_images(fake_images, size))
    return frechet_distance(gaussian_stats(fr), gaussian_stats(ff))


def scene_fid(real, fake, extractor: FeatureExtractor, crop_size: int = CROP_SIZE) -> float:
    """Fréchet distance between features of per-object crops; both sides are (image, layout) pairs."""
    real_crops, _ = object_crops(real, crop_size)
    fake_crops, _ = object_crops(fake, crop_size)
    if len(real_crops) < 2 or len(fake_crops) < 2:
        raise ContractError("SceneFID needs at least two object crops per side")
    return frechet_distance(gaussian_stats(extractor.features(real_crops)),
                            gaussian_stats(extractor.features(fake_crops)))


def box_satisfied(image: np.ndarray, obj: LayoutObject, color: np.ndarray,
                  tolerance: float = 0.5, min_fraction: float = 0.5) -> bool:
    """Whether most of the box's central region (middle half per axis) shows ``color``."""
    h, w = image.shape[:2]
    y0, y1, x0, x1 = box_pixels(obj.tl, obj.br, h, w)
    dy, dx = (y1 - y0) // 4, (x1 - x0) // 4
    patch = image[y0 + dy:y1 - dy, x0 + dx:x1 - dx]
    close = np.linalg.norm(patch.astype(np.float64) - color, axis=-1) <= tolerance
    return bool(close.mean() >= min_fraction)


def box_consistency(samples, palette: np.ndarray | None = None, tolerance: float = 0.5,
                    min_fraction: float = 0.5) -> float:
    """Fraction of layout boxes whose interior matches the category's palette color."""
    samples = list(samples)
    if not samples:
        raise ContractError("box_consistency needs at least one sample")
    ok = total = 0
    for image, layout in samples:
        for obj in layout:
            if palette is None:
                color = category_color(obj.category)
            elif obj.category < len(palette):
                color = palette[obj.category]
            else:
                raise ContractError(f"category {obj.category} outside the palette")
            ok += box_satisfied(np.asarray(image), obj, color, tolerance, min_fraction)
            total += 1
    return ok / total if total else 0.0


def metric_report(fid_value: float, scene_fid_value: float, consistency: float,
                  n_real: int, n_fake: int, seed: int) -> dict:
    return {"fid": float(fid_value), "scene_fid": float(scene_fid_value), "box_consistency": float(consistency),
            "n_real": int(n_real), "n_fake": int(n_fake), "seed": int(seed)}


def write_report(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
