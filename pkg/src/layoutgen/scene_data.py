"""Scene records: synthetic generation, COCO-style ingestion, filtering, augmentation.

Synthetic scenes are solid-colored rectangles, ellipses and triangles on a flat
or two-tone gradient background. Category ``c`` is drawn with shape
``SHAPES[c % 3]`` in color ``PALETTE[c % 8]``, so every category has a unique
(shape, color) pair for up to 24 categories and a known color for the
box-consistency metric.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import AnnotationError, ConfigError
from .layout_codec import LayoutObject

SHAPES = ("rectangle", "ellipse", "triangle")

PALETTE = np.array([
    [1.0, -1.0, -1.0],   # red
    [-1.0, 1.0, -1.0],   # green
    [-1.0, -1.0, 1.0],   # blue
    [1.0, 1.0, -1.0],    # yellow
    [-1.0, 1.0, 1.0],    # cyan
    [1.0, -1.0, 1.0],    # magenta
    [1.0, 0.0, -1.0],    # orange
    [1.0, 1.0, 1.0],     # white
], dtype=np.float32)

MAX_CATEGORIES = 24


def category_color(category: int) -> np.ndarray:
    return PALETTE[category % len(PALETTE)]


def category_shape(category: int) -> str:
    return SHAPES[category % len(SHAPES)]


def palette_for(n_categories: int) -> np.ndarray:
    return np.stack([category_color(c) for c in range(n_categories)])


@dataclass
class SceneRecord:
    image: np.ndarray
    layout: list[LayoutObject]
    source_id: str = ""

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass(frozen=True)
class SceneConfig:
    width: int = 128
    height: int = 128
    n_categories: int = 16
    min_objects: int = 3
    max_objects: int = 6
    min_size: float = 0.22   # object side, fraction of the canvas side
    max_size: float = 0.5
    max_occlusion: float = 0.2
    max_tries: int = 40

    def validate(self) -> None:
        if not 1 <= self.n_categories <= MAX_CATEGORIES:
            raise ConfigError("data.n_categories", f"must be in [1, {MAX_CATEGORIES}]")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError("data.min_objects <= data.max_objects")
        if not 0 < self.min_size <= self.max_size <= 1.0:
            raise ConfigError("0 < data.min_size <= data.max_size <= 1",
                              f"got {self.min_size}, {self.max_size}")
        if round(self.min_size * min(self.width, self.height)) < 2:
            raise ConfigError("data.min_size", "objects would be smaller than 2 pixels")


@dataclass(frozen=True)
class FilterRule:
    min_objects: int = 3
    max_objects: int = 8
    min_area_fraction: float = 0.02

    def __post_init__(self):
        if self.min_objects > self.max_objects:
            raise ConfigError("data.filter_min_objects <= data.filter_max_objects")
        if not 0.0 <= self.min_area_fraction < 1.0:
            raise ConfigError("data.filter_min_area in [0, 1)")


def _interior(box):
    """Middle half of a pixel box ``(x0, y0, x1, y1)`` along each axis."""
    x0, y0, x1, y1 = box
    dx, dy = (x1 - x0) / 4, (y1 - y0) / 4
    return x0 + dx, y0 + dy, x1 - dx, y1 - dy


def _overlap(a, b) -> float:
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    return max(w, 0.0) * max(h, 0.0)


def shape_mask(shape: str, box, height: int, width: int) -> np.ndarray:
    """Boolean mask of a shape inscribed in the pixel box ``(x0, y0, x1, y1)``."""
    x0, y0, x1, y1 = box
    ys = np.arange(height)[:, None] + 0.5
    xs = np.arange(width)[None, :] + 0.5
    inside = (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
    if shape == "rectangle":
        return inside
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    w, h = x1 - x0, y1 - y0
    if shape == "ellipse":
        return inside & (((xs - cx) / (w / 2)) ** 2 + ((ys - cy) / (h / 2)) ** 2 <= 1.0)
    if shape == "triangle":
        half = (ys - y0) / h * (w / 2)
        return inside & (np.abs(xs - cx) <= half)
    raise ValueError(f"unknown shape {shape!r}")


def _background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    def muted():
        return rng.uniform(-0.7, 0.1) + rng.uniform(-0.15, 0.15, size=3)

    a = muted()
    if rng.random() < 0.5:
        return np.broadcast_to(a, (height, width, 3)).astype(np.float32)
    b = muted()
    if rng.random() < 0.5:
        t = np.linspace(0.0, 1.0, height)[:, None, None]
    else:
        t = np.linspace(0.0, 1.0, width)[None, :, None]
    return np.broadcast_to(a * (1 - t) + b * t, (height, width, 3)).astype(np.float32)


def generate_synthetic_scene(rng: np.random.Generator, config: SceneConfig, source_id: str = "") -> SceneRecord:
    """Draw one scene back to front; recorded boxes are the exact pixel boxes.

    Placements that would cover more than ``max_occlusion`` of an earlier
    object's interior (its middle half) are re-drawn, up to ``max_tries``
    times, after which the object is skipped.
    """
    config.validate()
    H, W = config.height, config.width
    image = _background(rng, H, W).copy()
    n_objects = int(rng.integers(config.min_objects, config.max_objects + 1))
    side = min(W, H)
    lo = max(2, int(round(config.min_size * side)))
    hi = max(lo, int(round(config.max_size * side)))
    boxes: list[tuple[int, int, int, int]] = []
    layout: list[LayoutObject] = []
    for _ in range(n_objects):
        category = int(rng.integers(config.n_categories))
        for _ in range(config.max_tries):
            w = int(rng.integers(lo, hi + 1))
            h = int(rng.integers(lo, hi + 1))
            x0 = int(rng.integers(0, W - w + 1))
            y0 = int(rng.integers(0, H - h + 1))
            box = (x0, y0, x0 + w, y0 + h)
            ok = True
            for prev in boxes:
                inner = _interior(prev)
                area = (inner[2] - inner[0]) * (inner[3] - inner[1])
                if _overlap(box, inner) > config.max_occlusion * area:
                    ok = False
                    break
            if ok:
                break
        else:
            continue
        mask = shape_mask(category_shape(category), box, H, W)
        image[mask] = category_color(category)
        boxes.append(box)
        layout.append(LayoutObject(category, (box[0] / W, box[1] / H), (box[2] / W, box[3] / H)))
    return SceneRecord(image.astype(np.float32), layout, source_id)


def scene_rng(seed: int, index: int) -> np.random.Generator:
    """Per-record generator; depends only on (seed, index), never on scheduling."""
    return np.random.default_rng([seed, index])


def generate_dataset(n: int, seed: int, config: SceneConfig) -> Iterable[SceneRecord]:
    for i in range(n):
        yield generate_synthetic_scene(scene_rng(seed, i), config, source_id=f"scene_{i:06d}")


def assign_splits(n: int, seed: int, fractions=(0.9, 0.05, 0.05)) -> list[str]:
    """Seeded train/val/test assignment by record index."""
    order = np.random.default_rng([seed, 0x5EED]).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    splits = [""] * n
    for rank, idx in enumerate(order):
        splits[idx] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return splits


# -- filtering and augmentation ----------------------------------------------

def filter_dataset(records: Sequence, rule: FilterRule) -> list:
    """Keep records whose count of qualifying objects lies in the rule's range.

    An object qualifies when its normalized area is at least
    ``min_area_fraction``. With a positive threshold the surviving records keep
    only their qualifying objects.
    """
    out = []
    for rec in records:
        keep = [o for o in rec.layout if o.area >= rule.min_area_fraction]
        if rule.min_objects <= len(keep) <= rule.max_objects:
            out.append(dataclasses.replace(rec, layout=keep) if rule.min_area_fraction > 0 else rec)
    return out


def flip_layout(layout: Sequence[LayoutObject]) -> list[LayoutObject]:
    return [LayoutObject(o.category, (1.0 - o.br[0], o.tl[1]), (1.0 - o.tl[0], o.br[1])) for o in layout]


def augment(record: SceneRecord, rng: np.random.Generator, mode: str = "flips") -> SceneRecord:
    """Random horizontal flip; in ``"flips+crops"`` mode also a random square
    crop of side ``min(W, H)`` along the longer axis."""
    if mode not in ("flips", "flips+crops"):
        raise ValueError(f"unknown augmentation mode {mode!r}")
    image, layout = record.image, list(record.layout)
    if rng.random() < 0.5:
        image = image[:, ::-1]
        layout = flip_layout(layout)
    if mode == "flips+crops":
        H, W = image.shape[:2]
        s = min(H, W)
        horizontal = W >= H
        offset = int(rng.integers(0, (W if horizontal else H) - s + 1))
        n = W if horizontal else H
        axis = 0 if horizontal else 1
        image = image[:, offset:offset + s] if horizontal else image[offset:offset + s]
        cropped = []
        for o in layout:
            lo = min(max(o.tl[axis] * n - offset, 0.0), s) / s
            hi = min(max(o.br[axis] * n - offset, 0.0), s) / s
            if hi <= lo:
                continue
            tl, br = list(o.tl), list(o.br)
            tl[axis], br[axis] = lo, hi
            cropped.append(LayoutObject(o.category, tuple(tl), tuple(br)))
        layout = cropped
    return SceneRecord(np.ascontiguousarray(image), layout, record.source_id)


# -- annotation files ---------------------------------------------------------

@dataclass
class SceneDescriptor:
    """One annotated image without pixels."""

    image_id: int
    file_name: str
    width: int
    height: int
    layout: list[LayoutObject]
    flagged: bool = False
    split: str = ""

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "file_name": self.file_name,
            "width": self.width,
            "height": self.height,
            "split": self.split,
            "objects": [{"category_id": o.category, "bbox": o.to_pixel_bbox(self.width, self.height)}
                        for o in self.layout],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SceneDescriptor":
        w, h = int(d["width"]), int(d["height"])
        layout = [LayoutObject.from_pixel_bbox(o["category_id"], o["bbox"], w, h) for o in d["objects"]]
        return cls(int(d["image_id"]), d["file_name"], w, h, layout, split=d.get("split", ""))


@dataclass
class AnnotationSet:
    records: list[SceneDescriptor]
    category_ids: list[int] = field(default_factory=list)   # dense index -> original id
    category_names: list[str] = field(default_factory=list)
    n_clamped: int = 0

    def by_image_id(self) -> dict[int, SceneDescriptor]:
        return {r.image_id: r for r in self.records}

    def save_category_map(self, path) -> None:
        entries = [{"index": i, "id": cid, "name": name}
                   for i, (cid, name) in enumerate(zip(self.category_ids, self.category_names))]
        Path(path).write_text(json.dumps(entries, indent=1, sort_keys=True) + "\n")


def _parse_json(path) -> dict:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise AnnotationError(f"{path}: not UTF-8", exc.start) from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: {exc.msg}", len(text[:exc.pos].encode("utf-8"))) from None


def load_annotations(path) -> AnnotationSet:
    """Read a COCO-style file (``images``, ``annotations``, ``categories``).

    Pixel ``[x, y, width, height]`` boxes become normalized corners, category
    ids are remapped to a dense ``[0, C)`` range, and boxes reaching outside
    their image are clamped, flagging the record.
    """
    doc = _parse_json(path)
    try:
        images = doc["images"]
        annotations = doc["annotations"]
        categories = doc["categories"]
    except (KeyError, TypeError) as exc:
        raise AnnotationError(f"{path}: missing top-level field {exc}") from None
    cats = sorted(categories, key=lambda c: int(c["id"]))
    dense = {int(c["id"]): i for i, c in enumerate(cats)}
    records: dict[int, SceneDescriptor] = {}
    for im in images:
        rec = SceneDescriptor(int(im["id"]), str(im.get("file_name", "")), int(im["width"]), int(im["height"]), [],
                              split=str(im.get("split", "")))
        records[rec.image_id] = rec
    n_clamped = 0
    for ann in annotations:
        try:
            rec = records[int(ann["image_id"])]
            category = dense[int(ann["category_id"])]
            x, y, w, h = (float(v) for v in ann["bbox"])
        except KeyError as exc:
            raise AnnotationError(f"{path}: annotation refers to unknown id {exc}") from None
        W, H = rec.width, rec.height
        x0, y0 = min(max(x, 0.0), W), min(max(y, 0.0), H)
        x1, y1 = min(max(x + w, x0), W), min(max(y + h, y0), H)
        if (x0, y0, x1, y1) != (x, y, x + w, y + h):
            n_clamped += 1
            rec.flagged = True
        rec.layout.append(LayoutObject(category, (x0 / W, y0 / H), (x1 / W, y1 / H)))
    return AnnotationSet(list(records.values()), [int(c["id"]) for c in cats],
                         [str(c.get("name", c["id"])) for c in cats], n_clamped)


def write_annotations(path, records: Sequence[SceneDescriptor], category_names: Sequence[str]) -> None:
    images, annotations = [], []
    for rec in records:
        entry = {"id": rec.image_id, "file_name": rec.file_name, "width": rec.width, "height": rec.height}
        if rec.split:
            entry["split"] = rec.split
        images.append(entry)
        for obj in rec.layout:
            annotations.append({"id": len(annotations) + 1, "image_id": rec.image_id,
                                "category_id": obj.category, "bbox": obj.to_pixel_bbox(rec.width, rec.height)})
    doc = {"images": images, "annotations": annotations,
           "categories": [{"id": i, "name": n} for i, n in enumerate(category_names)]}
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def write_manifest(path, records: Iterable[SceneDescriptor]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def read_manifest(path) -> list[SceneDescriptor]:
    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(SceneDescriptor.from_json(json.loads(line)))
                except (json.JSONDecodeError, KeyError) as exc:
                    raise AnnotationError(f"{path}:{line_no}: {exc}") from None
    return out


def category_names(n_categories: int) -> list[str]:
    names = ("red", "green", "blue", "yellow", "cyan", "magenta", "orange", "white")
    return [f"{names[c % 8]}_{category_shape(c)}" for c in range(n_categories)]


def box_is_inside(obj: LayoutObject) -> bool:
    return all(0.0 <= v <= 1.0 for v in (*obj.tl, *obj.br)) and not math.isnan(obj.area)
