"""Bounding-box layouts <-> fixed-length conditioning token sequences.

Positions are snapped to the intersections of a virtual ``n_col x n_row``
grid numbered in raster-scan order, so each object costs three tokens:
category, top-left position, bottom-right position. Unused object slots are
padded with null-token triples. When the vocabulary carries viewport tokens,
two more position tokens (window top-left, bottom-right) follow the triples.

All token ids live in one shared vocabulary::

    [0, |Z|)                      image tokens
    [|Z|, |Z| + C)                categories
    [|Z| + C, |Z| + C + P)        grid positions, P = n_col * n_row
    |Z| + C + P                   null
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .errors import CapacityError, ContractError, LayoutParseError

Point = tuple[float, float]


@dataclass(frozen=True)
class LayoutObject:
    category: int
    tl: Point
    br: Point

    def __post_init__(self):
        if not (self.tl[0] <= self.br[0] and self.tl[1] <= self.br[1]):
            raise ContractError(f"corners not ordered: tl={self.tl} br={self.br}")

    @property
    def width(self) -> float:
        return self.br[0] - self.tl[0]

    @property
    def height(self) -> float:
        return self.br[1] - self.tl[1]

    @property
    def area(self) -> float:
        return self.width * self.height

    @classmethod
    def from_pixel_bbox(cls, category: int, bbox: Sequence[float], width: int, height: int) -> "LayoutObject":
        """``bbox`` is ``[x, y, w, h]`` in pixels, as in COCO annotations."""
        x, y, w, h = (float(v) for v in bbox)
        return cls(int(category), (x / width, y / height), ((x + w) / width, (y + h) / height))

    def to_pixel_bbox(self, width: int, height: int) -> list[float]:
        return [self.tl[0] * width, self.tl[1] * height, self.width * width, self.height * height]

    def to_dict(self) -> dict:
        return {"category": self.category, "tl": list(self.tl), "br": list(self.br)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayoutObject":
        return cls(int(d["category"]), tuple(d["tl"]), tuple(d["br"]))


@dataclass(frozen=True)
class GridSpec:
    n_positions: int = 1024

    def __post_init__(self):
        if self.n_positions < 4:
            raise ContractError("need at least a 2x2 grid of positions")

    @property
    def n_col(self) -> int:
        return math.isqrt(self.n_positions)

    @property
    def n_row(self) -> int:
        return self.n_positions // self.n_col

    @property
    def size(self) -> int:
        """Number of usable position tokens."""
        return self.n_col * self.n_row


@dataclass(frozen=True)
class Viewport:
    tl: Point = (0.0, 0.0)
    br: Point = (1.0, 1.0)

    def __post_init__(self):
        for v in (*self.tl, *self.br):
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"viewport corner outside [0, 1]: {self.tl} {self.br}")
        if not (self.tl[0] <= self.br[0] and self.tl[1] <= self.br[1]):
            raise ContractError("viewport corners not ordered")

    @property
    def area(self) -> float:
        return (self.br[0] - self.tl[0]) * (self.br[1] - self.tl[1])


FULL_VIEWPORT = Viewport()


@dataclass(frozen=True)
class VocabularyMap:
    codebook_size: int
    n_categories: int
    n_grid_positions: int
    viewport: bool = False

    @classmethod
    def build(cls, codebook_size: int, n_categories: int, grid: GridSpec, viewport: bool = False) -> "VocabularyMap":
        return cls(codebook_size, n_categories, grid.size, viewport)

    @property
    def category_offset(self) -> int:
        return self.codebook_size

    @property
    def position_offset(self) -> int:
        return self.codebook_size + self.n_categories

    @property
    def null_token(self) -> int:
        return self.position_offset + self.n_grid_positions

    @property
    def size(self) -> int:
        return self.null_token + 1

    def conditioning_length(self, n_max: int) -> int:
        return 3 * n_max + (2 if self.viewport else 0)

    def category_token(self, category: int) -> int:
        if not 0 <= category < self.n_categories:
            raise ContractError(f"category {category} outside [0, {self.n_categories})")
        return self.category_offset + category

    def position_token(self, p: int) -> int:
        return self.position_offset + p

    def kind(self, token: int) -> str:
        if token < 0:
            raise ContractError(f"negative token {token}")
        if token < self.codebook_size:
            return "image"
        if token < self.position_offset:
            return "category"
        if token < self.null_token:
            return "position"
        if token == self.null_token:
            return "null"
        raise ContractError(f"token {token} outside vocabulary of size {self.size}")


def encode_position(point: Point, grid: GridSpec) -> int:
    """Snap a normalized point to the nearest grid intersection."""
    x, y = point
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise ContractError(f"point {point} outside [0, 1]^2")
    col = math.floor(x * (grid.n_col - 1) + 0.5)
    row = math.floor(y * (grid.n_row - 1) + 0.5)
    return row * grid.n_col + col


def decode_position(p: int, grid: GridSpec) -> Point:
    if not 0 <= p < grid.size:
        raise ContractError(f"position {p} outside [0, {grid.size})")
    col, row = p % grid.n_col, p // grid.n_col
    return col / (grid.n_col - 1), row / (grid.n_row - 1)


def viewport_tokens(viewport: Viewport, grid: GridSpec, vocab: VocabularyMap) -> tuple[int, int]:
    if viewport.area <= 0.0:
        raise ContractError("viewport has zero area")
    return (vocab.position_token(encode_position(viewport.tl, grid)),
            vocab.position_token(encode_position(viewport.br, grid)))


def tokenize_layout(objects: Sequence[LayoutObject], n_max: int, grid: GridSpec, vocab: VocabularyMap,
                    viewport: Viewport | None = None) -> list[int]:
    """Fixed-length conditioning sequence; objects keep their input order.

    With a viewport-enabled vocabulary the two viewport tokens are appended
    (the full canvas when ``viewport`` is None). Layout coordinates are never
    rescaled to the viewport.
    """
    if len(objects) > n_max:
        raise CapacityError(f"{len(objects)} objects exceed n_max={n_max}")
    tokens: list[int] = []
    for obj in objects:
        tokens.append(vocab.category_token(obj.category))
        tokens.append(vocab.position_token(encode_position(obj.tl, grid)))
        tokens.append(vocab.position_token(encode_position(obj.br, grid)))
    tokens.extend([vocab.null_token] * (3 * (n_max - len(objects))))
    if vocab.viewport:
        tokens.extend(viewport_tokens(viewport or FULL_VIEWPORT, grid, vocab))
    elif viewport is not None:
        raise ContractError("vocabulary has no viewport tokens")
    return tokens


def _position(token: int, slot: int, grid: GridSpec, vocab: VocabularyMap) -> Point:
    kind = _checked_kind(token, slot, vocab)
    if kind != "position":
        raise LayoutParseError(slot, f"expected a position token, got {kind} token {token}")
    return decode_position(token - vocab.position_offset, grid)


def _checked_kind(token: int, slot: int, vocab: VocabularyMap) -> str:
    try:
        return vocab.kind(int(token))
    except ContractError as exc:
        raise LayoutParseError(slot, str(exc)) from None


def detokenize_layout(tokens: Sequence[int], grid: GridSpec, vocab: VocabularyMap) -> list[LayoutObject]:
    """Inverse of :func:`tokenize_layout` up to grid quantization."""
    n_layout = len(tokens) - (2 if vocab.viewport else 0)
    if n_layout < 0 or n_layout % 3:
        raise LayoutParseError(len(tokens), f"length {len(tokens)} is not a whole number of triples")
    objects: list[LayoutObject] = []
    padding = False
    for start in range(0, n_layout, 3):
        triple = [int(t) for t in tokens[start:start + 3]]
        kinds = [_checked_kind(t, start + i, vocab) for i, t in enumerate(triple)]
        if kinds[0] == "null":
            for i, kind in enumerate(kinds[1:], 1):
                if kind != "null":
                    raise LayoutParseError(start + i, f"{kind} token inside a null triple")
            padding = True
            continue
        if padding:
            raise LayoutParseError(start, "object triple after null padding")
        if kinds[0] != "category":
            raise LayoutParseError(start, f"expected a category token, got {kinds[0]} token {triple[0]}")
        tl = _position(triple[1], start + 1, grid, vocab)
        br = _position(triple[2], start + 2, grid, vocab)
        if not (tl[0] <= br[0] and tl[1] <= br[1]):
            raise LayoutParseError(start + 2, "bottom-right corner precedes top-left corner")
        objects.append(LayoutObject(triple[0] - vocab.category_offset, tl, br))
    if vocab.viewport:
        for i in (n_layout, n_layout + 1):
            _position(int(tokens[i]), i, grid, vocab)
    return objects


def decode_viewport(tokens: Sequence[int], grid: GridSpec, vocab: VocabularyMap) -> Viewport:
    if not vocab.viewport:
        raise ContractError("vocabulary has no viewport tokens")
    n = len(tokens)
    return Viewport(_position(int(tokens[n - 2]), n - 2, grid, vocab),
                    _position(int(tokens[n - 1]), n - 1, grid, vocab))
