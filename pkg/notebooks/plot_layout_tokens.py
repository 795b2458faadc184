"""
From bounding boxes to tokens and back
======================================

A layout is a list of (category, top-left, bottom-right) boxes in normalized
coordinates. The codec turns it into a fixed-length token sequence that the
transformer reads before the image tokens.
"""

import numpy as np

from layoutgen.layout_codec import (
    GridSpec,
    LayoutObject,
    Viewport,
    VocabularyMap,
    decode_position,
    detokenize_layout,
    encode_position,
    tokenize_layout,
)
from layoutgen.scene_data import SceneConfig, category_names, generate_dataset

grid = GridSpec(1024)                     # 32 x 32 corner positions
vocab = VocabularyMap.build(256, 16, grid, viewport=True)
print("vocabulary:", vocab.size, "tokens; image tokens below", vocab.category_offset)
print("conditioning length for 8 objects:", vocab.conditioning_length(8))

###############################################################################
# Corners snap to the nearest grid point

for point in [(0.0, 0.0), (0.5, 0.5), (0.333, 0.9), (1.0, 1.0)]:
    p = encode_position(point, grid)
    print(point, "->", p, "->", tuple(round(v, 4) for v in decode_position(p, grid)))

###############################################################################
# A synthetic scene's layout

scene = next(iter(generate_dataset(1, 0, SceneConfig())))
names = category_names(16)
for obj in scene.layout:
    print(f"{names[obj.category]:>18}  tl={obj.tl}  br={obj.br}")

tokens = tokenize_layout(scene.layout, 8, grid, vocab)
print(tokens)
print([vocab.kind(t) for t in tokens[:6]])

back = detokenize_layout(tokens, grid, vocab)
err = max(max(abs(a - b) for a, b in zip((*o.tl, *o.br), (*r.tl, *r.br))) for o, r in zip(scene.layout, back))
print("largest corner error:", round(err, 5), "<= half a cell:", round(1 / (2 * (grid.n_col - 1)), 5))

###############################################################################
# Viewports
# ---------
# The last two tokens say which part of the canvas the image shows: the
# whole canvas by default, a sub-square when training on crops. Layout boxes
# stay in full-canvas coordinates either way.

crop = Viewport((0.25, 0.0), (0.75, 0.5))
with_view = tokenize_layout(scene.layout, 8, grid, vocab, crop)
print("full canvas:", tokens[-2:], " crop:", with_view[-2:])

rng = np.random.default_rng(1)
objs = [LayoutObject(int(c), (0.1, 0.1), (0.4, 0.6)) for c in rng.integers(0, 16, 3)]
print(detokenize_layout(tokenize_layout(objs, 8, grid, vocab), grid, vocab))
