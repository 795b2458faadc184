"""Two-stage layout-to-image synthesis at desk scale.

Stage 1 compresses images into short grids of codebook indices with a
vector-quantized autoencoder; stage 2 models those grids with a GPT-style
transformer conditioned on tokenized bounding-box layouts.
"""

__version__ = "0.1.0"
