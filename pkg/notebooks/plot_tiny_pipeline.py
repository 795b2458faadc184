"""
The two stages end to end, at toy size
======================================

Same code path as the ``layoutgen`` command, with the bundled ``smoke``
configuration stretched a little so something is learned. Takes about a
minute; the desk configuration needs about an hour.
"""

import tempfile
from pathlib import Path

import numpy as np

from layoutgen import pipeline
from layoutgen.config import bundled_config, load_config
from layoutgen.evaluation import box_consistency
from layoutgen.images import resize_bilinear
from layoutgen.vq_autoencoder import codebook_usage, encode_to_tokens

cfg = load_config(bundled_config("smoke"))
cfg.data.n_scenes = 200
cfg.vq.steps, cfg.vq.batch_size = 150, 8
cfg.ar.steps, cfg.ar.batch_size = 150, 8
cfg.validate()
out = Path(tempfile.mkdtemp(prefix="layoutgen_"))
print("run directory:", out)

records = pipeline.gen_data(cfg, out)
print(len(records), "scenes;", sum(r.split == "test" for r in records), "held out")

###############################################################################
# Stage 1: the VQ autoencoder
# ---------------------------

vq_state = pipeline.train_vq(cfg, out)
log = pipeline.read_log(out / "vq" / "log.jsonl")
print("reconstruction MSE", round(log[0]["reconstruction"], 4), "->", round(log[-1]["reconstruction"], 4))

scenes = pipeline.load_scenes(pipeline.data_dir(out), "test")
small = np.stack([resize_bilinear(s.image, 64, 64) for s in scenes])
tokens = encode_to_tokens(small, vq_state.model)
print("token grid", tokens.shape[1:], "codebook usage", codebook_usage(tokens, cfg.vq.codebook_size))

###############################################################################
# Stage 2: the layout-conditioned transformer
# -------------------------------------------

ar_state = pipeline.train_ar(cfg, out)
log = pipeline.read_log(out / "ar" / "log.jsonl")
print("nll per token", round(log[0]["nll"], 3), "->", round(log[-1]["nll"], 3),
      f"(uniform over the codebook: {np.log(cfg.vq.codebook_size):.3f})")

###############################################################################
# Sampling and metrics

paths = pipeline.run_sample(cfg, out, seed=0)
print("wrote", [p.name for p in paths])
fake = pipeline.load_scenes(out / "samples")
print("box consistency of samples:", box_consistency((s.image, s.layout) for s in fake))
print("box consistency of real scenes:", box_consistency((s.image, s.layout) for s in scenes))

# a larger latent grid is filled window by window
wide = pipeline.generate_samples(cfg, [scenes[0].layout], vq_state.model, ar_state.model.eval(), 0, grid_shape=(12, 12))
print("sliding-window sample:", wide.shape)
