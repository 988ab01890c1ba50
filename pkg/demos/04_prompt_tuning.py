"""Rename "circle" to "blob" so the text encoder no longer knows one of the
classes, then learn prompt embeddings for the frozen detector with one
and with ten prompts per class.

Needs base.ckpt from 02_overfit_and_probe.py.
"""
import logging
import os

from promptdet.shapes import toy_split
from promptdet.train import frozen_digest, load_checkpoint, tune_optimized_prompt

logging.basicConfig(level=logging.INFO, format="%(message)s")
steps = int(os.environ.get("STEPS", 600))

downstream = toy_split().renamed({"circle": "blob"})
print("downstream categories:", downstream.categories)

for M in (1, 10):
    model, _, cfg, _, _ = load_checkpoint("base.ckpt")
    model.freeze()
    before = frozen_digest(model)
    _, smap, rep = tune_optimized_prompt(model, downstream, cfg.with_overrides(regime="tune-prompt", steps=steps), M=M)
    print(f"M={M:2d}: zero-shot {rep['zero_shot_ap']:.3f} -> tuned {rep['tuned_ap']:.3f}"
          f"  ({smap.num_rows} prompt rows, base unchanged: {frozen_digest(model) == before})")
