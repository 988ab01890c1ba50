"""Distil the visual-prompt encoder towards the text prompts with the rest
of the detector frozen, then compare text-prompted and interactive
(box-prompted) AP.

Needs base.ckpt from 02_overfit_and_probe.py.
"""
import logging
import os

from promptdet.shapes import toy_split
from promptdet.train import (evaluate, frozen_digest, load_checkpoint, prompt_alignment, save_checkpoint,
                             train_visual_prompt)

logging.basicConfig(level=logging.INFO, format="%(message)s")
steps = int(os.environ.get("STEPS", 1000))

model, aux, cfg, _, _ = load_checkpoint("base.ckpt")
split = toy_split()
print("before:", prompt_alignment(model, split))

model.freeze()
model.visual.unfreeze()
base = frozen_digest(model)    # everything except the visual-prompt encoder
train_visual_prompt(model, split, cfg.with_overrides(regime="visual-prompt", steps=steps, log_every=200))
print("after: ", prompt_alignment(model, split))
print("frozen weights unchanged:", frozen_digest(model) == base)

text = evaluate(model, split, "text")["mean"]
inter = evaluate(model, split, "interactive")["mean"]
print(f"text AP {text:.3f}   interactive AP {inter:.3f}")
save_checkpoint("visual.ckpt", model, cfg, steps, aux)
