"""Pre-train a toy detector on 32 scenes and ask two questions of it:
does it fit its training set, and does "red triangle" (never seen as a
pair) score above the same column prompted with other phrases?

STEPS=2000 (default) takes roughly 10 minutes on one CPU core. The
checkpoint goes to base.ckpt for the next two demos.
"""
import logging
import os

from promptdet.shapes import TOY_HELD_OUT, SceneSpec, TOY_CATEGORIES, toy_split
from promptdet.train import TrainConfig, compositional_probe, evaluate, pretrain, save_checkpoint

logging.basicConfig(level=logging.INFO, format="%(message)s")
steps = int(os.environ.get("STEPS", 2000))

split = toy_split()
print(f"{len(split.scenes)} scenes, categories: {split.categories}")
print("held out:", split.held_out)

cfg = TrainConfig(steps=steps, log_every=250)
model, aux, history = pretrain(split, cfg)
print(f"loss {history[0]['total']:.2f} -> {history[-1]['total']:.2f}")

ap = evaluate(model, split)
print(f"training-set AP@[.5:.95] {ap['mean']:.3f}")
for c, v in ap["per_class"].items():
    print(f"  {split.categories[c]:14s} {v:.3f}")

probe = compositional_probe(model, SceneSpec(TOY_CATEGORIES), TOY_HELD_OUT)
print(f"{probe['held_out']}: AP50 {probe['held_out_ap50']:.3f} vs control {probe['control_ap50']:.3f}")
for phrase, v in probe["control"].items():
    print(f"  prompted as {phrase!r}: {v:.3f}")

save_checkpoint("base.ckpt", model, cfg, steps, aux)
