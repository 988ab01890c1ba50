"""Toy-scale ablation matrix over the five design toggles.

Rows are cumulative: a base model with the full
hybrid encoder and no auxiliary training terms, the encoder with both fusion
stages removed, MFG alone removed, then the prompt multi-label loss, the aux
head on top of it, and finally ten prompts per class during tuning.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .shapes import BenchmarkSplit
from .train import TrainConfig, evaluate, frozen_digest, pretrain, tune_optimized_prompt

log = logging.getLogger(__name__)

TOGGLES = ("psf", "mfg", "prompt-loss", "aux-head", "super-class")


@dataclass(frozen=True)
class Row:
    name: str
    toggle: str | None
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    super_class: int = 1


ROWS = (
    Row("base", None, {}, {"use_aux": False, "use_prompt_loss": False}),
    Row("no-fusion-encoder", "psf", {"use_psf": False, "use_mfg": False}, {"use_aux": False, "use_prompt_loss": False}),
    Row("no-mfg", "mfg", {"use_mfg": False}, {"use_aux": False, "use_prompt_loss": False}),
    Row("prompt-loss", "prompt-loss", {}, {"use_aux": False, "use_prompt_loss": True}),
    Row("prompt-loss+aux-head", "aux-head", {}, {"use_aux": True, "use_prompt_loss": True}),
    Row("prompt-loss+aux-head+super-class", "super-class", {}, {"use_aux": True, "use_prompt_loss": True}, 10),
)


def rows_for(toggles) -> list[Row]:
    toggles = list(TOGGLES if not toggles else toggles)
    bad = [t for t in toggles if t not in TOGGLES]
    if bad:
        raise ValueError(f"unknown toggle(s) {bad}; choose from {TOGGLES}")
    return [r for r in ROWS if r.toggle is None or r.toggle in toggles]


def _digest(module) -> str:
    state = module.state_dict()
    return ckpt.tensor_digest(state, list(state))


def run_ablation(train_split: BenchmarkSplit, val_split: BenchmarkSplit, tune_split: BenchmarkSplit,
                 cfg: TrainConfig, toggles=None, tune_steps: int = 200) -> dict:
    """Train each requested row, evaluate zero-shot text AP on ``val_split`` and
    tuned-prompt AP on ``tune_split``, and run the structural checks."""
    rows = rows_for(toggles)
    report = {"rows": [], "config": cfg.to_dict(), "tune_steps": tune_steps}
    trained = {}
    for row in rows:
        t0 = time.time()
        key = (tuple(sorted(row.model.items())), tuple(sorted(row.train.items())))
        rcfg = cfg.with_overrides(model=dict(row.model), **row.train)
        checks = {}
        if key in trained:                      # the super-class row only changes tuning
            model, aux_changed, history = trained[key]
        else:
            from .model import AuxiliarySupervision
            aux = AuxiliarySupervision(rcfg.model.d, rcfg.seed)
            aux_before = _digest(aux)
            model, aux, history = pretrain(train_split, rcfg, aux=aux)
            aux_changed = _digest(aux) != aux_before
            trained[key] = (model, aux_changed, history)
        checks["losses_finite"] = all(math.isfinite(h["total"]) for h in history)
        checks["aux_trained_iff_enabled"] = aux_changed == (rcfg.use_aux or rcfg.use_prompt_loss)
        with T.no_grad():
            feats = model.image_features(np.stack([train_split.scenes[0].image]))
            res = model.forward(feats, model.text_prompts(train_split.categories[:2]))
        expected_calls = 7 * rcfg.model.use_psf + 1 * rcfg.model.use_mfg
        checks["fusion_calls"] = res.state.l == expected_calls
        zero_shot = evaluate(model, val_split)["mean"]
        before = _digest(model)
        _, smap, tuned = tune_optimized_prompt(model, tune_split, rcfg.with_overrides(steps=tune_steps),
                                               M=row.super_class)
        checks["base_frozen_during_tuning"] = _digest(model) == before
        checks["super_class_rows"] = smap.num_rows == row.super_class * len(tuned["classes"])
        model.unfreeze()
        entry = {"row": row.name, "toggle": row.toggle, "model": row.model, "train": row.train,
                 "super_class": row.super_class, "final_loss": history[-1]["total"],
                 "zero_shot_ap": zero_shot, "tuned_ap": tuned["tuned_ap"], "checks": checks,
                 "seconds": time.time() - t0}
        log.info("ablation %s: zero-shot %.3f tuned %.3f", row.name, zero_shot, tuned["tuned_ap"])
        report["rows"].append(entry)
    report["passed"] = all(all(r["checks"].values()) for r in report["rows"])
    return report
