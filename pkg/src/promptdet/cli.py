"""Command-line interface: data generation, the three training regimes,
evaluation, gradient checks and the ablation matrix.

Every command reads an optional YAML config (``--config``); flags given on
the command line override the matching config key. A ``data`` section in the
config describes the split used when ``--split`` is not given. Exit status is
0 only when the command's contract checks pass.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint as ckpt
from .shapes import (TOY_CATEGORIES, TOY_HELD_OUT, BenchmarkSplit, SceneSpec, load_split, make_split, phrase,
                     prediction_record, save_split, write_jsonl)
from .train import (TrainConfig, evaluate, frozen_digest, load_checkpoint, predict_interactive, predict_text,
                    prompt_alignment, save_checkpoint, train_visual_prompt, tune_optimized_prompt)

log = logging.getLogger("promptdet")

DEFAULT_DATA = {"categories": [list(c) for c in TOY_CATEGORIES], "first_seed": 0, "count": 32,
                "held_out": [phrase(*TOY_HELD_OUT)]}


class ContractFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# config and data

def read_config(path) -> tuple[dict, dict]:
    """Split a config file into (training keys, data section)."""
    raw = yaml.safe_load(Path(path).read_text()) if path else {}
    raw = dict(raw or {})
    data = dict(DEFAULT_DATA, **(raw.pop("data", None) or {}))
    return raw, data


def train_config(args, raw: dict, regime: str) -> TrainConfig:
    cfg = TrainConfig.from_dict({**raw, "regime": regime}) if raw else TrainConfig(regime=regime)
    model = {k: getattr(args, k) for k in ("d", "num_queries", "decoder_layers") if getattr(args, k, None) is not None}
    lr = dict(cfg.lr)
    if getattr(args, "lr", None) is not None:
        lr["default"] = args.lr
    if getattr(args, "prompt_lr", None) is not None:
        lr["prompt_embedding"] = args.prompt_lr
    over = {k: getattr(args, k, None) for k in ("steps", "batch_size", "seed", "num_negatives", "max_grad_norm",
                                                 "super_class", "log_every")}
    return cfg.with_overrides(model=model or None, lr=lr, **over)


def data_split(data: dict) -> tuple[BenchmarkSplit, SceneSpec]:
    spec_keys = {k: v for k, v in data.items() if k not in ("first_seed", "count", "held_out", "rename")}
    spec = SceneSpec.from_dict(spec_keys)
    first, count = int(data["first_seed"]), int(data["count"])
    split = make_split(spec, range(first, first + count), held_out=data.get("held_out", []))
    if data.get("rename"):
        split = split.renamed(dict(data["rename"]))
    return split, spec


def resolve_split(args, data: dict) -> BenchmarkSplit:
    if getattr(args, "split", None):
        split, _ = load_split(args.split)
    else:
        split, _ = data_split(data)
    if getattr(args, "rename", None):
        split = split.renamed(dict(r.split("=", 1) for r in args.rename))
    return split


def _dump(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True, default=float)
    if path:
        Path(path).write_text(text + "\n")
    print(text)


def _require(checks: dict):
    failed = [k for k, ok in checks.items() if not ok]
    if failed:
        raise ContractFailure(f"contract checks failed: {failed}")


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> dict:
    _, data = read_config(args.config)
    if args.spec:
        data.update(yaml.safe_load(Path(args.spec).read_text()) or {})
    if args.seed is not None:
        data["first_seed"] = args.seed
    if args.count is not None:
        data["count"] = args.count
    split, spec = data_split(data)
    save_split(args.out, split, spec, with_images=not args.no_images)
    back, _ = load_split(args.out)
    checks = {
        "regenerates": [s.image.tobytes() for s in back.scenes] == [s.image.tobytes() for s in split.scenes],
        "boxes_in_unit_square": all(((s.boxes_xyxy >= 0) & (s.boxes_xyxy <= 1)).all() for s in split.scenes),
        "held_out_absent": not set(split.held_out) & {p for s in split.scenes for p in s.phrases},
    }
    return {"out": str(args.out), "scenes": len(split.scenes), "categories": split.categories, "checks": checks}


def cmd_pretrain(args) -> dict:
    from .train import pretrain
    raw, data = read_config(args.config)
    cfg = train_config(args, raw, "pretrain")
    split = resolve_split(args, data)
    model, aux, history = pretrain(split, cfg)
    save_checkpoint(args.out, model, cfg, cfg.steps, aux)
    checks = {"losses_finite": all(math.isfinite(h["total"]) for h in history)}
    report = {"out": str(args.out), "steps": cfg.steps, "final_loss": history[-1]["total"], "checks": checks}
    if args.eval:
        report["train_ap"] = evaluate(model, split)["mean"]
    return report


def cmd_train_visual_prompt(args) -> dict:
    raw, data = read_config(args.config)
    model, aux, base_cfg, meta, extra = load_checkpoint(args.base)
    cfg = train_config(args, raw, "visual-prompt").with_overrides(model=base_cfg.model)
    split = resolve_split(args, data)
    model.freeze()
    model.visual.unfreeze()
    before = frozen_digest(model)
    history = train_visual_prompt(model, split, cfg)
    checks = {"frozen_unchanged": frozen_digest(model) == before,
              "losses_finite": all(math.isfinite(h["total"]) for h in history)}
    out = args.out or args.base
    save_checkpoint(out, model, cfg, meta["step"] + cfg.steps, aux, extra)
    align = prompt_alignment(model, split)
    report = {"out": str(out), "final_mse": history[-1]["mse"], **align, "checks": checks}
    if args.eval:
        report["interactive_ap"] = evaluate(model, split, "interactive", seed=cfg.seed)["mean"]
        report["text_ap"] = evaluate(model, split)["mean"]
    return report


def cmd_tune_prompt(args) -> dict:
    raw, data = read_config(args.config)
    model, aux, base_cfg, meta, _ = load_checkpoint(args.base)
    cfg = train_config(args, raw, "tune-prompt").with_overrides(model=base_cfg.model)
    split = resolve_split(args, data)
    state = model.state_dict()
    before = ckpt.tensor_digest(state, list(state))
    table, smap, report = tune_optimized_prompt(model, split, cfg, M=cfg.super_class)
    state = model.state_dict()
    checks = {"base_byte_identical": ckpt.tensor_digest(state, list(state)) == before,
              "final_loss_finite": report["final_loss"] is None or math.isfinite(report["final_loss"])}
    if args.out:
        model.freeze()
        save_checkpoint(args.out, model, base_cfg, meta["step"], aux,
                        extra_tensors={"prompts.embedding": table.embedding.data},
                        extra_meta={"super_class": smap.to_table(), "categories": split.categories})
    return {**report, "out": args.out, "checks": checks}


def cmd_eval(args) -> dict:
    _, data = read_config(args.config)
    model, _, cfg, meta, extra = load_checkpoint(args.ckpt)
    split = resolve_split(args, data)
    if args.prompt_mode == "text":
        preds = predict_text(model, split)
    else:
        preds = predict_interactive(model, split, seed=args.seed, all_visual=args.prompt_mode == "visual")
    from .shapes import evaluate_ap
    from .train import _gt_records
    res = evaluate_ap(preds, _gt_records(split))
    if args.predictions:
        write_jsonl(args.predictions, [prediction_record(i, p["boxes"], p["class_ids"], p["scores"])
                                       for i, p in enumerate(preds)])
    checks = {"ap_in_range": 0.0 <= res["mean"] <= 1.0,
              "scores_finite": all(np.isfinite(np.asarray(p["scores"])).all() for p in preds)}
    per_class = {split.categories[c]: v for c, v in res["per_class"].items()}
    return {"prompt_mode": args.prompt_mode, "ap": res["mean"], "per_class": per_class, "checks": checks}


def cmd_grad_check(args) -> dict:
    from .oracles import run_grad_checks
    rep = run_grad_checks(args.module or None, seeds=args.seeds, max_coords=args.max_coords, seed=args.seed)
    for name, r in rep.items():
        log.info("%-20s %.2e %s", name, r["error"], "ok" if r["passed"] else "FAIL")
    return {"cases": {k: {"error": float(v["error"]), "passed": bool(v["passed"]), "seconds": v["seconds"]}
                      for k, v in rep.items()},
            "checks": {k: bool(v["passed"]) for k, v in rep.items()}}


def cmd_ablate(args) -> dict:
    from .ablation import run_ablation
    raw, data = read_config(args.config)
    cfg = train_config(args, raw, "pretrain")
    train = resolve_split(args, data)
    val, _ = data_split(dict(data, first_seed=int(data["first_seed"]) + 10_000))
    tune = train.renamed(dict(r.split("=", 1) for r in args.tune_rename))
    report = run_ablation(train, val, tune, cfg, args.toggle, tune_steps=args.tune_steps)
    if args.out:
        Path(args.out).write_text(yaml.safe_dump(json.loads(json.dumps(report, default=float)), sort_keys=False))
    report["checks"] = {r["row"]: all(r["checks"].values()) for r in report["rows"]}
    return report


# ---------------------------------------------------------------------------
# parser

def _training_flags(p):
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float, help="learning rate of the default parameter group")
    p.add_argument("--prompt-lr", dest="prompt_lr", type=float)
    p.add_argument("--num-negatives", dest="num_negatives", type=int)
    p.add_argument("--max-grad-norm", dest="max_grad_norm", type=float)
    p.add_argument("--log-every", dest="log_every", type=int)
    p.add_argument("--d", type=int, help="feature width")
    p.add_argument("--num-queries", dest="num_queries", type=int)
    p.add_argument("--decoder-layers", dest="decoder_layers", type=int)


def _split_flags(p):
    p.add_argument("--split", help="directory written by gen-data (default: the config's data section)")
    p.add_argument("--rename", action="append", metavar="OLD=NEW", help="rename a phrase word, e.g. circle=blob")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="promptdet", description=__doc__.split("\n\n")[0])
    ap.add_argument("--log-level", default="INFO")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a split and write its index and images")
    p.add_argument("--config")
    p.add_argument("--spec", help="YAML scene spec (categories, counts, sizes, held_out)")
    p.add_argument("--seed", type=int, help="first scene seed")
    p.add_argument("--count", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--no-images", action="store_true", help="index only; images regenerate from seeds")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pre-train a detector with text prompts")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--eval", action="store_true", help="report training-split AP")
    _training_flags(p)
    _split_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-visual-prompt", help="distil the visual-prompt encoder on a frozen base")
    p.add_argument("--config")
    p.add_argument("--base", required=True)
    p.add_argument("--out", help="output checkpoint (default: overwrite --base)")
    p.add_argument("--eval", action="store_true", help="report interactive and text AP")
    _training_flags(p)
    _split_flags(p)
    p.set_defaults(func=cmd_train_visual_prompt)

    p = sub.add_parser("tune-prompt", help="learn prompt embeddings on a frozen base")
    p.add_argument("--config")
    p.add_argument("--base", required=True)
    p.add_argument("--super-class", dest="super_class", type=int, help="prompts per class (M)")
    p.add_argument("--out")
    _training_flags(p)
    _split_flags(p)
    p.set_defaults(func=cmd_tune_prompt)

    p = sub.add_parser("eval", help="AP of a checkpoint under a prompt mode")
    p.add_argument("--config")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt-mode", choices=("text", "visual", "interactive"), default="text")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--predictions", help="write predictions as JSON lines")
    _split_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks")
    p.add_argument("--module", action="append", help="case name (repeatable; default: all)")
    p.add_argument("--seeds", type=int, default=3, help="random draws per primitive")
    p.add_argument("--max-coords", dest="max_coords", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ablate", help="run the toggle matrix and write a report")
    p.add_argument("--config")
    p.add_argument("--toggle", action="append", choices=("psf", "mfg", "prompt-loss", "aux-head", "super-class"),
                   help="rows to run besides the base row (repeatable; default: all)")
    p.add_argument("--tune-steps", dest="tune_steps", type=int, default=200)
    p.add_argument("--tune-rename", dest="tune_rename", action="append", default=None, metavar="OLD=NEW")
    p.add_argument("--out", help="YAML report path")
    _training_flags(p)
    _split_flags(p)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "tune_rename", "unset") is None:
        args.tune_rename = ["circle=blob"]
    try:
        report = args.func(args)
        _dump(report)
        _require(report.get("checks", {}))
    except ContractFailure as e:
        log.error("%s", e)
        return 1
    except (ValueError, KeyError, FileNotFoundError, RuntimeError) as e:
        log.error("%s: %s", type(e).__name__, e)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
