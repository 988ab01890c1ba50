"""Acceptance suite: one printed PASS/FAIL line per criterion.

The toy model trained for the overfit criterion is reused by the
compositional, visual-prompt, optimized-prompt and invariance checks.
Expect roughly a quarter of an hour on one CPU core.
"""
import copy
import itertools
import time

import numpy as np
import pytest

from promptdet import checkpoint as ckpt
from promptdet import tensor as T

pytestmark = pytest.mark.acceptance

RESULTS = []


@pytest.fixture
def report(capsys):
    def emit(name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        RESULTS.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert passed, line
    return emit


def _digest(module):
    state = module.state_dict()
    return ckpt.tensor_digest(state, list(state))


# ---------------------------------------------------------------------------
# oracles

def test_gradient_oracle(report):
    from promptdet.oracles import run_grad_checks
    t0 = time.perf_counter()
    rep = run_grad_checks(seeds=5, max_coords=4)
    seconds = time.perf_counter() - t0
    worst = max(r["error"] for r in rep.values())
    failing = [k for k, r in rep.items() if not r["passed"]]
    report("gradient oracle", not failing and seconds <= 300,
           f"{len(rep)} cases incl. full pretrain objective, max rel err {worst:.1e} (<= 1e-5), "
           f"{seconds:.0f}s (<= 300s){'; failing ' + str(failing) if failing else ''}")


def test_matching_oracle(report):
    from promptdet.matching import hungarian_match
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        G = int(rng.integers(1, 7))
        Q = G + int(rng.integers(0, 2))
        cost = rng.uniform(size=(G, Q)) if rng.random() < 0.7 else rng.integers(0, 4, size=(G, Q)).astype(float)
        perms = np.array(list(itertools.permutations(range(Q), G)))
        best = np.sum(cost[np.arange(G), perms], axis=1).min()
        mismatches += hungarian_match(cost).total_cost != best
    seconds = time.perf_counter() - t0
    report("matching oracle", mismatches == 0 and seconds <= 30,
           f"{mismatches}/1000 cost mismatches vs exhaustive permutations (exact), {seconds:.1f}s (<= 30s)")


def test_assignment_oracle(report):
    from promptdet.auxiliary import atss_assign, atss_assign_reference, generate_anchors
    anchors = generate_anchors([(8, 8), (4, 4), (2, 2), (1, 1)], 64)
    from promptdet.shapes import SceneSpec, TOY_CATEGORIES, generate_scene
    spec = SceneSpec(TOY_CATEGORIES, min_objects=0, max_objects=4)
    bad = 0
    for seed in range(200):
        s = generate_scene(50_000 + seed, spec)
        gt = s.boxes_xyxy * 64
        bad += not np.array_equal(atss_assign(anchors, gt, s.class_ids).labels,
                                  atss_assign_reference(anchors, gt, s.class_ids))
    report("assignment oracle", bad == 0, f"{bad}/200 scenes differ from the brute-force reference (exact)")


def test_ap_oracle(report):
    from promptdet.shapes import COCO_THRESHOLDS, evaluate_ap
    from test_shapes import brute_force_ap, random_problem
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        preds, gts = random_problem(rng)
        for c, ap in evaluate_ap(preds, gts, COCO_THRESHOLDS)["per_class"].items():
            dets = [(p["scores"][k], i, p["boxes"][k]) for i, p in enumerate(preds)
                    for k in np.nonzero(p["class_ids"] == c)[0]]
            gb = {i: g["boxes"][g["class_ids"] == c] for i, g in enumerate(gts)}
            n = sum(len(v) for v in gb.values())
            worst = max(worst, abs(ap - np.mean([brute_force_ap(dets, gb, n, t) for t in COCO_THRESHOLDS])))
    report("AP oracle", worst <= 1e-9, f"max |dAP| {worst:.1e} over 100 prediction sets (<= 1e-9)")


def test_loss_weight_ledger(report):
    from promptdet.auxiliary import AUX_LOSS_WEIGHTS, combine_aux_components
    from promptdet.losses import DECODER_LOSS_WEIGHTS, combine_decoder_components
    dec, aux = combine_decoder_components(1.0, 1.0, 1.0), combine_aux_components(1.0, 1.0, 1.0)
    ok = dec == 8.0 and aux == 24.0 and DECODER_LOSS_WEIGHTS == (1.0, 5.0, 2.0) and AUX_LOSS_WEIGHTS == (6.0, 6.0, 12.0)
    report("loss-weight ledger", ok, f"decoder {dec} (8.0) from {DECODER_LOSS_WEIGHTS}, aux {aux} (24.0) "
                                     f"from {AUX_LOSS_WEIGHTS}")


# ---------------------------------------------------------------------------
# toy training

@pytest.fixture(scope="module")
def overfit():
    from promptdet.shapes import toy_split
    from promptdet.train import TrainConfig, pretrain
    split = toy_split()
    cfg = TrainConfig(steps=2000, log_every=0)
    t0 = time.perf_counter()
    model, aux, _ = pretrain(split, cfg)
    return {"split": split, "cfg": cfg, "model": model, "aux": aux, "seconds": time.perf_counter() - t0}


def test_overfit_run(report, overfit):
    from promptdet.train import evaluate
    ap = evaluate(overfit["model"], overfit["split"])["mean"]
    s = overfit["seconds"]
    report("overfit run", ap >= 0.90 and s <= 900,
           f"train AP@[.5:.95] {ap:.3f} (>= 0.90) after {overfit['cfg'].steps} steps, {s:.0f}s (<= 900s)")


def test_compositional_probe(report, overfit):
    from promptdet.shapes import SceneSpec, TOY_CATEGORIES, TOY_HELD_OUT
    from promptdet.train import compositional_probe
    r = compositional_probe(overfit["model"], SceneSpec(TOY_CATEGORIES), TOY_HELD_OUT)
    report("compositional probe", r["passed"],
           f"held-out '{r['held_out']}' AP@0.5 {r['held_out_ap50']:.3f} vs shuffled-prompt control "
           f"{r['control_ap50']:.3f} (must be strictly above)")


@pytest.fixture(scope="module")
def visual(overfit):
    from promptdet.train import frozen_digest, train_visual_prompt
    model = copy.deepcopy(overfit["model"])
    model.freeze()
    model.visual.unfreeze()
    before = frozen_digest(model)
    cfg = overfit["cfg"].with_overrides(regime="visual-prompt", steps=1000)
    history = train_visual_prompt(model, overfit["split"], cfg)
    return {"model": model, "frozen_ok": frozen_digest(model) == before, "history": history}


def test_visual_prompt_distillation(report, overfit, visual):
    from promptdet.train import evaluate, prompt_alignment
    split = overfit["split"]
    al = prompt_alignment(visual["model"], split)
    inter = evaluate(visual["model"], split, "interactive", seed=0)["mean"]
    text = evaluate(visual["model"], split)["mean"]
    ok = al["cosine"] >= 0.8 and al["mse"] < 0.05 and inter >= text and visual["frozen_ok"]
    report("visual-prompt distillation", ok,
           f"cosine {al['cosine']:.3f} (>= 0.8), MSE {al['mse']:.4f} (< 0.05), interactive AP {inter:.3f} "
           f">= text AP {text:.3f}, frozen base unchanged {visual['frozen_ok']}")


def test_optimized_prompt_transfer(report, overfit):
    from promptdet.train import tune_optimized_prompt
    downstream = overfit["split"].renamed({"circle": "blob"})
    res = {}
    for M in (1, 10):
        model = copy.deepcopy(overfit["model"])
        before = _digest(model)
        cfg = overfit["cfg"].with_overrides(regime="tune-prompt", steps=600)
        _, _, rep = tune_optimized_prompt(model, downstream, cfg, M=M)
        res[M] = (rep, _digest(model) == before)
    z, a1, a10 = res[10][0]["zero_shot_ap"], res[1][0]["tuned_ap"], res[10][0]["tuned_ap"]
    frozen = res[1][1] and res[10][1]
    report("optimized-prompt transfer", a10 >= z + 0.1 and a10 >= a1 - 0.02 and frozen,
           f"tuned AP (M=10) {a10:.3f} >= zero-shot {z:.3f} + 0.1; M=10 {a10:.3f} >= M=1 {a1:.3f} - 0.02; "
           f"base byte-identical {frozen}")


def test_invariance_suite(report, overfit, tmp_path):
    from promptdet.hybrid import XMHA, HybridEncoder, x_mha
    from promptdet.encoders import ToyBackbone, encode_image
    from promptdet.model import detect
    from promptdet.train import load_checkpoint, save_checkpoint
    from promptdet.prompts import SuperClassMap, superclass_scores
    rng = np.random.default_rng(11)
    checks = {}
    with T.precision(np.float64):
        feats = encode_image(ToyBackbone(8, rng).astype(np.float64), rng.uniform(size=(3, 64, 64)))
        enc = HybridEncoder(8, rng).astype(np.float64)
        for p in enc.parameters():
            p.data = rng.normal(size=p.shape) * 0.3
        P = rng.normal(size=(1, 5, 8))
        perm = np.array([3, 1, 4, 0, 2])
        c, p, _ = enc(feats, T.tensor(P))
        c2, p2, _ = enc(feats, T.tensor(P[:, perm]))
        checks["permutation"] = max(np.abs(c2.data - c.data).max(), np.abs(p2.data - p.data[:, perm]).max()) <= 1e-6
        m = XMHA(8, rng).astype(np.float64)
        for q in m.parameters():
            q.data = rng.normal(size=q.shape)
        for lin in (m.img_out, m.prompt_out):
            lin.weight.data[...] = 0
            lin.bias.data[...] = 0
        img, Pt = T.tensor(rng.normal(size=(10, 8))), T.tensor(rng.normal(size=(3, 8)))
        a, b = x_mha(m, img, Pt)
        checks["xmha_zero_update"] = np.array_equal(a.data, img.data) and np.array_equal(b.data, Pt.data)
    model, split = overfit["model"], overfit["split"]
    images = np.stack([s.image for s in split.scenes[:8]])
    cols = list(range(len(split.categories)))
    with_aux = detect(model, images, model.text_prompts(split.categories), cols)
    path = tmp_path / "no_aux.ckpt"
    save_checkpoint(path, model, overfit["cfg"], overfit["cfg"].steps, aux=None)
    reloaded, aux, *_ = load_checkpoint(path)
    assert aux is None
    without = detect(reloaded, images, reloaded.text_prompts(split.categories), cols)
    checks["aux_deleted_bit_identical"] = all(
        x["boxes"].tobytes() == y["boxes"].tobytes() and x["scores"].tobytes() == y["scores"].tobytes()
        for x, y in zip(with_aux, without))
    smap = SuperClassMap({0: [0, 1, 2], 1: [3, 4], 2: [5]})
    mono = idem = True
    for _ in range(200):
        raw = rng.normal(size=(4, 6))
        base = superclass_scores(T.tensor(raw, dtype=np.float64), smap).data
        bumped = raw.copy()
        bumped[:, rng.integers(6)] += rng.uniform(0, 2)
        mono &= bool((superclass_scores(T.tensor(bumped, dtype=np.float64), smap).data >= base).all())
        dup = np.concatenate([raw, raw[:, [1]]], axis=1)
        ext = superclass_scores(T.tensor(dup, dtype=np.float64), SuperClassMap({0: [0, 1, 2, 6], 1: [3, 4], 2: [5]}))
        idem &= np.array_equal(ext.data, base)
    checks["superclass_monotone"], checks["superclass_max_idempotent"] = mono, idem
    report("invariance suite", all(checks.values()), ", ".join(f"{k} {v}" for k, v in checks.items()))


def test_ablation_harness(report):
    from promptdet.ablation import ROWS, TOGGLES, run_ablation
    from promptdet.shapes import toy_split
    from promptdet.train import TrainConfig
    train = toy_split()
    val = toy_split(32, first_seed=10_000)
    cfg = TrainConfig(steps=150, log_every=0)
    t0 = time.perf_counter()
    rep = run_ablation(train, val, train.renamed({"circle": "blob"}), cfg, TOGGLES, tune_steps=100)
    rows = [r["row"] for r in rep["rows"]]
    ok = rep["passed"] and rows == [r.name for r in ROWS]
    summary = "; ".join(f"{r['row']} zs {r['zero_shot_ap']:.2f} tuned {r['tuned_ap']:.2f}" for r in rep["rows"])
    report("ablation harness", ok, f"{len(rows)} rows completed, structural checks {rep['passed']}, "
                                   f"{time.perf_counter() - t0:.0f}s [{summary}]")
