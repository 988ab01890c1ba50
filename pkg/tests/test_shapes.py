import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptdet.boxes import box_iou
from promptdet.shapes import (COCO_THRESHOLDS, BenchmarkSplit, GenerationError, SceneSpec, evaluate_ap,
                              generate_scene, ground_truth_record, make_split, mask_box, prediction_record,
                              read_jsonl, write_jsonl)

CATS = (("red", "circle"), ("green", "square"), ("blue", "triangle"))
SPEC = SceneSpec(CATS)


def test_same_seed_bit_identical():
    a, b = generate_scene(11, SPEC), generate_scene(11, SPEC)
    assert a.image.tobytes() == b.image.tobytes()
    np.testing.assert_array_equal(a.boxes, b.boxes)
    assert a.phrases == b.phrases
    assert generate_scene(12, SPEC).image.tobytes() != a.image.tobytes()


def test_zero_objects():
    s = generate_scene(0, SPEC, num_objects=0)
    assert s.boxes.shape == (0, 4) and len(s.class_ids) == 0 and s.phrases == []
    assert s.image.shape == (3, 64, 64) and 0 <= s.image.min() and s.image.max() <= 1


@pytest.mark.parametrize("seed", range(20))
def test_boxes_enclose_rendered_masks(seed):
    s = generate_scene(seed, SPEC, num_objects=3)
    assert len(s.boxes) == 3
    for box, mask in zip(s.boxes_xyxy * 64, s.masks):
        np.testing.assert_allclose(box, mask_box(mask > 0), atol=1.0)


def test_scene_invariants():
    for seed in range(50):
        s = generate_scene(seed, SPEC)
        xyxy = s.boxes_xyxy
        assert (xyxy >= 0).all() and (xyxy <= 1).all()
        assert (s.boxes[:, 2] * s.boxes[:, 3] >= (4 / 64) ** 2).all()
        iou = box_iou(xyxy, xyxy)
        assert (iou[~np.eye(len(xyxy), dtype=bool)] <= 0.3 + 1e-12).all()


def test_infeasible_spec_raises():
    crowded = SceneSpec(CATS, min_objects=30, max_objects=30, min_side=30, max_side=30, max_iou=0.0, max_retries=20)
    with pytest.raises(GenerationError):
        generate_scene(0, crowded)


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(CATS, size=48)
    with pytest.raises(ValueError):
        SceneSpec((("orange", "circle"),))
    assert SceneSpec.from_dict(SPEC.to_dict()) == SPEC


def test_held_out_pairs_never_in_training_scenes():
    split = make_split(SPEC, range(10), held_out=["red hexagon"])
    assert split.held_out == ["red hexagon"]
    with pytest.raises(ValueError):
        BenchmarkSplit(split.scenes, split.categories, held_out=[split.scenes[0].phrases[0]])


def test_renamed_split():
    split = make_split(SPEC, range(5)).renamed({"circle": "blob"})
    assert split.categories[0] == "red blob"
    assert all("circle" not in p for s in split.scenes for p in s.phrases)


# ---------------------------------------------------------------- AP

def _gt(boxes, cls):
    return {"boxes": np.asarray(boxes, dtype=float).reshape(-1, 4), "class_ids": np.asarray(cls)}


def _pred(boxes, cls, scores):
    return {"boxes": np.asarray(boxes, dtype=float).reshape(-1, 4), "class_ids": np.asarray(cls),
            "scores": np.asarray(scores, dtype=float)}


def test_perfect_predictions():
    g = [_gt([[0, 0, 10, 10], [20, 20, 30, 35]], [0, 1])]
    p = [_pred([[0, 0, 10, 10], [20, 20, 30, 35]], [0, 1], [1.0, 1.0])]
    assert evaluate_ap(p, g)["mean"] == 1.0


def test_no_predictions():
    assert evaluate_ap([_pred([], [], [])], [_gt([[0, 0, 10, 10]], [0])])["mean"] == 0.0


def test_spurious_low_score_prediction():
    g = [_gt([[0, 0, 10, 10]], [0])]
    p = [_pred([[0, 0, 10, 10], [40, 40, 50, 50]], [0, 0], [0.9, 0.3])]
    assert evaluate_ap(p, g, [0.5])["mean"] == 1.0


def brute_force_ap(dets, gts_by_img, num_gt, thr):
    """Precision and recall at every rank cut-off, each cut-off re-matched from scratch;
    AP = mean over recall levels j/G of the best precision reaching that recall."""
    dets = sorted(dets, key=lambda d: -d[0])
    curve = []
    for k in range(1, len(dets) + 1):
        tp = 0
        for img, gb in gts_by_img.items():
            used = set()
            for _, i, box in dets[:k]:
                if i != img:
                    continue
                best, best_j = -1.0, None
                for j, g in enumerate(gb):
                    if j in used:
                        continue
                    iou = box_iou(box[None], g[None])[0, 0]
                    if iou > best:
                        best, best_j = iou, j
                if best_j is not None and best >= thr:
                    used.add(best_j)
                    tp += 1
        curve.append((tp / num_gt, tp / k))
    total = 0.0
    for j in range(1, num_gt + 1):
        reach = [p for r, p in curve if r >= j / num_gt - 1e-12]
        total += max(reach) if reach else 0.0
    return total / num_gt


def random_problem(rng):
    n_img = int(rng.integers(1, 4))
    gts, preds = [], []
    for _ in range(n_img):
        g = int(rng.integers(0, 4))
        c = rng.uniform(10, 54, size=(g, 2))
        s = rng.uniform(6, 20, size=(g, 2))
        gb = np.concatenate([c - s / 2, c + s / 2], 1)
        gts.append(_gt(gb, rng.integers(0, 2, size=g)))
        n = int(rng.integers(0, 6))
        jitter = gb[rng.integers(0, g, size=n)] + rng.normal(0, 3, size=(n, 4)) if g else rng.uniform(0, 64, (n, 4))
        pb = np.concatenate([np.minimum(jitter[:, :2], jitter[:, 2:]), np.maximum(jitter[:, :2], jitter[:, 2:]) + 1], 1)
        preds.append(_pred(pb, rng.integers(0, 2, size=n), rng.uniform(size=n)))
    return preds, gts


def test_ap_matches_brute_force_pr_curve():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 100:
        preds, gts = random_problem(rng)
        res = evaluate_ap(preds, gts, COCO_THRESHOLDS)
        for c, ap in res["per_class"].items():
            dets = [(p["scores"][k], i, p["boxes"][k]) for i, p in enumerate(preds)
                    for k in np.nonzero(p["class_ids"] == c)[0]]
            gb = {i: g["boxes"][g["class_ids"] == c] for i, g in enumerate(gts)}
            num_gt = sum(len(v) for v in gb.values())
            ref = np.mean([brute_force_ap(dets, gb, num_gt, t) for t in COCO_THRESHOLDS])
            assert abs(ap - ref) <= 1e-9
        checked += 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["cube", "exp", "affine"]))
def test_ap_invariant_to_monotone_score_maps(seed, kind):
    preds, gts = random_problem(np.random.default_rng(seed))
    f = {"cube": lambda s: s ** 3, "exp": np.exp, "affine": lambda s: 3 * s - 7}[kind]
    mapped = [dict(p, scores=f(p["scores"])) for p in preds]
    assert evaluate_ap(preds, gts)["per_class"] == evaluate_ap(mapped, gts)["per_class"]


def test_jsonl_round_trip(tmp_path):
    s = generate_scene(5, SPEC)
    recs = [ground_truth_record(s), prediction_record(5, s.boxes_xyxy, s.class_ids, np.ones(len(s.class_ids)))]
    write_jsonl(tmp_path / "x.jsonl", recs)
    back = read_jsonl(tmp_path / "x.jsonl")
    assert back[0]["phrases"] == s.phrases and back[0]["seed"] == 5
    np.testing.assert_array_equal(np.asarray(back[1]["boxes"]), s.boxes_xyxy)


def test_split_directory_round_trip(tmp_path):
    from promptdet.shapes import load_split, save_split
    split = make_split(SPEC, range(4), held_out=["red square"]).renamed({"circle": "blob"})
    save_split(tmp_path / "d", split, SPEC)
    back, spec = load_split(tmp_path / "d")
    assert spec == SPEC and back.categories == split.categories and back.held_out == ["red square"]
    for a, b in zip(back.scenes, split.scenes):
        assert a.image.tobytes() == b.image.tobytes() and a.phrases == b.phrases
    save_split(tmp_path / "e", split, SPEC, with_images=False)
    assert load_split(tmp_path / "e")[0].scenes[2].seed == 2
