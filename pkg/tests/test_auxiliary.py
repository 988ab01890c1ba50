import math

import numpy as np
import pytest

from promptdet import tensor as T
from promptdet.auxiliary import (AUX_LOSS_WEIGHTS, PROMPT_LOSS_WEIGHT, AuxHead, PromptClassifier, aux_head_forward,
                                 aux_loss, atss_assign, atss_assign_reference, centerness_target,
                                 combine_aux_components, generate_anchors, prompt_multilabel_loss)
from promptdet.gradcheck import grad_check
from promptdet.tensor import ShapeError

SHAPES = [(8, 8), (4, 4), (2, 2), (1, 1)]


def random_scene_boxes(rng, n, size=64):
    side = rng.uniform(8, 40, size=(n, 2))
    c = rng.uniform(side / 2, size - side / 2)
    return np.concatenate([c - side / 2, c + side / 2], axis=1)


def test_anchor_layout():
    a = generate_anchors(SHAPES, 64)
    assert len(a) == 85
    np.testing.assert_array_equal(a.centers[0], [4, 4])
    np.testing.assert_array_equal(a.boxes[0], [-12, -12, 20, 20])   # side 4 x stride 8
    np.testing.assert_array_equal(a.centers[64], [8, 8])
    np.testing.assert_array_equal(a.centers[84], [32, 32])
    np.testing.assert_array_equal(a.levels[[0, 63, 64, 80, 84]], [0, 0, 1, 2, 3])
    # (scale, row, col) order: row-major within a level
    np.testing.assert_array_equal(a.centers[1], [12, 4])
    np.testing.assert_array_equal(a.centers[8], [4, 12])


def test_atss_no_ground_truth():
    asg = atss_assign(generate_anchors(SHAPES, 64), np.zeros((0, 4)), [])
    assert not asg.positive.any() and (asg.labels == -1).all()


def test_atss_box_on_one_stride32_token():
    anchors = generate_anchors(SHAPES, 64)
    # a box identical to the top-left stride-32 anchor
    gt = anchors.boxes[80:81].copy()
    asg = atss_assign(anchors, gt, [3])
    assert asg.positive[80] and asg.labels[80] == 3
    np.testing.assert_array_equal(atss_assign_reference(anchors, gt, [3]), asg.labels)


def test_centerness_at_box_centre_is_one():
    assert centerness_target(np.array([[5.0, 7.0]]), np.array([[0.0, 2.0, 10.0, 12.0]]))[0] == 1.0


def test_atss_against_reference_on_random_scenes(rng):
    anchors = generate_anchors(SHAPES, 64)
    for _ in range(200):
        n = int(rng.integers(0, 5))
        gt = random_scene_boxes(rng, n)
        labels = rng.integers(0, 6, size=n)
        np.testing.assert_array_equal(atss_assign(anchors, gt, labels).labels,
                                      atss_assign_reference(anchors, gt, labels))


def test_aux_weights_unit_components():
    assert AUX_LOSS_WEIGHTS == (6.0, 6.0, 12.0)
    assert combine_aux_components(1.0, 1.0, 1.0) == 24.0
    assert PROMPT_LOSS_WEIGHT == 6.0


def _head_inputs(rng, d=8, K=3, B=1):
    return T.tensor(rng.normal(size=(B, 85, d))), T.tensor(rng.normal(size=(B, K, d)))


def test_aux_head_shapes(rng):
    head = AuxHead(8, rng)
    logits, boxes, ctr = aux_head_forward(head, *_head_inputs(rng, B=2), SHAPES, 64)
    assert logits.shape == (2, 85, 3) and boxes.shape == (2, 85, 4) and ctr.shape == (2, 85)
    b = boxes.data
    assert (b[..., 2] > b[..., 0]).all() and (b[..., 3] > b[..., 1]).all()


def test_aux_head_width_mismatch(rng):
    memory, _ = _head_inputs(rng)
    with pytest.raises(ShapeError):
        aux_head_forward(AuxHead(8, rng), memory, T.zeros((1, 2, 4)), SHAPES, 64)


def test_aux_loss_all_background(rng):
    anchors = generate_anchors(SHAPES, 64)
    logits, boxes, ctr = aux_head_forward(AuxHead(8, rng), *_head_inputs(rng), SHAPES, 64)
    asg = [atss_assign(anchors, np.zeros((0, 4)), [])]
    total, parts = aux_loss(logits, boxes, ctr, asg, [np.zeros((0, 4))], 64)
    assert float(parts["centerness"].data) == 0 and float(parts["iou"].data) == 0
    assert float(total.data) == pytest.approx(6 * float(parts["class"].data))


def test_aux_loss_perfect_predictions():
    anchors = generate_anchors(SHAPES, 64)
    gt = np.array([[8.0, 10.0, 40.0, 36.0]])
    asg = atss_assign(anchors, gt, [1])
    assert asg.positive.any()
    A, K = 85, 2
    logits = np.full((1, A, K), -60.0)
    logits[0, asg.positive, 1] = 60.0
    boxes = np.tile(gt / 64, (1, A, 1))
    ctr = np.where(asg.centerness > 0.5, 60.0, -60.0)[None]
    asg.centerness[:] = (asg.centerness > 0.5).astype(float)   # saturable targets
    total, _ = aux_loss(T.tensor(logits, dtype=np.float64), T.tensor(boxes, dtype=np.float64),
                        T.tensor(ctr, dtype=np.float64), [asg], [gt], 64)
    assert float(total.data) < 1e-12


def test_aux_objective_gradient(rng):
    with T.precision(np.float64):
        head = AuxHead(4, rng).astype(np.float64)
        memory, P = _head_inputs(rng, d=4)
        anchors = generate_anchors(SHAPES, 64)
        gt = random_scene_boxes(rng, 2)
        asg = [atss_assign(anchors, gt, [0, 2])]

        def f():
            out = head(memory, P, SHAPES, anchors, 64)
            return aux_loss(*out, asg, [gt], 64)[0]

        assert grad_check(f, head.parameters(), max_coords=8) <= 1e-5


def test_contrastive_scores_match_similarity_rule(rng):
    d = 4
    head = AuxHead(d, rng).astype(np.float64)
    head.contrast.proj.weight.data = np.eye(d)
    head.contrast.proj.bias.data[...] = 0
    head.contrast.bias.data[...] = 0.7
    with T.precision(np.float64):
        a = T.tensor(np.eye(d)[None, :2])
        P = T.tensor(np.eye(d)[None, :2])
        s = head.contrast(a, P).data[0]
    np.testing.assert_allclose(s, [[1 / math.sqrt(d) + 0.7, 0.7], [0.7, 1 / math.sqrt(d) + 0.7]], atol=1e-15)


# ---------------------------------------------------------------- prompt multi-label loss

def _fixed_classifier(rng, logit):
    clf = PromptClassifier(4, rng).astype(np.float64)
    for p in clf.parameters():
        p.data[...] = 0
    clf.mlp.layers[-1].bias.data[...] = logit
    return clf


def test_prompt_loss_saturation_and_ln2(rng):
    P = T.tensor(rng.normal(size=(3, 4)), dtype=np.float64)
    assert float(prompt_multilabel_loss(_fixed_classifier(rng, 20.0), P, np.ones(3)).data) < 1e-8
    assert float(prompt_multilabel_loss(_fixed_classifier(rng, 0.0), P, np.ones(3)).data) == pytest.approx(
        math.log(2), abs=1e-12)
    assert float(prompt_multilabel_loss(_fixed_classifier(rng, -20.0), P, np.zeros(3)).data) < 1e-8


def test_prompt_loss_learns_separable_prompts(rng):
    from promptdet.train import AdamW
    K, d = 12, 8
    g = (np.arange(K) % 2).astype(float)
    P = T.tensor(rng.normal(size=(K, d)) + np.outer(2 * g - 1, np.ones(d)))
    clf = PromptClassifier(d, rng)
    opt = AdamW(clf.parameters(), [1e-2] * len(clf.parameters()), weight_decay=0)
    for _ in range(200):
        loss = prompt_multilabel_loss(clf, P, g)
        T.backward(loss, opt.params)
        opt.step()
    assert float(prompt_multilabel_loss(clf, P, g).data) < 0.1
