import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptdet import tensor as T
from promptdet.boxes import box_iou, cxcywh_to_xyxy, giou, pairwise_giou, t_giou, xyxy_to_cxcywh
from promptdet.gradcheck import grad_check
from promptdet.losses import (DECODER_LOSS_WEIGHTS, MATCH_COST_WEIGHTS, Target, bce_with_logits,
                              combine_decoder_components, decoder_loss, focal_loss, match_predictions)
from promptdet.matching import MatchResult


def boxes_st():
    coord = st.floats(0, 10, allow_nan=False)
    side = st.floats(0.1, 5, allow_nan=False)
    return st.tuples(coord, coord, side, side).map(lambda t: [t[0], t[1], t[0] + t[2], t[1] + t[3]])


# ---------------------------------------------------------------- GIoU

def test_giou_identical():
    assert giou([0, 0, 2, 3], [0, 0, 2, 3]) == pytest.approx(1.0, abs=1e-15)


def test_giou_disjoint_unit_boxes():
    # intersection 0, union 2, enclosure 3x3
    assert giou([0, 0, 1, 1], [2, 2, 3, 3]) == pytest.approx(0 - (9 - 2) / 9, abs=1e-15)


def test_giou_nested():
    # enclosure equals the outer box, so GIoU = IoU = 1/4
    assert giou([0, 0, 2, 2], [0, 0, 1, 1]) == pytest.approx(0.25, abs=1e-15)


def test_giou_degenerate_rejected():
    with pytest.raises(ValueError):
        giou([0, 0, 0, 1], [0, 0, 1, 1])


@settings(max_examples=100, deadline=None)
@given(boxes_st(), boxes_st())
def test_giou_symmetric_and_below_iou(a, b):
    g_ab, g_ba = giou(a, b), giou(b, a)
    assert g_ab == pytest.approx(g_ba, abs=1e-12)
    assert g_ab <= box_iou(np.array([a]), np.array([b]))[0, 0] + 1e-12
    assert -1 < g_ab <= 1


def test_tensor_giou_matches_numpy(rng):
    a = cxcywh_to_xyxy(np.c_[rng.uniform(0.2, 0.8, (6, 2)), rng.uniform(0.05, 0.3, (6, 2))])
    b = cxcywh_to_xyxy(np.c_[rng.uniform(0.2, 0.8, (6, 2)), rng.uniform(0.05, 0.3, (6, 2))])
    np.testing.assert_allclose(t_giou(T.tensor(a, dtype=np.float64), T.tensor(b, dtype=np.float64)).data,
                               np.diag(pairwise_giou(a, b)), atol=1e-12)


def test_giou_component_monotone_in_iou():
    tgt = T.tensor([[0.0, 0.0, 1.0, 1.0]], dtype=np.float64)
    losses = []
    for shift in (0.6, 0.4, 0.2, 0.0):
        pred = T.tensor([[shift, 0.0, 1.0 + shift, 1.0]], dtype=np.float64)
        losses.append(float(1 - t_giou(pred, tgt).data[0]))
    assert all(a >= b for a, b in zip(losses[:-1], losses[1:]))


def test_box_format_round_trip(rng):
    b = np.c_[rng.uniform(0, 1, (10, 2)), rng.uniform(0.01, 1, (10, 2))]
    np.testing.assert_allclose(xyxy_to_cxcywh(cxcywh_to_xyxy(b)), b, atol=1e-12)


# ---------------------------------------------------------------- focal / BCE

def test_focal_saturated_positive_is_zero():
    assert float(focal_loss(T.tensor([40.0], dtype=np.float64), [1.0]).data[0]) < 1e-15


def test_focal_half_probability():
    pos = float(focal_loss(T.tensor([0.0], dtype=np.float64), [1.0]).data[0])
    neg = float(focal_loss(T.tensor([0.0], dtype=np.float64), [0.0]).data[0])
    assert pos == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-12)
    assert neg == pytest.approx(0.75 * 0.25 * math.log(2), abs=1e-12)
    # the rounded reference values quoted for this case
    assert pos == pytest.approx(0.04333, abs=5e-5)
    assert neg == pytest.approx(0.12998, abs=5e-5)


def test_focal_reduces_to_half_bce(rng):
    z = T.tensor(rng.normal(size=20) * 3, dtype=np.float64)
    t = (rng.uniform(size=20) > 0.5).astype(float)
    np.testing.assert_allclose(focal_loss(z, t, alpha=0.5, gamma=0).data, 0.5 * bce_with_logits(z, t).data,
                               atol=1e-12)


def test_bce_at_zero_logit():
    assert float(bce_with_logits(T.tensor([0.0], dtype=np.float64), [1.0]).data[0]) == pytest.approx(math.log(2))


def test_focal_gradient(rng):
    z = T.Tensor(rng.normal(size=(3, 4)) * 2, requires_grad=True, dtype=np.float64)
    t = (rng.uniform(size=(3, 4)) > 0.5).astype(float)
    assert grad_check(lambda: T.sum(focal_loss(z, t)), [z]) <= 1e-6


# ---------------------------------------------------------------- decoder loss

def test_decoder_weights_unit_components():
    assert DECODER_LOSS_WEIGHTS == (1.0, 5.0, 2.0)
    assert MATCH_COST_WEIGHTS == (2.0, 5.0, 2.0)
    assert combine_decoder_components(1.0, 1.0, 1.0) == 8.0


def _perfect_layer(gt_boxes, labels, Q=5, K=3):
    boxes = np.tile([0.5, 0.5, 0.2, 0.2], (1, Q, 1)).astype(np.float64)
    logits = np.full((1, Q, K), -60.0)
    for g, (b, k) in enumerate(zip(gt_boxes, labels)):
        boxes[0, g] = b
        logits[0, g, k] = 60.0
    return T.tensor(boxes, dtype=np.float64), T.tensor(logits, dtype=np.float64)


def test_decoder_loss_perfect_is_zero():
    gt = np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.3, 0.1]])
    tgt = [Target(gt, [2, 0])]
    boxes, logits = _perfect_layer(gt, [2, 0])
    m = match_predictions(boxes.data[0], logits.data[0], gt, [2, 0])
    assert m.as_dict() == {0: 0, 1: 1}
    total, parts = decoder_loss([(boxes, logits)], tgt, [m])
    assert float(total.data) < 1e-12


def test_decoder_loss_no_objects():
    boxes, _ = _perfect_layer(np.zeros((0, 4)), [])
    logits = T.zeros((1, 5, 3))
    empty = MatchResult(np.zeros(0, dtype=int), np.zeros(0, dtype=int), 0.0)
    total, parts = decoder_loss([(boxes, logits)], [Target(np.zeros((0, 4)), [])], [empty])
    assert float(parts["l1"].data) == 0.0 and float(parts["giou"].data) == 0.0
    assert float(parts["focal"].data) > 0


def test_decoder_loss_sums_layers(rng):
    gt = np.array([[0.4, 0.4, 0.2, 0.3]])
    b = T.tensor(np.c_[rng.uniform(0.3, 0.6, (1, 4, 2)), rng.uniform(0.1, 0.3, (1, 4, 2))].reshape(1, 4, 4),
                 dtype=np.float64)
    lg = T.tensor(rng.normal(size=(1, 4, 2)), dtype=np.float64)
    m = match_predictions(b.data[0], lg.data[0], gt, [1])
    one, _ = decoder_loss([(b, lg)], [Target(gt, [1])], [m])
    two, _ = decoder_loss([(b, lg), (b, lg)], [Target(gt, [1])], [m])
    assert float(two.data) == pytest.approx(2 * float(one.data), rel=1e-12)


def test_decoder_loss_gradient(rng):
    gt = np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.3, 0.2]])
    raw_b = T.Tensor(rng.normal(size=(1, 4, 4)) * 0.5, requires_grad=True, dtype=np.float64)
    lg = T.Tensor(rng.normal(size=(1, 4, 3)), requires_grad=True, dtype=np.float64)
    tgt = [Target(gt, [0, 2])]
    m = match_predictions(T.sigmoid(raw_b).data[0], lg.data[0], gt, [0, 2])

    def f():
        total, _ = decoder_loss([(T.sigmoid(raw_b), lg)], tgt, [m])
        return total

    assert grad_check(f, [raw_b, lg]) <= 1e-5
