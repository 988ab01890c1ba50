"""Focal, binary cross-entropy and box losses, matching costs, and the decoder objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .boxes import cxcywh_to_xyxy, pairwise_giou, t_cxcywh_to_xyxy, t_giou
from .matching import MatchResult, hungarian_match
from .tensor import Tensor

# focal, L1, GIoU
DECODER_LOSS_WEIGHTS = (1.0, 5.0, 2.0)
MATCH_COST_WEIGHTS = (2.0, 5.0, 2.0)


def focal_loss(logit, target, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Element-wise sigmoid focal loss ``-alpha_t (1 - p_t)^gamma log(p_t)``."""
    logit = T._as_tensor(logit)
    t = np.asarray(target, dtype=logit.dtype)
    p = T.sigmoid(logit)
    ce = -(T.log_sigmoid(logit) * t + T.log_sigmoid(-logit) * (1 - t))
    p_t = p * t + (1 - p) * (1 - t)
    alpha_t = np.asarray(alpha * t + (1 - alpha) * (1 - t), dtype=logit.dtype)
    if gamma == 0:
        return ce * alpha_t
    return ce * T.power(1 - p_t, gamma) * alpha_t


def bce_with_logits(logit, target) -> Tensor:
    """Element-wise binary cross-entropy on logits."""
    logit = T._as_tensor(logit)
    t = np.asarray(target, dtype=logit.dtype)
    return -(T.log_sigmoid(logit) * t + T.log_sigmoid(-logit) * (1 - t))


def combine_decoder_components(focal, l1, giou):
    w = DECODER_LOSS_WEIGHTS
    return w[0] * focal + w[1] * l1 + w[2] * giou


def matching_cost(pred_boxes: np.ndarray, logits: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray,
                  alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    """[G, Q] cost: focal-style alignment + L1 + negative GIoU, weighted 2/5/2."""
    logits = np.asarray(logits, dtype=np.float64)
    p = 1.0 / (1.0 + np.exp(-logits[:, gt_labels].T))  # [G, Q]
    eps = 1e-8
    pos = alpha * (1 - p) ** gamma * -np.log(p + eps)
    neg = (1 - alpha) * p ** gamma * -np.log(1 - p + eps)
    c_cls = pos - neg
    c_l1 = np.abs(np.asarray(gt_boxes)[:, None, :] - np.asarray(pred_boxes)[None, :, :]).sum(-1)
    c_giou = -pairwise_giou(cxcywh_to_xyxy(gt_boxes), cxcywh_to_xyxy(np.clip(pred_boxes, 1e-6, None)))
    wc, wb, wg = MATCH_COST_WEIGHTS
    return wc * c_cls + wb * c_l1 + wg * c_giou


def match_predictions(pred_boxes: np.ndarray, logits: np.ndarray, gt_boxes, gt_labels) -> MatchResult:
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.intp)
    if len(gt_boxes) == 0:
        return hungarian_match(np.zeros((0, len(pred_boxes))))
    return hungarian_match(matching_cost(pred_boxes, logits, gt_boxes, gt_labels))


@dataclass
class Target:
    """Ground truth for one image: normalised cxcywh boxes and prompt-column labels."""

    boxes: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.intp).reshape(-1)


def set_prediction_terms(boxes: Tensor, logits: Tensor, targets: list[Target], matches: list[MatchResult]):
    """Unweighted (focal, L1, 1-GIoU) for one prediction layer, normalised by the ground-truth count."""
    B, Q, K = logits.shape
    num_gt = max(1, sum(len(t.labels) for t in targets))
    cls_target = np.zeros((B, Q, K))
    flat_idx, tgt_boxes = [], []
    for b, (tgt, m) in enumerate(zip(targets, matches)):
        for g, q in zip(m.gt_indices, m.query_indices):
            cls_target[b, q, tgt.labels[g]] = 1.0
            flat_idx.append(b * Q + q)
            tgt_boxes.append(tgt.boxes[g])
    focal = T.sum(focal_loss(logits, cls_target)) * (1.0 / num_gt)
    if not flat_idx:
        zero = T.sum(boxes) * 0.0
        return focal, zero, zero
    pred = T.take(T.reshape(boxes, (B * Q, 4)), np.asarray(flat_idx), axis=0)
    tgt = T.tensor(np.asarray(tgt_boxes), dtype=pred.dtype)
    l1 = T.sum(T.absolute(pred - tgt)) * (1.0 / num_gt)
    g = t_giou(t_cxcywh_to_xyxy(pred), t_cxcywh_to_xyxy(tgt))
    giou_term = T.sum(1.0 - g) * (1.0 / num_gt)
    return focal, l1, giou_term


def decoder_loss(layers: list[tuple[Tensor, Tensor]], targets: list[Target], matches: list[MatchResult]):
    """Deep-supervised set-prediction loss summed over ``(boxes, logits)`` layers.

    Returns the weighted total and a dict of unweighted component sums.
    """
    parts = {"focal": None, "l1": None, "giou": None}
    for boxes, logits in layers:
        for key, val in zip(parts, set_prediction_terms(boxes, logits, targets, matches)):
            parts[key] = val if parts[key] is None else parts[key] + val
    total = combine_decoder_components(parts["focal"], parts["l1"], parts["giou"])
    return total, parts
