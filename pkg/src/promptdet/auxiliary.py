"""Training-only supervision: anchor head with a contrastive classifier, and the
prompt multi-label loss. Nothing here runs at inference."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .boxes import box_iou, cxcywh_to_xyxy, t_giou
from .decoder import SimilarityHead
from .encoders import MultiScaleFeatures
from .losses import bce_with_logits, focal_loss
from .nn import Conv2d, MLP, Module
from .tensor import ShapeError, Tensor

AUX_LOSS_WEIGHTS = (6.0, 6.0, 12.0)   # class, centerness, IoU
PROMPT_LOSS_WEIGHT = 6.0
ANCHOR_SCALE = 4
ATSS_TOPK = 9


@dataclass(frozen=True)
class AnchorSet:
    """One square anchor per token, ordered by (scale, row, col). Pixel units."""

    centers: np.ndarray   # [A, 2] (x, y)
    boxes: np.ndarray     # [A, 4] corner form
    strides: np.ndarray   # [A]
    levels: np.ndarray    # [A]
    level_sizes: tuple

    def __len__(self) -> int:
        return len(self.centers)


def generate_anchors(level_shapes, image_size: int, base_scale: int = ANCHOR_SCALE) -> AnchorSet:
    centers, boxes, strides, levels, sizes = [], [], [], [], []
    for lvl, (H, W) in enumerate(level_shapes):
        stride = image_size // H
        ys, xs = np.meshgrid((np.arange(H) + 0.5) * stride, (np.arange(W) + 0.5) * stride, indexing="ij")
        c = np.stack([xs.ravel(), ys.ravel()], -1)
        half = base_scale * stride / 2
        centers.append(c)
        boxes.append(np.concatenate([c - half, c + half], -1))
        strides.append(np.full(H * W, stride))
        levels.append(np.full(H * W, lvl))
        sizes.append(H * W)
    return AnchorSet(np.concatenate(centers).astype(np.float64), np.concatenate(boxes).astype(np.float64),
                     np.concatenate(strides), np.concatenate(levels), tuple(sizes))


def anchors_for(feats: MultiScaleFeatures, image_size: int) -> AnchorSet:
    return generate_anchors(feats.level_shapes, image_size)


@dataclass
class Assignment:
    gt_index: np.ndarray    # [A] matched ground truth, -1 for background
    labels: np.ndarray      # [A] prompt column, -1 for background
    centerness: np.ndarray  # [A] target, 0 for background

    @property
    def positive(self) -> np.ndarray:
        return self.gt_index >= 0


def centerness_target(centers: np.ndarray, gt_xyxy: np.ndarray) -> np.ndarray:
    """sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b)) for anchor centres inside their box."""
    l = centers[:, 0] - gt_xyxy[:, 0]
    t = centers[:, 1] - gt_xyxy[:, 1]
    r = gt_xyxy[:, 2] - centers[:, 0]
    b = gt_xyxy[:, 3] - centers[:, 1]
    lr = np.minimum(l, r) / np.maximum(l, r)
    tb = np.minimum(t, b) / np.maximum(t, b)
    return np.sqrt(np.clip(lr * tb, 0, None))


def atss_assign(anchors: AnchorSet, gt_xyxy, gt_labels, topk: int = ATSS_TOPK) -> Assignment:
    """Adaptive training sample selection.

    ``gt_xyxy`` is in pixels. Per ground truth, the ``topk`` anchors nearest by
    centre distance are taken from every level; the IoU threshold is the mean
    plus the sample standard deviation of their IoUs; candidates at or above
    it whose centre lies inside the box are positive. An anchor claimed by
    several boxes goes to the one with the highest IoU (lowest index on ties).
    """
    A = len(anchors)
    gt_xyxy = np.asarray(gt_xyxy, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.intp).reshape(-1)
    G = len(gt_xyxy)
    gt_index = np.full(A, -1, dtype=np.intp)
    if G == 0:
        return Assignment(gt_index, np.full(A, -1, dtype=np.intp), np.zeros(A))
    ious = box_iou(anchors.boxes, gt_xyxy)  # [A, G]
    gt_c = (gt_xyxy[:, :2] + gt_xyxy[:, 2:]) / 2
    dist = np.sqrt(((anchors.centers[:, None, :] - gt_c[None]) ** 2).sum(-1))  # [A, G]
    cand_mask = np.zeros((A, G), dtype=bool)
    start = 0
    for size in anchors.level_sizes:
        k = min(topk, size)
        order = np.argsort(dist[start:start + size], axis=0, kind="stable")[:k]
        cand_mask[start + order, np.arange(G)[None, :]] = True
        start += size
    thr = np.empty(G)
    for g in range(G):
        vals = ious[cand_mask[:, g], g]
        thr[g] = vals.mean() + vals.std(ddof=1)
    l = anchors.centers[:, None, 0] - gt_xyxy[None, :, 0]
    t = anchors.centers[:, None, 1] - gt_xyxy[None, :, 1]
    r = gt_xyxy[None, :, 2] - anchors.centers[:, None, 0]
    b = gt_xyxy[None, :, 3] - anchors.centers[:, None, 1]
    inside = np.minimum(np.minimum(l, t), np.minimum(r, b)) > 0.01
    pos = cand_mask & (ious >= thr[None, :]) & inside
    masked = np.where(pos, ious, -np.inf)
    best = np.argmax(masked, axis=1)
    has = pos.any(axis=1)
    gt_index[has] = best[has]
    labels = np.full(A, -1, dtype=np.intp)
    labels[has] = gt_labels[best[has]]
    ctr = np.zeros(A)
    if has.any():
        ctr[has] = centerness_target(anchors.centers[has], gt_xyxy[best[has]])
    return Assignment(gt_index, labels, ctr)


def atss_assign_reference(anchors: AnchorSet, gt_xyxy, gt_labels, topk: int = ATSS_TOPK) -> np.ndarray:
    """Loop-by-loop restatement of the ATSS rule; returns per-anchor labels (-1 background)."""
    A = len(anchors)
    gts = [list(map(float, g)) for g in np.asarray(gt_xyxy, dtype=np.float64).reshape(-1, 4)]
    labels = [-1] * A
    best_iou = [-1.0] * A

    def iou(a, g):
        iw = max(0.0, min(a[2], g[2]) - max(a[0], g[0]))
        ih = max(0.0, min(a[3], g[3]) - max(a[1], g[1]))
        inter = iw * ih
        ua = (a[2] - a[0]) * (a[3] - a[1]) + (g[2] - g[0]) * (g[3] - g[1]) - inter
        return inter / ua

    for gi, g in enumerate(gts):
        gcx, gcy = (g[0] + g[2]) / 2, (g[1] + g[3]) / 2
        candidates = []
        start = 0
        for size in anchors.level_sizes:
            ranked = sorted(range(start, start + size),
                            key=lambda a: (math.sqrt((anchors.centers[a][0] - gcx) ** 2
                                                     + (anchors.centers[a][1] - gcy) ** 2), a))
            candidates.extend(ranked[:min(topk, size)])
            start += size
        cand_ious = [iou(anchors.boxes[a], g) for a in candidates]
        n = len(cand_ious)
        mu = sum(cand_ious) / n
        sd = math.sqrt(sum((v - mu) ** 2 for v in cand_ious) / (n - 1))
        for a, v in zip(candidates, cand_ious):
            cx, cy = anchors.centers[a]
            inside = min(cx - g[0], cy - g[1], g[2] - cx, g[3] - cy) > 0.01
            if v >= mu + sd and inside and v > best_iou[a]:
                best_iou[a] = v
                labels[a] = int(gt_labels[gi])
    return np.asarray(labels, dtype=np.intp)


class AuxHead(Module):
    """Shared conv towers over each scale; contrastive class logits plus
    distance-to-border boxes and centerness."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.cls_tower = Conv2d(d, d, 3, rng)
        self.reg_tower = Conv2d(d, d, 3, rng)
        self.reg_out = Conv2d(d, 4, 3, rng)
        self.reg_out.weight.data *= 0.1
        self.ctr_out = Conv2d(d, 1, 3, rng)
        self.contrast = SimilarityHead(d, rng)

    def __call__(self, memory: Tensor, prompts: Tensor, level_shapes, anchors: AnchorSet, image_size: int):
        feats = MultiScaleFeatures.from_tokens(memory, level_shapes)
        cls_feats, regs, ctrs = [], [], []
        for m in feats.maps:
            B, D, H, W = m.shape
            c = T.relu(self.cls_tower(m))
            r = T.relu(self.reg_tower(m))
            cls_feats.append(T.transpose(T.reshape(c, (B, D, H * W)), (0, 2, 1)))
            regs.append(T.transpose(T.reshape(self.reg_out(r), (B, 4, H * W)), (0, 2, 1)))
            ctrs.append(T.reshape(self.ctr_out(r), (B, H * W)))
        a = T.concat(cls_feats, axis=1)              # [B, A, D]
        logits = self.contrast(a, prompts)           # [B, A, K]
        dist = T.exp(T.clip(T.concat(regs, axis=1), -6.0, 6.0)) * np.repeat(anchors.strides[:, None], 4, 1).astype(a.dtype)
        centers = np.concatenate([anchors.centers, anchors.centers], -1) / image_size
        sign = np.array([-1.0, -1.0, 1.0, 1.0])
        boxes = T.tensor(centers.astype(a.dtype)) + dist * (sign / image_size).astype(a.dtype)  # [B, A, 4] xyxy
        return logits, boxes, T.concat(ctrs, axis=1)


def aux_head_forward(head: AuxHead, memory: Tensor, prompts: Tensor, level_shapes, image_size: int):
    anchors = generate_anchors(level_shapes, image_size)
    return head(memory, prompts, level_shapes, anchors, image_size)


def combine_aux_components(cls, ctr, iou):
    w = AUX_LOSS_WEIGHTS
    return w[0] * cls + w[1] * ctr + w[2] * iou


def aux_loss(logits: Tensor, boxes: Tensor, centerness: Tensor, assignments: list[Assignment],
             gt_boxes_xyxy: list[np.ndarray], image_size: int):
    """Weighted 6/6/12 focal + centerness BCE + (1 - GIoU); box terms over positives."""
    B, A, K = logits.shape
    cls_target = np.zeros((B, A, K))
    pos_flat, tgt_boxes, ctr_tgt = [], [], []
    for b, asg in enumerate(assignments):
        idx = np.nonzero(asg.positive)[0]
        cls_target[b, idx, asg.labels[idx]] = 1.0
        pos_flat.extend(b * A + idx)
        tgt_boxes.extend(np.asarray(gt_boxes_xyxy[b])[asg.gt_index[idx]] / image_size)
        ctr_tgt.extend(asg.centerness[idx])
    num_pos = max(1, len(pos_flat))
    cls = T.sum(focal_loss(logits, cls_target)) * (1.0 / num_pos)
    if not pos_flat:
        zero = T.sum(boxes) * 0.0 + T.sum(centerness) * 0.0
        parts = {"class": cls, "centerness": zero, "iou": zero}
    else:
        pos_flat = np.asarray(pos_flat)
        pb = T.take(T.reshape(boxes, (B * A, 4)), pos_flat, axis=0)
        pc = T.take(T.reshape(centerness, (B * A,)), pos_flat, axis=0)
        g = t_giou(pb, T.tensor(np.asarray(tgt_boxes), dtype=pb.dtype))
        parts = {"class": cls,
                 "centerness": T.mean(bce_with_logits(pc, np.asarray(ctr_tgt))),
                 "iou": T.mean(1.0 - g)}
    return combine_aux_components(parts["class"], parts["centerness"], parts["iou"]), parts


class PromptClassifier(Module):
    """Two-layer MLP mapping each fused prompt to a positivity logit."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.mlp = MLP([d, d, 1], rng)

    def __call__(self, prompts: Tensor) -> Tensor:
        out = self.mlp(prompts)
        return T.reshape(out, out.shape[:-1])


def prompt_multilabel_loss(classifier: PromptClassifier, prompts: Tensor, g) -> Tensor:
    """Mean binary cross-entropy between prompt positivity logits and ``g``."""
    g = np.asarray(g, dtype=np.float64)
    logits = classifier(prompts)
    if logits.shape != g.shape:
        raise ShapeError(f"positivity labels {g.shape} do not match prompts {logits.shape}")
    return T.mean(bce_with_logits(logits, g))
