"""Box conversions, IoU and GIoU in numpy and differentiable forms."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def cxcywh_to_xyxy(b):
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def xyxy_to_cxcywh(b):
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


def _check_valid(b: np.ndarray) -> None:
    if np.any(b[..., 2] <= b[..., 0]) or np.any(b[..., 3] <= b[..., 1]):
        raise ValueError("degenerate box with non-positive width or height")


def box_iou(a, b) -> np.ndarray:
    """Pairwise IoU of corner-form boxes [N,4] x [M,4] -> [N,M]."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def pairwise_giou(a, b) -> np.ndarray:
    """Pairwise GIoU of corner-form boxes [N,4] x [M,4] -> [N,M]."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_valid(a)
    _check_valid(b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    elt = np.minimum(a[:, None, :2], b[None, :, :2])
    erb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    ewh = erb - elt
    enclosure = ewh[..., 0] * ewh[..., 1]
    return inter / union - (enclosure - union) / enclosure


def giou(a, b) -> float:
    """GIoU of two corner-form boxes; raises on zero-area input."""
    return float(pairwise_giou(np.asarray(a)[None], np.asarray(b)[None])[0, 0])


def t_cxcywh_to_xyxy(b: Tensor) -> Tensor:
    xy, wh = b[..., :2], b[..., 2:]
    return T.concat([xy - wh * 0.5, xy + wh * 0.5], axis=-1)


def t_giou(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise GIoU of matched corner-form boxes [..., 4] -> [...]."""
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    lt = T.maximum(a[..., :2], b[..., :2])
    rb = T.minimum(a[..., 2:], b[..., 2:])
    wh = T.relu(rb - lt)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    elt = T.minimum(a[..., :2], b[..., :2])
    erb = T.maximum(a[..., 2:], b[..., 2:])
    ewh = erb - elt
    enclosure = ewh[..., 0] * ewh[..., 1]
    return inter / union - (enclosure - union) / enclosure
