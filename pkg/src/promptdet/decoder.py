"""Language-guided query selection and the cross-modality transformer decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .hybrid import token_geometry
from .nn import LayerNorm, Linear, MLP, Module, MSDeformAttn, MultiheadAttention, inverse_sigmoid, sincos_encode, _param
from .tensor import ContractError, ShapeError, Tensor

PRIOR_PROB = 0.01


class SimilarityHead(Module):
    """Contrastive classifier: ``x . Linear(prompt)^T / sqrt(d) + bias`` with one scalar bias."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.proj = Linear(d, d, rng)
        self.bias = _param(np.array(-math.log((1 - PRIOR_PROB) / PRIOR_PROB)))

    def __call__(self, feats: Tensor, prompts: Tensor) -> Tensor:
        if feats.shape[-1] != prompts.shape[-1]:
            raise ShapeError(f"width mismatch: {feats.shape} vs {prompts.shape}")
        d = feats.shape[-1]
        keys = self.proj(prompts)
        return T.matmul(feats, T.transpose(keys, (0, 2, 1))) * (1.0 / math.sqrt(d)) + self.bias


def similarity_scores(head: SimilarityHead, query_feats: Tensor, prompts: Tensor) -> Tensor:
    """Unbatched form: [Q, D], [K, D] -> logits [Q, K]."""
    out = head(T.reshape(query_feats, (1,) + query_feats.shape), T.reshape(prompts, (1,) + prompts.shape))
    return out[0]


@dataclass
class QuerySelection:
    indices: np.ndarray      # [B, Q] selected token indices
    reference: Tensor        # [B, Q, 4] initial boxes (sigmoid space)
    logits: Tensor           # [B, Q, K] token logits at the selected indices


def topk_tokens(scores: np.ndarray, q: int) -> np.ndarray:
    """Top-``q`` indices per row by descending score, ties to the lower index."""
    if q > scores.shape[-1]:
        raise ContractError(f"cannot select {q} queries from {scores.shape[-1]} tokens")
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :q]


def proposal_boxes(level_shapes, image_size: int) -> np.ndarray:
    """One square proposal per token: centre at the token, side twice its stride."""
    centers, levels = token_geometry(level_shapes)
    strides = np.array([image_size // H for H, _ in level_shapes])[levels]
    side = np.minimum(2.0 * strides / image_size, 0.95)
    return np.concatenate([centers, side[:, None], side[:, None]], axis=-1)


@dataclass
class DetectionOutput:
    """Final boxes/logits plus the per-layer outputs used for deep supervision."""

    boxes: Tensor                 # [B, Q, 4] normalised cxcywh
    logits: Tensor                # [B, Q, K]
    layers: list = field(default_factory=list)   # [(boxes, logits)] for every decoder layer
    proposals: tuple | None = None               # (boxes, logits) of the selected tokens

    @property
    def scores(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits.data.astype(np.float64)))


class DecoderLayer(Module):
    def __init__(self, d: int, rng: np.random.Generator, heads: int = 2, points: int = 4):
        self.self_attn = MultiheadAttention(d, heads, rng)
        self.norm1 = LayerNorm(d)
        self.cross_attn = MSDeformAttn(d, rng, heads=heads, levels=4, points=points, offset_init="grid")
        self.norm2 = LayerNorm(d)
        self.prompt_attn = MultiheadAttention(d, heads, rng)
        self.norm3 = LayerNorm(d)
        self.ffn = MLP([d, 2 * d, d], rng)
        self.norm4 = LayerNorm(d)

    def __call__(self, q: Tensor, pos: Tensor, ref: Tensor, memory: Tensor, level_shapes, prompts: Tensor) -> Tensor:
        qp = q + pos
        q = self.norm1(q + self.self_attn(qp, qp, q))
        q = self.norm2(q + self.cross_attn(q + pos, ref, memory, level_shapes))
        q = self.norm3(q + self.prompt_attn(q + pos, prompts, prompts))
        return self.norm4(q + self.ffn(q))


class Decoder(Module):
    """Query selection from encoder tokens followed by iterative box refinement."""

    def __init__(self, d: int, rng: np.random.Generator, num_queries: int = 20, num_layers: int = 2,
                 heads: int = 2, points: int = 4):
        self.num_queries = num_queries
        self.query_embed = _param(rng.normal(0, 1.0, size=(num_queries, d)))
        self.layers = [DecoderLayer(d, rng, heads, points) for _ in range(num_layers)]
        self.ref_point_head = MLP([128, d, d], rng)
        self.box_head = MLP([d, d, d, 4], rng, zero_last=True)
        self.class_head = SimilarityHead(d, rng)
        self.enc_norm = LayerNorm(d)

    def select(self, memory: Tensor, prompts: Tensor, level_shapes, image_size: int,
               indices: np.ndarray | None = None) -> QuerySelection:
        """Pick the ``num_queries`` tokens most similar to any prompt.

        Passing ``indices`` reuses an earlier selection, which keeps the
        discrete choice fixed under finite-difference probing.
        """
        B, S, D = memory.shape
        enc = self.enc_norm(memory)
        token_logits = self.class_head(enc, prompts)  # [B, S, K]
        if indices is None:
            indices = topk_tokens(token_logits.data.max(axis=-1), self.num_queries)
        flat = (indices + np.arange(B)[:, None] * S).reshape(-1)
        sel_feats = T.reshape(T.take(T.reshape(enc, (B * S, D)), flat, axis=0), (B, -1, D))
        sel_logits = T.reshape(T.take(T.reshape(token_logits, (B * S, -1)), flat, axis=0), (B, len(flat) // B, -1))
        props = proposal_boxes(level_shapes, image_size)[indices]  # [B, Q, 4]
        ref = T.sigmoid(self.box_head(sel_feats) + inverse_sigmoid(T.tensor(props)))
        return QuerySelection(indices, ref, sel_logits)

    def __call__(self, memory: Tensor, prompts: Tensor, level_shapes, image_size: int,
                 selection: QuerySelection) -> DetectionOutput:
        B = memory.shape[0]
        Qn = selection.indices.shape[1]
        q = T.expand(self.query_embed[:Qn], (B, Qn, self.query_embed.shape[1]))
        ref = T.detach(selection.reference)
        layers = []
        for layer in self.layers:
            pos = self.ref_point_head(sincos_encode(ref))
            q = layer(q, pos, ref, memory, level_shapes, prompts)
            boxes = T.sigmoid(self.box_head(q) + inverse_sigmoid(ref))
            logits = self.class_head(q, prompts)
            layers.append((boxes, logits))
            ref = T.detach(boxes)
        boxes, logits = layers[-1]
        return DetectionOutput(boxes, logits, layers, (selection.reference, selection.logits))
