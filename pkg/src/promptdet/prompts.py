"""Concept-prompt generators: visual prompts from boxes, and learned prompt
embeddings with super-class (max over several vectors per class) scoring."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import MultiScaleFeatures
from .nn import LayerNorm, Linear, MLP, Module, MSDeformAttn, sincos_encode, _param
from .tensor import ContractError, ShapeError, Tensor

SOURCES = ("text", "visual", "optimized")


@dataclass
class ConceptPromptSet:
    """K prompt vectors in canonical class order, with provenance and positivity."""

    vectors: Tensor                       # [K, D] or [B, K, D]
    sources: list[str]
    class_ids: list[int]
    positive: np.ndarray | None = None    # [K] or [B, K]; training only

    def __post_init__(self):
        K = self.vectors.shape[-2]
        if K < 1:
            raise ContractError("a prompt set needs at least one prompt")
        if len(self.sources) != K or len(self.class_ids) != K:
            raise ShapeError(f"metadata length does not match {K} prompts")
        bad = set(self.sources) - set(SOURCES)
        if bad:
            raise ValueError(f"unknown prompt sources {sorted(bad)}")

    def __len__(self) -> int:
        return self.vectors.shape[-2]


def encode_boxes_sincos(boxes) -> Tensor:
    """[N, 4] normalised cxcywh -> [N, 128] sine-cosine encoding."""
    arr = boxes.data if isinstance(boxes, Tensor) else np.asarray(boxes, dtype=np.float64)
    if arr.shape[-1] != 4:
        raise ShapeError(f"boxes must have 4 coordinates, got {arr.shape}")
    if np.any(arr < 0) or np.any(arr > 1):
        raise ValueError("box coordinates must lie in [0, 1]")
    return sincos_encode(boxes if isinstance(boxes, Tensor) else T.tensor(arr))


class VisualPromptLayer(Module):
    def __init__(self, d: int, rng: np.random.Generator, heads: int, points: int):
        self.attn = MSDeformAttn(d, rng, heads=heads, levels=4, points=points, offset_init="grid")
        self.norm1 = LayerNorm(d)
        self.ffn = MLP([d, 2 * d, d], rng)
        self.norm2 = LayerNorm(d)

    def __call__(self, q, q_pos, ref, memory, level_shapes):
        q = self.norm1(q + self.attn(q + q_pos, ref, memory, level_shapes))
        return self.norm2(q + self.ffn(q))


class VisualPromptEncoder(Module):
    """Boxes -> (query, query position) -> three deformable cross-attention
    layers over image features -> channel concat -> aggregator."""

    def __init__(self, d: int, rng: np.random.Generator, num_layers: int = 3, heads: int = 2, points: int = 4):
        self.query = Linear(128, d, rng)
        self.query_pos = Linear(128, d, rng)
        self.layers = [VisualPromptLayer(d, rng, heads, points) for _ in range(num_layers)]
        self.aggregate = Linear(num_layers * d, d, rng)
        self.aggregate_norm = LayerNorm(d)

    def box_features(self, boxes: np.ndarray, feats: MultiScaleFeatures) -> Tensor:
        """Per-box features [B, N, D] for boxes [B, N, 4] (normalised cxcywh)."""
        boxes = np.asarray(boxes, dtype=feats.maps[0].dtype)
        B, N, _ = boxes.shape
        r = encode_boxes_sincos(boxes.reshape(B * N, 4))
        q = T.reshape(self.query(r), (B, N, -1))
        q_pos = T.reshape(self.query_pos(r), (B, N, -1))
        memory = feats.tokens()
        ref = T.tensor(boxes)
        outs = []
        for layer in self.layers:
            q = layer(q, q_pos, ref, memory, feats.level_shapes)
            outs.append(q)
        return self.aggregate_norm(self.aggregate(T.concat(outs, axis=-1)))

    def __call__(self, boxes: np.ndarray, groups: np.ndarray, feats: MultiScaleFeatures) -> Tensor:
        """Class prompts [B, K, D]: per-box features averaged with ``groups`` [B, K, N] weights."""
        per_box = self.box_features(boxes, feats)
        return T.matmul(T.tensor(np.asarray(groups, dtype=per_box.dtype)), per_box)


def group_matrix(class_ids, classes) -> np.ndarray:
    """[K, N] row-normalised membership of boxes in each class."""
    class_ids = np.asarray(class_ids)
    M = (class_ids[None, :] == np.asarray(classes)[:, None]).astype(np.float64)
    counts = M.sum(1, keepdims=True)
    if np.any(counts == 0):
        raise ContractError("every requested class needs at least one box")
    return M / counts


def visual_prompt_forward(encoder: VisualPromptEncoder, boxes, class_ids, feats: MultiScaleFeatures) -> ConceptPromptSet:
    """One prompt per distinct class among the boxes of a single image (``feats`` batch of 1)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        raise ContractError("visual prompts need at least one box")
    classes = sorted(set(int(c) for c in class_ids))
    groups = group_matrix(class_ids, classes)
    P = encoder(boxes[None], groups[None], feats)[0]
    return ConceptPromptSet(P, ["visual"] * len(classes), classes)


def prompt_mse(P_v: Tensor, P_t: Tensor) -> Tensor:
    """Squared difference averaged over prompts and channels."""
    if P_v.shape != P_t.shape:
        raise ShapeError(f"prompt shapes differ: {P_v.shape} vs {P_t.shape}")
    d = P_v - P_t
    return T.mean(d * d)


def visual_prompt_loss(P_v: Tensor, P_t: Tensor, decoder_loss) -> Tensor:
    return prompt_mse(P_v, P_t) + decoder_loss


# ---------------------------------------------------------------------------
# optimized prompts

@dataclass
class SuperClassMap:
    """Class id -> rows of the prompt table that represent it."""

    rows: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        seen: set[int] = set()
        for cid, idx in self.rows.items():
            if not idx:
                raise ContractError(f"class {cid} has no prompt rows")
            if seen & set(idx):
                raise ContractError("prompt rows shared between classes")
            seen |= set(idx)

    @property
    def classes(self) -> list[int]:
        return sorted(self.rows)

    @property
    def num_rows(self) -> int:
        return sum(len(v) for v in self.rows.values())

    def to_table(self) -> dict:
        return {"class_ids": self.classes, "rows": [list(map(int, self.rows[c])) for c in self.classes]}

    @classmethod
    def from_table(cls, table: dict) -> "SuperClassMap":
        return cls({int(c): list(r) for c, r in zip(table["class_ids"], table["rows"])})


class OptimizedPrompts(Module):
    """Learnable prompt table; ``M`` consecutive rows per class."""

    def __init__(self, num_rows: int, d: int, rng: np.random.Generator, std: float = 0.02):
        self.embedding = _param(rng.normal(0, std, size=(num_rows, d)))

    def __call__(self) -> Tensor:
        return self.embedding


def init_optimized_prompts(classes, M: int, d: int, seed: int) -> tuple[OptimizedPrompts, SuperClassMap, ConceptPromptSet]:
    if M < 1:
        raise ValueError("M must be at least 1")
    classes = list(classes)
    rng = np.random.default_rng(seed)
    table = OptimizedPrompts(len(classes) * M, d, rng)
    smap = SuperClassMap({int(c): list(range(i * M, (i + 1) * M)) for i, c in enumerate(classes)})
    owners = [int(c) for c in classes for _ in range(M)]
    pset = ConceptPromptSet(table.embedding, ["optimized"] * len(owners), owners)
    return table, smap, pset


def superclass_scores(raw: Tensor, smap: SuperClassMap) -> Tensor:
    """Per class, the max over its prompt columns: [..., rows] -> [..., classes]."""
    raw = T._as_tensor(raw)
    ncols = raw.shape[-1]
    covered = sorted(i for rows in smap.rows.values() for i in rows)
    if covered != list(range(ncols)):
        raise ContractError(f"score columns 0..{ncols - 1} are not exactly covered by the super-class map")
    cols = [T.max(T.take(raw, np.asarray(smap.rows[c]), axis=-1), axis=-1, keepdims=True) for c in smap.classes]
    return T.concat(cols, axis=-1)
