"""The full prompt-conditioned detector, its training-only companion, and inference helpers."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .auxiliary import AuxHead, PromptClassifier
from .boxes import cxcywh_to_xyxy
from .decoder import Decoder, DetectionOutput
from .encoders import MultiScaleFeatures, TextEncoder, ToyBackbone, Vocabulary
from .hybrid import FusionState, HybridEncoder
from .nn import Module
from .prompts import SuperClassMap, VisualPromptEncoder, superclass_scores
from .tensor import ShapeError, Tensor


@dataclass
class ModelConfig:
    d: int = 32
    num_queries: int = 20
    decoder_layers: int = 2
    heads: int = 2
    points: int = 4
    image_size: int = 64
    use_psf: bool = True
    use_mfg: bool = True
    relu_after_product: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardResult:
    output: DetectionOutput
    memory: Tensor          # [B, S, D] fused image tokens
    prompts: Tensor         # [B, K, D] fused prompts
    state: FusionState
    level_shapes: list
    indices: np.ndarray     # query-selection token indices


class Detector(Module):
    """Backbone, text encoder, hybrid encoder, decoder and visual-prompt encoder.

    Everything needed at inference. Training-only heads live in
    :class:`AuxiliarySupervision` so they can be dropped without touching
    this module's parameters.
    """

    def __init__(self, vocab: Vocabulary, cfg: ModelConfig | None = None, seed: int = 0):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d
        self.backbone = ToyBackbone(d, rng)
        self.text = TextEncoder(vocab, d, rng)
        self.encoder = HybridEncoder(d, rng, cfg.heads, cfg.use_psf, cfg.use_mfg, cfg.relu_after_product)
        self.decoder = Decoder(d, rng, cfg.num_queries, cfg.decoder_layers, cfg.heads, cfg.points)
        self.visual = VisualPromptEncoder(d, rng, heads=cfg.heads, points=cfg.points)

    @property
    def vocab(self) -> Vocabulary:
        return self.text.vocab

    def image_features(self, images) -> MultiScaleFeatures:
        images = T._as_tensor(np.asarray(images.data if isinstance(images, Tensor) else images,
                                         dtype=self.backbone.down.weight.dtype))
        if images.ndim == 3:
            images = T.reshape(images, (1,) + images.shape)
        return self.backbone(images)

    def text_prompts(self, phrases) -> Tensor:
        return self.text(list(phrases))

    def forward(self, feats: MultiScaleFeatures, prompts: Tensor, indices: np.ndarray | None = None) -> ForwardResult:
        """Run encoder and decoder; ``prompts`` is [K, D] (shared) or [B, K, D]."""
        B = feats.maps[0].shape[0]
        if prompts.ndim == 2:
            prompts = T.expand(prompts, (B,) + prompts.shape)
        if prompts.ndim != 3 or prompts.shape[0] != B or prompts.shape[2] != feats.width:
            raise ShapeError(f"prompts {prompts.shape} do not fit {B} images of width {feats.width}")
        memory, P_end, state = self.encoder(feats, prompts)
        size = self.cfg.image_size
        sel = self.decoder.select(memory, P_end, feats.level_shapes, size, indices)
        out = self.decoder(memory, P_end, feats.level_shapes, size, sel)
        return ForwardResult(out, memory, P_end, state, feats.level_shapes, sel.indices)


class AuxiliarySupervision(Module):
    """Anchor head and prompt positivity classifier; used only by the training objective."""

    def __init__(self, d: int, seed: int = 0):
        rng = np.random.default_rng(seed + 7919)
        self.head = AuxHead(d, rng)
        self.classifier = PromptClassifier(d, rng)


# ---------------------------------------------------------------------------
# inference

def postprocess(logits: np.ndarray, boxes: np.ndarray, class_ids, top: int = 100) -> list[dict]:
    """Top-scoring (query, class) pairs per image.

    ``logits`` [B, Q, K] with column k meaning ``class_ids[k]``; boxes [B, Q, 4]
    normalised cxcywh. Returns corner-form boxes.
    """
    class_ids = np.asarray(class_ids)
    B, Q, K = logits.shape
    scores = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    out = []
    for b in range(B):
        flat = scores[b].reshape(-1)
        n = min(top, flat.size)
        order = np.argsort(-flat, kind="stable")[:n]
        q, k = np.divmod(order, K)
        out.append({"boxes": cxcywh_to_xyxy(np.asarray(boxes[b], dtype=np.float64)[q]).reshape(-1, 4),
                    "class_ids": class_ids[k], "scores": flat[order]})
    return out


def class_logits(result: ForwardResult, smap: SuperClassMap | None = None) -> Tensor:
    logits = result.output.logits
    return superclass_scores(logits, smap) if smap is not None else logits


def detect(model: Detector, images, prompts: Tensor, class_ids, smap: SuperClassMap | None = None,
           top: int = 100) -> list[dict]:
    """Predictions for a batch of images under one prompt set."""
    with T.no_grad():
        feats = model.image_features(images)
        res = model.forward(feats, prompts)
        logits = class_logits(res, smap)
        cols = smap.classes if smap is not None else class_ids
        return postprocess(logits.data, res.output.boxes.data, cols, top)
