"""Prompt-visual hybrid encoder: bidirectional cross-modal attention, progressive
single-scale fusion along top-down and bottom-up paths, and multi-scale fusion
gating over the full token set."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import MultiScaleFeatures
from .nn import Conv2d, LayerNorm, Linear, MLP, Module, MSDeformAttn, merge_heads, sincos_encode, split_heads, _param
from .tensor import ContractError, ShapeError, Tensor


@dataclass
class FusionState:
    """Running record of one hybrid-encoder pass.

    ``l`` counts prompt fusions; ``schedule`` logs one ``(scale, stage)`` entry
    per X-MHA call, with scale 3..6 for single maps and ``"all"`` for the
    full-scale fusion.
    """

    prompts: Tensor
    l: int = 0
    schedule: list = field(default_factory=list)

    def advance(self, prompts: Tensor, scale, stage) -> None:
        self.prompts = prompts
        self.l += 1
        self.schedule.append((scale, stage))


class XMHA(Module):
    """Image tokens and prompts update each other from one shared logit matrix.

    Both updates enter residually through output projections that start at
    zero, so a fresh module is the identity.
    """

    def __init__(self, d: int, rng: np.random.Generator, heads: int = 2):
        if d % heads:
            raise ShapeError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.img_q = Linear(d, d, rng)
        self.prompt_q = Linear(d, d, rng)
        self.img_v = Linear(d, d, rng)
        self.prompt_v = Linear(d, d, rng)
        self.img_out = Linear(d, d, rng, zero=True)
        self.prompt_out = Linear(d, d, rng, zero=True)

    def __call__(self, img: Tensor, prompts: Tensor) -> tuple[Tensor, Tensor]:
        if img.shape[-1] != prompts.shape[-1]:
            raise ShapeError(f"width mismatch: image {img.shape} vs prompts {prompts.shape}")
        if img.ndim != 3 or prompts.ndim != 3 or img.shape[0] != prompts.shape[0]:
            raise ShapeError(f"expected [B,S,D] and [B,K,D], got {img.shape} and {prompts.shape}")
        h = self.heads
        qi = split_heads(self.img_q(img), h)
        qp = split_heads(self.prompt_q(prompts), h)
        vi = split_heads(self.img_v(img), h)
        vp = split_heads(self.prompt_v(prompts), h)
        logits = T.matmul(qi, T.transpose(qp, (0, 1, 3, 2))) * (1.0 / math.sqrt(qi.shape[-1]))  # [B,h,S,K]
        img_upd = T.matmul(T.softmax(logits), vp)
        prompt_upd = T.matmul(T.softmax(T.transpose(logits, (0, 1, 3, 2))), vi)
        return img + self.img_out(merge_heads(img_upd)), prompts + self.prompt_out(merge_heads(prompt_upd))


def x_mha(module: XMHA, img_tokens: Tensor, prompts: Tensor) -> tuple[Tensor, Tensor]:
    """Unbatched convenience form: [S, D], [K, D] -> same shapes."""
    a, b = module(T.reshape(img_tokens, (1,) + img_tokens.shape), T.reshape(prompts, (1,) + prompts.shape))
    return a[0], b[0]


def _flatten(m: Tensor) -> Tensor:
    B, D, H, W = m.shape
    return T.transpose(T.reshape(m, (B, D, H * W)), (0, 2, 1))


def _unflatten(tokens: Tensor, H: int, W: int) -> Tensor:
    B, _, D = tokens.shape
    return T.reshape(T.transpose(tokens, (0, 2, 1)), (B, D, H, W))


class Block(Module):
    """3x3 conv + 1x1 conv + identity, summed, then ReLU."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.conv3 = Conv2d(d, d, 3, rng)
        self.conv1 = Conv2d(d, d, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.conv3(x) + self.conv1(x) + x)


class SingleFusionLayer(Module):
    """Fuse a neighbouring map into ``C_j`` and exchange information with the prompts.

    ``direction`` is ``"up"`` when the neighbour is coarser (nearest-neighbour
    upsampling) and ``"down"`` when it is finer (stride-2 3x3 conv).
    """

    def __init__(self, d: int, direction: str, rng: np.random.Generator, heads: int = 2):
        if direction not in ("up", "down"):
            raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
        self.direction = direction
        self.resize = Conv2d(d, d, 3, rng, stride=2) if direction == "down" else None
        self.mix = Conv2d(2 * d, d, 1, rng)
        self.block = Block(d, rng)
        self.xmha = XMHA(d, rng, heads)
        self.skip = Conv2d(2 * d, d, 1, rng)

    def __call__(self, c_i: Tensor, c_j: Tensor, prompts: Tensor) -> tuple[Tensor, Tensor]:
        hi, wi = c_i.shape[2:]
        hj, wj = c_j.shape[2:]
        if self.direction == "up":
            if (hi * 2, wi * 2) != (hj, wj):
                raise ContractError(f"up-fusion needs a map at half resolution, got {c_i.shape} -> {c_j.shape}")
            resized = T.upsample_nearest(c_i, 2)
        else:
            if (hi, wi) != (hj * 2, wj * 2):
                raise ContractError(f"down-fusion needs a map at double resolution, got {c_i.shape} -> {c_j.shape}")
            resized = self.resize(c_i)
        c_ij = T.concat([resized, c_j], axis=1)
        hybrid = self.block(self.mix(c_ij))
        delta, prompts = self.xmha(_flatten(hybrid), prompts)
        return _unflatten(delta, hj, wj) + self.skip(c_ij), prompts


def single_fusion_layer(layer: SingleFusionLayer, c_i: Tensor, c_j: Tensor, prompts: Tensor):
    return layer(c_i, c_j, prompts)


class ProgressiveSingleScaleFusion(Module):
    """C6 fusion, then top-down to C3, then bottom-up back to C6: seven X-MHA calls."""

    def __init__(self, d: int, rng: np.random.Generator, heads: int = 2):
        self.top = XMHA(d, rng, heads)
        self.top_down = [SingleFusionLayer(d, "up", rng, heads) for _ in range(3)]    # -> C5, C4, C3
        self.bottom_up = [SingleFusionLayer(d, "down", rng, heads) for _ in range(3)]  # -> C4, C5, C6

    def __call__(self, feats: MultiScaleFeatures, state: FusionState) -> MultiScaleFeatures:
        c3, c4, c5, c6 = feats.maps
        h6, w6 = c6.shape[2:]
        tok, p = self.top(_flatten(c6), state.prompts)
        state.advance(p, 6, 1)
        c6_1 = _unflatten(tok, h6, w6)
        td = [c6_1]
        for layer, low, scale in zip(self.top_down, (c5, c4, c3), (5, 4, 3)):
            nxt, p = layer(td[-1], low, state.prompts)
            state.advance(p, scale, 1)
            td.append(nxt)
        c6_1, c5_1, c4_1, c3_1 = td
        bu = [c3_1]
        for layer, low, scale in zip(self.bottom_up, (c4_1, c5_1, c6_1), (4, 5, 6)):
            nxt, p = layer(bu[-1], low, state.prompts)
            state.advance(p, scale, 2)
            bu.append(nxt)
        return MultiScaleFeatures(bu)


def psf_forward(psf: ProgressiveSingleScaleFusion, feats: MultiScaleFeatures, prompts: Tensor):
    state = FusionState(prompts)
    out = psf(feats, state)
    return out, state.prompts, state


def token_geometry(level_shapes) -> tuple[np.ndarray, np.ndarray]:
    """Normalised token centres [S, 2] (x, y) and level index [S] for flattened scales."""
    centers, levels = [], []
    for lvl, (H, W) in enumerate(level_shapes):
        ys, xs = np.meshgrid((np.arange(H) + 0.5) / H, (np.arange(W) + 0.5) / W, indexing="ij")
        centers.append(np.stack([xs.ravel(), ys.ravel()], -1))
        levels.append(np.full(H * W, lvl))
    return np.concatenate(centers), np.concatenate(levels)


class DeformableEncoderLayer(Module):
    """Deformable self-attention over all scales plus a feed-forward block."""

    def __init__(self, d: int, rng: np.random.Generator, heads: int = 2, points: int = 4):
        self.attn = MSDeformAttn(d, rng, heads=heads, levels=4, points=points, offset_init="zero")
        self.level_embed = _param(rng.normal(0, 0.02, size=(4, d)))
        self.pos_proj = Linear(64, d, rng)
        self.norm1 = LayerNorm(d)
        self.ffn = MLP([d, 2 * d, d], rng)
        self.norm2 = LayerNorm(d)

    def __call__(self, tokens: Tensor, level_shapes) -> Tensor:
        B, S, D = tokens.shape
        centers, levels = token_geometry(level_shapes)
        pos = self.pos_proj(sincos_encode(T.tensor(centers))) + T.take(self.level_embed, levels, axis=0)
        ref = T.tensor(np.broadcast_to(centers, (B, S, 2)))
        x = self.norm1(tokens + self.attn(tokens + pos, ref, tokens, level_shapes))
        return self.norm2(x + self.ffn(x))


class MultiScaleFusionGating(Module):
    """Full-scale X-MHA, a multiplicative prompt gate, and deformable self-attention.

    With ``relu_after_product`` (the default) the gate is
    ``LN(Linear(ReLU(Linear(P_new) * P_old)))``; otherwise ReLU is applied
    before the product.
    """

    def __init__(self, d: int, rng: np.random.Generator, heads: int = 2, relu_after_product: bool = True):
        self.xmha = XMHA(d, rng, heads)
        self.gate_in = Linear(d, d, rng)
        self.gate_out = Linear(d, d, rng)
        self.gate_norm = LayerNorm(d)
        self.deform = DeformableEncoderLayer(d, rng, heads)
        self.relu_after_product = relu_after_product

    def gate(self, p_new: Tensor, p_old: Tensor) -> Tensor:
        if self.relu_after_product:
            g = T.relu(self.gate_in(p_new) * p_old)
        else:
            g = T.relu(self.gate_in(p_new)) * p_old
        return self.gate_norm(self.gate_out(g))

    def __call__(self, feats: MultiScaleFeatures, state: FusionState) -> Tensor:
        c_all = feats.tokens()
        p_old = state.prompts
        c_all, p_new = self.xmha(c_all, p_old)
        state.advance(p_new, "all", 3)
        state.prompts = self.gate(p_new, p_old)
        return self.deform(c_all, feats.level_shapes)


def mfg_forward(mfg: MultiScaleFusionGating, feats: MultiScaleFeatures, prompts: Tensor):
    state = FusionState(prompts)
    c_all = mfg(feats, state)
    return c_all, state.prompts


class HybridEncoder(Module):
    """PSF followed by MFG. Either stage can be switched off for ablations.

    Without PSF the backbone maps pass through unchanged; without MFG the
    prompts leave PSF as final and only the deformable self-attention runs.
    """

    def __init__(self, d: int, rng: np.random.Generator, heads: int = 2, use_psf: bool = True, use_mfg: bool = True,
                 relu_after_product: bool = True):
        self.psf = ProgressiveSingleScaleFusion(d, rng, heads)
        self.mfg = MultiScaleFusionGating(d, rng, heads, relu_after_product)
        self.use_psf = use_psf
        self.use_mfg = use_mfg

    def __call__(self, feats: MultiScaleFeatures, prompts: Tensor) -> tuple[Tensor, Tensor, FusionState]:
        state = FusionState(prompts)
        if self.use_psf:
            feats = self.psf(feats, state)
        if self.use_mfg:
            c_all = self.mfg(feats, state)
        else:
            c_all = self.mfg.deform(feats.tokens(), feats.level_shapes)
        return c_all, state.prompts, state
