"""Parameter containers and reusable layers built on :mod:`promptdet.tensor`."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Attribute-walking parameter container.

    Parameters are discovered in attribute insertion order, which fixes the
    checkpoint layout for a given architecture.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = True
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = set(own) - set(state)
            extra = set(state) - set(own)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, p in own.items():
            if name in state:
                arr = np.asarray(state[name])
                if arr.shape != p.shape:
                    raise T.ShapeError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
                p.data = np.array(arr, dtype=p.data.dtype)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def _param(arr: np.ndarray) -> Parameter:
    return Parameter(arr.astype(T.default_dtype()))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        limit = math.sqrt(6.0 / (d_in + d_out))
        w = np.zeros((d_in, d_out)) if zero else rng.uniform(-limit, limit, size=(d_in, d_out))
        self.weight = _param(w)
        self.bias = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = _param(np.ones(d))
        self.beta = _param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1, zero: bool = False):
        std = math.sqrt(2.0 / (c_in * k * k))
        w = np.zeros((c_out, c_in, k, k)) if zero else rng.normal(0, std, size=(c_out, c_in, k, k))
        self.weight = _param(w)
        self.bias = _param(np.zeros(c_out))
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class MLP(Module):
    """Stack of linear layers with ReLU between them."""

    def __init__(self, dims: list[int], rng: np.random.Generator, zero_last: bool = False):
        self.layers = [Linear(a, b, rng, zero=zero_last and i == len(dims) - 2)
                       for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[B, N, D] -> [B, heads, N, D/heads]."""
    B, N, D = x.shape
    return T.transpose(T.reshape(x, (B, N, heads, D // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """[B, heads, N, dh] -> [B, N, heads*dh]."""
    B, h, N, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, N, h * dh))


class MultiheadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise T.ShapeError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor) -> Tensor:
        q = split_heads(self.q_proj(query), self.heads)
        k = split_heads(self.k_proj(key), self.heads)
        v = split_heads(self.v_proj(value), self.heads)
        scale = 1.0 / math.sqrt(q.shape[-1])
        attn = T.softmax(T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale)
        return self.out_proj(merge_heads(T.matmul(attn, v)))


def sincos_encode(coords: Tensor, num_freq: int = 16, temperature: float = 20.0) -> Tensor:
    """Sine-cosine encoding of the last axis: [..., n] -> [..., n * 2 * num_freq].

    Each coordinate c becomes ``[sin(c*w_0..w_{F-1}), cos(c*w_0..w_{F-1})]``
    with ``w_i = 2*pi / temperature**(i/F)``.
    """
    coords = T._as_tensor(coords)
    freqs = 2 * math.pi / temperature ** (np.arange(num_freq) / num_freq)
    lead = coords.shape[:-1]
    n = coords.shape[-1]
    phase = T.matmul(T.reshape(coords, lead + (n, 1)), T.tensor(freqs[None, :]))
    enc = T.concat([T.sin(phase), T.cos(phase)], axis=-1)
    return T.reshape(enc, lead + (n * 2 * num_freq,))


class MSDeformAttn(Module):
    """Multi-scale deformable attention over flattened multi-level value tokens.

    ``offset_init`` is ``"zero"`` (every sampling point starts at the reference)
    or ``"grid"`` (points start spread in fixed directions around it).
    """

    def __init__(self, d: int, rng: np.random.Generator, heads: int = 2, levels: int = 4, points: int = 4,
                 offset_init: str = "grid"):
        self.heads, self.levels, self.points = heads, levels, points
        self.sampling_offsets = Linear(d, heads * levels * points * 2, rng, zero=True)
        if offset_init == "grid":
            theta = np.arange(heads) * (2 * math.pi / heads)
            grid = np.stack([np.cos(theta), np.sin(theta)], -1)
            grid = grid / np.abs(grid).max(-1, keepdims=True)
            grid = np.tile(grid[:, None, None, :], (1, levels, points, 1))
            grid *= np.arange(1, points + 1)[None, None, :, None]
            self.sampling_offsets.bias.data = grid.reshape(-1).astype(T.default_dtype())
        elif offset_init != "zero":
            raise ValueError(f"unknown offset_init {offset_init!r}")
        self.attention_weights = Linear(d, heads * levels * points, rng, zero=True)
        self.value_proj = Linear(d, d, rng)
        self.output_proj = Linear(d, d, rng)

    def __call__(self, query: Tensor, reference: Tensor, value: Tensor, level_shapes: list[tuple[int, int]]) -> Tensor:
        B, Nq, D = query.shape
        h, L, P = self.heads, self.levels, self.points
        dh = D // h
        if len(level_shapes) != L:
            raise T.ShapeError(f"expected {L} levels, got {len(level_shapes)}")
        v = self.value_proj(value)
        off = T.reshape(self.sampling_offsets(query), (B, Nq, h, L, P, 2))
        aw = T.softmax(T.reshape(self.attention_weights(query), (B, Nq, h, L * P)))
        aw = T.reshape(T.transpose(aw, (0, 2, 1, 3)), (B, h, Nq, 1, L * P))
        rdim = reference.shape[-1]
        ref_xy = T.expand(T.reshape(reference[..., :2], (B, Nq, 1, 1, 2)), (B, Nq, h, P, 2))
        if rdim == 4:
            ref_wh = T.expand(T.reshape(reference[..., 2:], (B, Nq, 1, 1, 2)), (B, Nq, h, P, 2))
        sampled = []
        start = 0
        for lvl, (H, W) in enumerate(level_shapes):
            vl = v[:, start:start + H * W]
            start += H * W
            vmap = T.reshape(T.transpose(T.reshape(vl, (B, H, W, h, dh)), (0, 3, 4, 1, 2)), (B * h, dh, H, W))
            o = off[:, :, :, lvl]
            if rdim == 2:
                loc = ref_xy + o * np.array([1.0 / W, 1.0 / H], dtype=o.dtype)
            else:
                loc = ref_xy + o * ref_wh * (0.5 / P)
            pix = loc * np.array([W, H], dtype=o.dtype) - 0.5
            pix = T.reshape(T.transpose(pix, (0, 2, 1, 3, 4)), (B * h, Nq * P, 2))
            s = T.bilinear_sample(vmap, pix)
            sampled.append(T.reshape(s, (B, h, Nq, P, dh)))
        stacked = T.concat(sampled, axis=3)  # [B, h, Nq, L*P, dh]
        out = T.reshape(T.matmul(aw, stacked), (B, h, Nq, dh))
        return self.output_proj(merge_heads(out))


def inverse_sigmoid(x: Tensor, eps: float = 1e-5) -> Tensor:
    x = T.clip(x, eps, 1 - eps)
    return T.log(x) - T.log(1 - x)
