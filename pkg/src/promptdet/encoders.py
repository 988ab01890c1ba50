"""Toy image backbone, toy text encoder, and the negative-phrase memory bank."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .nn import Conv2d, LayerNorm, Linear, Module, _param
from .tensor import ContractError, ShapeError, Tensor

STRIDES = (8, 16, 32, 64)


@dataclass
class MultiScaleFeatures:
    """Four maps at strides 8/16/32/64, each [B, D, H/s, W/s]."""

    maps: list[Tensor]

    def __post_init__(self):
        if len(self.maps) != 4:
            raise ShapeError(f"expected 4 scales, got {len(self.maps)}")
        d = self.maps[0].shape[1]
        for a, b in zip(self.maps[:-1], self.maps[1:]):
            if b.shape[1] != d or b.shape[2] * 2 != a.shape[2] or b.shape[3] * 2 != a.shape[3]:
                raise ShapeError(f"scales do not halve: {[m.shape for m in self.maps]}")

    @property
    def width(self) -> int:
        return self.maps[0].shape[1]

    @property
    def level_shapes(self) -> list[tuple[int, int]]:
        return [(m.shape[2], m.shape[3]) for m in self.maps]

    def tokens(self) -> Tensor:
        """Flatten and concatenate all scales: [B, sum(H_j*W_j), D], scale-major, row-major."""
        flat = []
        for m in self.maps:
            B, D, H, W = m.shape
            flat.append(T.transpose(T.reshape(m, (B, D, H * W)), (0, 2, 1)))
        return T.concat(flat, axis=1)

    @staticmethod
    def from_tokens(tokens: Tensor, level_shapes: Sequence[tuple[int, int]]) -> "MultiScaleFeatures":
        B, _, D = tokens.shape
        maps, start = [], 0
        for H, W in level_shapes:
            chunk = tokens[:, start:start + H * W]
            start += H * W
            maps.append(T.reshape(T.transpose(chunk, (0, 2, 1)), (B, D, H, W)))
        return MultiScaleFeatures(maps)


class ToyBackbone(Module):
    """Stride-2 conv stack standing in for a pretrained image backbone.

    Stages reach strides 2, 4, 8, 16, 32; strides 8-32 are channel-mapped
    by 1x1 convs and stride 64 comes from a stride-2 conv on the stride-32 map.
    """

    def __init__(self, d: int, rng: np.random.Generator):
        self.stages = [Conv2d(3 if i == 0 else d, d, 3, rng, stride=2) for i in range(5)]
        self.mapping = [Conv2d(d, d, 1, rng) for _ in range(3)]
        self.down = Conv2d(d, d, 3, rng, stride=2)

    def __call__(self, images: Tensor) -> MultiScaleFeatures:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"images must be [B, 3, H, W], got {images.shape}")
        H, W = images.shape[2:]
        if H % 64 or W % 64:
            raise ShapeError(f"image size {H}x{W} not divisible by 64")
        x = images
        outs = []
        for i, stage in enumerate(self.stages):
            x = T.relu(stage(x))
            if i >= 2:
                outs.append(x)
        maps = [m(o) for m, o in zip(self.mapping, outs)]
        maps.append(self.down(maps[-1]))
        return MultiScaleFeatures(maps)


def encode_image(backbone: ToyBackbone, image) -> MultiScaleFeatures:
    """Encode one [3, H, W] image (or a [B, 3, H, W] batch)."""
    image = T._as_tensor(image)
    if image.ndim == 3:
        image = T.reshape(image, (1,) + image.shape)
    return backbone(image)


# ---------------------------------------------------------------------------
# text

UNK = "<unk>"


def normalize_phrase(phrase: str) -> str:
    return " ".join(phrase.lower().split())


def tokenize(phrase: str) -> list[str]:
    return normalize_phrase(phrase).split()


class Vocabulary:
    """Dense token ids; id 0 is reserved for unknown tokens."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.tokens = [UNK]
        self.index = {UNK: 0}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        token = token.lower()
        if token not in self.index:
            self.index[token] = len(self.tokens)
            self.tokens.append(token)
        return self.index[token]

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.index.get(token.lower(), 0)

    def ids(self, phrase: str) -> list[int]:
        return [self[t] for t in tokenize(phrase)]

    @classmethod
    def from_phrases(cls, phrases: Iterable[str]) -> "Vocabulary":
        vocab = cls()
        for p in phrases:
            for tok in tokenize(p):
                vocab.add(tok)
        return vocab

    def save(self, path) -> None:
        """One token per line; line number is the id."""
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] != UNK:
            raise ValueError(f"vocabulary file must start with {UNK}")
        vocab = cls()
        for tok in lines[1:]:
            vocab.add(tok)
        return vocab


class TextEncoder(Module):
    """Whitespace tokens -> embeddings -> mean pool -> linear -> layer norm."""

    def __init__(self, vocab: Vocabulary, d: int, rng: np.random.Generator):
        self.vocab = vocab
        self.embedding = _param(rng.normal(0, 1.0, size=(len(vocab), d)))
        self.proj = Linear(d, d, rng)
        self.norm = LayerNorm(d)

    def pooling_matrix(self, phrases: Sequence[str]) -> np.ndarray:
        A = np.zeros((len(phrases), len(self.vocab)))
        for i, p in enumerate(phrases):
            ids = self.vocab.ids(p)
            if not ids:
                raise ContractError(f"phrase {p!r} has no tokens")
            for t in ids:
                A[i, t] += 1.0 / len(ids)
        return A

    def __call__(self, phrases: Sequence[str]) -> Tensor:
        pooled = T.matmul(T.tensor(self.pooling_matrix(phrases)), self.embedding)
        return self.norm(self.proj(pooled))


def encode_text_prompt(encoder: TextEncoder, phrase: str) -> Tensor:
    """Sentence-level concept vector [D] for one phrase."""
    return encoder([phrase])[0]


# ---------------------------------------------------------------------------
# memory bank

class MemoryBank:
    """Bounded FIFO of distinct normalised phrases."""

    def __init__(self, capacity: int = 1000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: OrderedDict[str, None] = OrderedDict()

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, phrase: str) -> bool:
        return normalize_phrase(phrase) in self._items

    def __iter__(self):
        return iter(self._items)

    def add(self, phrase: str) -> None:
        key = normalize_phrase(phrase)
        if not key or key in self._items:
            return
        self._items[key] = None
        if len(self._items) > self.capacity:
            self._items.popitem(last=False)

    def extend(self, phrases: Iterable[str]) -> None:
        for p in phrases:
            self.add(p)

    def phrases(self) -> list[str]:
        return list(self._items)


def sample_negatives(bank: MemoryBank, positives: Iterable[str], n: int,
                     rng: np.random.Generator, dictionary: Iterable[str] = ()) -> list[str]:
    """Draw up to ``n`` distinct phrases from dictionary + bank, none of them positive."""
    if n < 0:
        raise ValueError("n must be non-negative")
    pos = {normalize_phrase(p) for p in positives}
    pool = list(OrderedDict.fromkeys(
        p for p in [normalize_phrase(d) for d in dictionary] + bank.phrases() if p not in pos))
    k = min(n, len(pool))
    if k == 0:
        return []
    picks = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in picks]
