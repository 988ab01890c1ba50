"""Gradient checks over every differentiable primitive and model component.

Each case builds a float64 objective with its leaves; ``run_grad_checks``
returns the worst relative error per case. Used by the ``grad-check``
command.
"""
from __future__ import annotations

import time
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .gradcheck import grad_check
from .tensor import Tensor

Builder = Callable[[np.random.Generator], tuple]   # rng -> (f, leaves[, h])

TOLERANCE = 1e-5


def _leaf(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, dtype=np.float64)


def _weights(rng, shape):
    return T.tensor(rng.normal(size=shape), dtype=np.float64)


def _scramble(module, rng, scale=0.3):
    """Random values everywhere, so zero-initialised projections carry gradient too."""
    for p in module.parameters():
        p.data = rng.normal(size=p.shape) * scale
    return module


# ---------------------------------------------------------------------------
# primitives

def _unary(fn, lo=-2.0, hi=2.0):
    def build(rng):
        shape = tuple(int(s) for s in rng.integers(1, 4, size=rng.integers(1, 3)))
        x, c = _leaf(rng, *shape, lo=lo, hi=hi), _weights(rng, shape)
        return (lambda: T.sum(fn(x) * c)), [x]
    return build


def _binary(fn, blo=-2.0, bhi=2.0):
    def build(rng):
        shape = tuple(int(s) for s in rng.integers(1, 4, size=rng.integers(1, 3)))
        bshape = shape[1:] if (len(shape) > 1 and rng.random() < 0.5) else shape
        x, y = _leaf(rng, *shape, lo=-2, hi=2), _leaf(rng, *bshape, lo=blo, hi=bhi)
        c = _weights(rng, shape)
        return (lambda: T.sum(fn(x, y) * c)), [x, y]
    return build


def _relu(rng):
    x = _leaf(rng, 3, 4)
    x.data[np.abs(x.data) < 0.05] += 0.1
    c = _weights(rng, (3, 4))
    return (lambda: T.sum(T.relu(x) * c)), [x]


def _matmul(rng):
    x, w = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    c = _weights(rng, (2, 3, 5))
    return (lambda: T.sum(T.matmul(x, w) * c)), [x, w]


def _softmax(rng):
    x, c = _leaf(rng, 3, 4, lo=-3, hi=3), _weights(rng, (3, 4))
    return (lambda: T.sum(T.softmax(x) * c)), [x]


def _layer_norm(rng):
    x, g, b = _leaf(rng, 3, 5), _leaf(rng, 5), _leaf(rng, 5)
    x.data += np.linspace(-1.0, 1.0, 5)
    c = _weights(rng, (3, 5))
    return (lambda: T.sum(T.layer_norm(x, g, b) * c)), [x, g, b]


def _conv(rng):
    x, w, b = _leaf(rng, 2, 2, 5, 4), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)
    c = _weights(rng, T.conv2d(x, w, b, stride=2, pad=1).shape)
    return (lambda: T.sum(T.conv2d(x, w, b, stride=2, pad=1) * c)), [x, w, b]


def _bilinear(rng):
    fm = _leaf(rng, 2, 3, 4, 4)
    pts = rng.uniform(-1.5, 3.5, size=(2, 5, 2))
    pts = np.where(np.abs(pts - np.round(pts)) < 0.02, pts + 0.05, pts)
    p = Tensor(pts, requires_grad=True, dtype=np.float64)
    c = _weights(rng, (2, 5, 3))
    return (lambda: T.sum(T.bilinear_sample(fm, p) * c)), [fm, p]


def _indexing(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 4)
    idx = rng.integers(0, 2, size=3)
    c = _weights(rng, (5, 3))
    return (lambda: T.sum(T.transpose(T.take(T.concat([a, b], axis=1)[:, 1:6], idx, axis=0)) * c)), [a, b]


def _reductions(rng):
    x, c = _leaf(rng, 3, 4), _weights(rng, (3,))
    return (lambda: T.sum((T.max(x, axis=-1) + T.mean(x, axis=-1)) * c)), [x]


def _resize(rng):
    x, y = _leaf(rng, 2, 2, 3), _leaf(rng, 3, 1)
    c1, c2 = _weights(rng, (2, 4, 6)), _weights(rng, (2, 3, 4))
    return (lambda: T.sum(T.upsample_nearest(x) * c1) + T.sum(T.expand(y, (2, 3, 4)) * c2)), [x, y]


PRIMITIVES: dict[str, Builder] = {
    "add": _binary(T.add), "sub": _binary(T.sub), "mul": _binary(T.mul), "div": _binary(T.div, 0.5, 2.0),
    "maximum": _binary(T.maximum), "minimum": _binary(T.minimum),
    "exp": _unary(T.exp), "log": _unary(T.log, 0.5, 3.0), "sqrt": _unary(T.sqrt, 0.5, 3.0),
    "sigmoid": _unary(T.sigmoid), "tanh": _unary(T.tanh), "softplus": _unary(T.softplus),
    "log_sigmoid": _unary(T.log_sigmoid), "sin": _unary(T.sin), "cos": _unary(T.cos),
    "power": _unary(lambda x: T.power(x, 3)), "neg": _unary(T.neg), "relu": _relu,
    "matmul": _matmul, "softmax": _softmax, "layer_norm": _layer_norm, "conv2d": _conv,
    "bilinear_sample": _bilinear, "indexing": _indexing, "reductions": _reductions, "resize": _resize,
}


# ---------------------------------------------------------------------------
# model components

def _features(rng, d):
    from .encoders import ToyBackbone, encode_image
    return encode_image(ToyBackbone(d, rng).astype(np.float64), rng.uniform(size=(3, 64, 64)))


def _xmha(rng):
    from .hybrid import XMHA
    m = _scramble(XMHA(4, rng).astype(np.float64), rng)
    img, P = _leaf(rng, 1, 6, 4), _leaf(rng, 1, 3, 4)
    w1, w2 = _weights(rng, (1, 6, 4)), _weights(rng, (1, 3, 4))

    def f():
        a, b = m(img, P)
        return T.sum(a * w1) + T.sum(b * w2)
    return f, [img, P] + m.parameters()


def _hybrid(rng):
    from .hybrid import HybridEncoder
    feats = _features(rng, 4)
    enc = _scramble(HybridEncoder(4, rng, heads=2).astype(np.float64), rng)
    P, w = _leaf(rng, 1, 2, 4), _weights(rng, (1, 85, 4))

    def f():
        c, p, _ = enc(feats, P)
        return T.sum(c * w) + T.sum(p * p)
    return f, [P] + enc.parameters(), 1e-6


def _decoder(rng):
    from .decoder import Decoder
    from .losses import Target, decoder_loss, match_predictions
    from .encoders import ToyBackbone, encode_image
    shapes = [(8, 8), (4, 4), (2, 2), (1, 1)]
    bb = ToyBackbone(4, rng).astype(np.float64)
    dec = Decoder(4, rng, num_queries=4, num_layers=2).astype(np.float64)
    # move reference boxes off the proposal lattice, where samples sit on pixel centres
    for p in dec.box_head.parameters():
        p.data = p.data + rng.normal(size=p.shape) * 0.1
    img = rng.uniform(size=(3, 64, 64))
    P = T.tensor(rng.normal(size=(1, 2, 4)))
    gt = np.array([[0.3, 0.3, 0.25, 0.25], [0.7, 0.65, 0.3, 0.2]])
    tgt = [Target(gt, [0, 1])]
    memory = encode_image(bb, img).tokens()
    sel0 = dec.select(memory, P, shapes, 64)
    out0 = dec(memory, P, shapes, 64, sel0)
    m = [match_predictions(out0.boxes.data[0], out0.logits.data[0], gt, [0, 1])]

    def f():
        mem = encode_image(bb, img).tokens()
        out = dec(mem, P, shapes, 64, dec.select(mem, P, shapes, 64, sel0.indices))
        return decoder_loss([out.proposals] + out.layers, tgt, m)[0]
    return f, bb.parameters() + dec.parameters(), 1e-6


def _visual(rng):
    from .prompts import VisualPromptEncoder
    feats = _features(rng, 4)
    enc = VisualPromptEncoder(4, rng).astype(np.float64)
    # generic coordinates keep grid-initialised samples off pixel centres
    boxes = np.array([[[0.3137, 0.2911, 0.2213, 0.1979], [0.6071, 0.6893, 0.3117, 0.2039]]])
    groups = np.array([[[0.5, 0.5]]])
    target = _weights(rng, (1, 1, 4))
    return (lambda: T.sum((enc(boxes, groups, feats) - target) ** 2)), enc.parameters(), 1e-6


def _aux(rng):
    from .auxiliary import AuxHead, atss_assign, aux_loss, generate_anchors
    shapes = [(8, 8), (4, 4), (2, 2), (1, 1)]
    head = AuxHead(4, rng).astype(np.float64)
    memory, P = _weights(rng, (1, 85, 4)), _weights(rng, (1, 3, 4))
    anchors = generate_anchors(shapes, 64)
    gt = np.array([[6.0, 9.0, 30.0, 33.0], [34.0, 20.0, 58.0, 50.0]])
    asg = [atss_assign(anchors, gt, [0, 2])]
    return (lambda: aux_loss(*head(memory, P, shapes, anchors, 64), asg, [gt], 64)[0]), head.parameters()


def _prompt_loss(rng):
    from .auxiliary import PromptClassifier, prompt_multilabel_loss
    clf = PromptClassifier(4, rng).astype(np.float64)
    P = _leaf(rng, 5, 4)
    g = np.array([1.0, 0.0, 1.0, 0.0, 0.0])
    return (lambda: prompt_multilabel_loss(clf, P, g)), [P] + clf.parameters()


def pretrain_case(rng, d: int = 8, num_queries: int = 6):
    """Full pre-training objective on one 64x64 scene with two objects.

    Query indices and matches come from an unperturbed pass and stay fixed.
    """
    from .encoders import Vocabulary
    from .model import AuxiliarySupervision, Detector, ModelConfig
    from .shapes import SceneSpec, generate_scene
    from .train import TrainConfig, collate, pretrain_objective
    spec = SceneSpec((("red", "circle"), ("green", "square"), ("blue", "triangle")))
    scene = generate_scene(int(rng.integers(1 << 30)), spec, num_objects=2)
    mc = ModelConfig(d=d, num_queries=num_queries)
    cfg = TrainConfig(model=mc)
    model = Detector(Vocabulary.from_phrases(spec.phrases), mc, seed=int(rng.integers(1 << 30))).astype(np.float64)
    aux = AuxiliarySupervision(d, seed=int(rng.integers(1 << 30))).astype(np.float64)
    for p in model.parameters() + aux.parameters():
        p.data = p.data + rng.normal(size=p.shape) * 0.05
    batch = collate([scene], spec.phrases)
    _, _, discrete = pretrain_objective(model, aux, batch, cfg)
    return (lambda: pretrain_objective(model, aux, batch, cfg, discrete)[0]), model.parameters() + aux.parameters(), 1e-6


MODULES: dict[str, Builder] = {
    "x_mha": _xmha, "hybrid_encoder": _hybrid, "decoder": _decoder, "visual_prompt": _visual,
    "aux_head": _aux, "prompt_loss": _prompt_loss, "pretrain_objective": pretrain_case,
}


def available() -> list[str]:
    return list(PRIMITIVES) + list(MODULES)


def run_grad_checks(names: Iterable[str] | None = None, seeds: int = 3, max_coords: int = 4,
                    seed: int = 0) -> dict[str, dict]:
    """Worst relative error per case: primitives over ``seeds`` draws, modules once
    with at most ``max_coords`` probes per leaf."""
    names = available() if names is None else list(names)
    unknown = [n for n in names if n not in PRIMITIVES and n not in MODULES]
    if unknown:
        raise KeyError(f"unknown grad-check case(s): {unknown}")
    report = {}
    with T.precision(np.float64):
        for name in names:
            t0 = time.perf_counter()
            worst = 0.0
            draws = seeds if name in PRIMITIVES else 1
            for s in range(draws):
                built = (PRIMITIVES.get(name) or MODULES[name])(np.random.default_rng(seed + s))
                f, leaves, h = built if len(built) == 3 else (*built, 1e-4)
                coords = None if name in PRIMITIVES else max_coords
                worst = max(worst, grad_check(f, leaves, h=h, max_coords=coords, seed=seed + s))
            report[name] = {"error": worst, "passed": worst <= TOLERANCE, "seconds": time.perf_counter() - t0}
    return report
