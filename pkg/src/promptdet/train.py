"""Training regimes (pre-training, visual-prompt distillation, prompt tuning),
the optimiser, configuration and checkpoints."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import checkpoint as ckpt
from . import tensor as T
from .auxiliary import PROMPT_LOSS_WEIGHT, aux_loss, atss_assign, generate_anchors, prompt_multilabel_loss
from .encoders import MemoryBank, Vocabulary, normalize_phrase, sample_negatives
from .losses import Target, decoder_loss, match_predictions
from .model import AuxiliarySupervision, Detector, ForwardResult, ModelConfig, postprocess
from .nn import Module
from .prompts import OptimizedPrompts, SuperClassMap, group_matrix, init_optimized_prompts, superclass_scores
from .shapes import BenchmarkSplit, SyntheticScene, evaluate_ap
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)

REGIMES = ("pretrain", "visual-prompt", "tune-prompt")


class StateError(RuntimeError):
    """A regime was started without the state it depends on."""


# ---------------------------------------------------------------------------
# configuration

@dataclass
class TrainConfig:
    regime: str = "pretrain"
    steps: int = 1500
    batch_size: int = 4
    seed: int = 0
    lr: dict = field(default_factory=lambda: {"default": 1e-3, "prompt_embedding": 5e-2})
    milestones: tuple = (0.8, 0.9)
    decay: float = 0.1
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    num_negatives: int = 80
    use_aux: bool = True
    use_prompt_loss: bool = True
    supervise_proposals: bool = True
    super_class: int = 1
    max_grad_norm: float = 0.1
    log_every: int = 100
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.milestones = tuple(float(m) for m in self.milestones)
        self.betas = tuple(float(b) for b in self.betas)
        self.lr = {k: float(v) for k, v in dict(self.lr).items()}
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if any(v <= 0 for v in self.lr.values()):
            raise ValueError("learning rates must be positive")
        m = self.milestones
        if any(not 0 < x < 1 for x in m) or any(a >= b for a, b in zip(m[:-1], m[1:])):
            raise ValueError(f"milestones must be strictly increasing in (0, 1), got {m}")
        if self.steps < 1 or self.batch_size < 1 or self.super_class < 1:
            raise ValueError("steps, batch_size and super_class must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    def with_overrides(self, **kw) -> "TrainConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        if "model" in kw and isinstance(kw["model"], dict):
            kw["model"] = replace(self.model, **kw["model"])
        return replace(self, **kw)


def lr_at(base: float, step: int, total: int, milestones, decay: float = 0.1) -> float:
    """Step-decayed rate: multiplied by ``decay`` once per milestone passed."""
    passed = sum(step >= int(round(m * total)) for m in milestones)
    return base * decay ** passed


# ---------------------------------------------------------------------------
# optimiser

class AdamW:
    """Adaptive moments with decoupled weight decay over named parameter groups."""

    def __init__(self, params: Sequence[Tensor], lrs: Sequence[float], betas=(0.9, 0.999),
                 weight_decay: float = 1e-4, eps: float = 1e-8):
        if len(params) != len(lrs):
            raise ValueError("one learning rate per parameter")
        self.params = list(params)
        self.lrs = [float(x) for x in lrs]
        self.b1, self.b2 = betas
        self.wd = weight_decay
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def clip_grad_norm(self, max_norm: float) -> float:
        """Rescale all gradients so their global L2 norm is at most ``max_norm``; returns the norm before."""
        norm = float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                                 for p in self.params if p.grad is not None)))
        if max_norm > 0 and norm > max_norm:
            for p in self.params:
                if p.grad is not None:
                    p.grad = p.grad * (max_norm / (norm + 1e-12))
        return norm

    def step(self, scale: float = 1.0) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v, lr in zip(self.params, self.m, self.v, self.lrs):
            g = p.grad
            if g is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            lr_t = lr * scale
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.wd * p.data
            p.data -= (lr_t * update).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# batches

@dataclass
class Batch:
    images: np.ndarray          # [B, 3, H, W]
    phrases: list[str]          # K prompt phrases shared by the batch
    targets: list[Target]       # labels are prompt columns
    gt_xyxy_px: list[np.ndarray]
    positive: np.ndarray        # [B, K]
    scenes: list[SyntheticScene]


def prompt_phrases(scenes: Sequence[SyntheticScene], dictionary: Sequence[str], num_negatives: int,
                   rng: np.random.Generator | None = None, bank: MemoryBank | None = None) -> list[str]:
    """Batch positives in first-seen order, then sampled negatives (or the whole dictionary without ``rng``)."""
    pos = list(dict.fromkeys(normalize_phrase(p) for s in scenes for p in s.phrases))
    if rng is None:
        neg = [p for p in dict.fromkeys(normalize_phrase(d) for d in dictionary) if p not in pos][:num_negatives]
    else:
        neg = sample_negatives(bank or MemoryBank(), pos, num_negatives, rng, dictionary)
    phrases = pos + neg
    if not phrases:
        raise ContractError("a batch needs at least one prompt phrase")
    return phrases


def collate(scenes: Sequence[SyntheticScene], phrases: Sequence[str]) -> Batch:
    if not scenes:
        raise ValueError("empty batch")
    col = {p: i for i, p in enumerate(phrases)}
    size = scenes[0].image.shape[-1]
    targets, gts = [], []
    positive = np.zeros((len(scenes), len(phrases)))
    for b, s in enumerate(scenes):
        labels = [col[normalize_phrase(p)] for p in s.phrases]
        targets.append(Target(s.boxes, labels))
        gts.append(s.boxes_xyxy * size)
        positive[b, labels] = 1.0
    images = np.stack([s.image for s in scenes])
    return Batch(images, list(phrases), targets, gts, positive, list(scenes))


@dataclass
class Discrete:
    """Non-differentiable choices of one forward pass, reusable to hold them fixed."""

    indices: np.ndarray
    matches: list


def _final_matches(layers, targets: list[Target]):
    boxes, logits = layers[-1]
    return [match_predictions(boxes.data[b], logits.data[b], t.boxes, t.labels) for b, t in enumerate(targets)]


def _supervised_layers(res: ForwardResult, cfg: TrainConfig, smap: SuperClassMap | None = None):
    layers = list(res.output.layers)
    if cfg.supervise_proposals:
        layers = [res.output.proposals] + layers
    if smap is not None:
        layers = [(b, superclass_scores(l, smap)) for b, l in layers]
    return layers


# ---------------------------------------------------------------------------
# objectives

def pretrain_objective(model: Detector, aux: AuxiliarySupervision | None, batch: Batch, cfg: TrainConfig,
                       discrete: Discrete | None = None):
    """Decoder loss + aux-head loss + 6 x prompt multi-label loss on text prompts."""
    feats = model.image_features(batch.images)
    prompts = model.text_prompts(batch.phrases)
    res = model.forward(feats, prompts, discrete.indices if discrete else None)
    layers = _supervised_layers(res, cfg)
    matches = discrete.matches if discrete else _final_matches(layers, batch.targets)
    total, dparts = decoder_loss(layers, batch.targets, matches)
    parts = {"decoder": total}
    parts.update({f"decoder_{k}": v for k, v in dparts.items()})
    if cfg.use_aux and aux is not None:
        size = cfg.model.image_size
        anchors = generate_anchors(res.level_shapes, size)
        logits, boxes, ctr = aux.head(res.memory, res.prompts, res.level_shapes, anchors, size)
        assignments = [atss_assign(anchors, g, t.labels) for g, t in zip(batch.gt_xyxy_px, batch.targets)]
        a_total, aparts = aux_loss(logits, boxes, ctr, assignments, batch.gt_xyxy_px, size)
        total = total + a_total
        parts["aux"] = a_total
    if cfg.use_prompt_loss and aux is not None:
        p_loss = prompt_multilabel_loss(aux.classifier, res.prompts, batch.positive)
        total = total + PROMPT_LOSS_WEIGHT * p_loss
        parts["prompt"] = p_loss
    parts["total"] = total
    return total, parts, Discrete(res.indices, matches)


def visual_prompt_batch(scenes: Sequence[SyntheticScene], phrases: Sequence[str],
                        rng: np.random.Generator | None = None, max_boxes: int = 4):
    """Padded boxes [B, N, 4] and group weights [B, K, N] (zero rows for absent classes).

    With ``rng`` each positive class is represented by a uniformly drawn
    subset of 1..min(``max_boxes``, available) of its boxes; otherwise by all.
    """
    col = {p: i for i, p in enumerate(phrases)}
    N = max(1, max(len(s.boxes) for s in scenes))
    boxes = np.tile(np.array([0.5, 0.5, 0.25, 0.25]), (len(scenes), N, 1))
    groups = np.zeros((len(scenes), len(phrases), N))
    for b, s in enumerate(scenes):
        if len(s.boxes) == 0:
            continue
        boxes[b, :len(s.boxes)] = s.boxes
        cols = np.array([col[normalize_phrase(p)] for p in s.phrases])
        for c in sorted(set(cols.tolist())):
            members = np.nonzero(cols == c)[0]
            if rng is not None:
                k = int(rng.integers(1, min(max_boxes, len(members)) + 1))
                members = np.sort(rng.choice(members, size=k, replace=False))
            groups[b, c, members] = 1.0 / len(members)
    return boxes, groups


def visual_prompt_objective(model: Detector, batch: Batch, cfg: TrainConfig, discrete: Discrete | None = None,
                            rng: np.random.Generator | None = None):
    """MSE between visual and text prompts of the positive classes, plus the decoder loss
    with positive classes prompted visually and the rest by text."""
    feats = model.image_features(batch.images)
    P_t = model.text_prompts(batch.phrases)                          # [K, D]
    B, K, D = len(batch.scenes), len(batch.phrases), P_t.shape[-1]
    boxes, groups = visual_prompt_batch(batch.scenes, batch.phrases, rng)
    P_v = model.visual(boxes, groups, feats)                          # [B, K, D]
    mask = batch.positive[:, :, None].astype(P_v.dtype)
    P_tb = T.expand(P_t, (B, K, D))
    diff = (P_v - P_tb) * np.broadcast_to(mask, (B, K, D))
    n_pos = max(1.0, float(batch.positive.sum()))
    mse = T.sum(diff * diff) * (1.0 / (n_pos * D))
    prompts = P_v * np.broadcast_to(mask, (B, K, D)) + P_tb * np.broadcast_to(1 - mask, (B, K, D))
    res = model.forward(feats, prompts, discrete.indices if discrete else None)
    layers = _supervised_layers(res, cfg)
    matches = discrete.matches if discrete else _final_matches(layers, batch.targets)
    dec, _ = decoder_loss(layers, batch.targets, matches)
    total = mse + dec
    return total, {"mse": mse, "decoder": dec, "total": total}, Discrete(res.indices, matches)


def tune_objective(model: Detector, table: OptimizedPrompts, smap: SuperClassMap, batch: Batch, cfg: TrainConfig,
                   discrete: Discrete | None = None):
    """Decoder loss only, with learned prompts scored through the super-class max."""
    feats = model.image_features(batch.images)
    res = model.forward(feats, table(), discrete.indices if discrete else None)
    layers = _supervised_layers(res, cfg, smap)
    matches = discrete.matches if discrete else _final_matches(layers, batch.targets)
    total, _ = decoder_loss(layers, batch.targets, matches)
    return total, {"decoder": total, "total": total}, Discrete(res.indices, matches)


# ---------------------------------------------------------------------------
# loops

def _as_float(parts: dict) -> dict:
    return {k: float(v.data) for k, v in parts.items()}


def _param_groups(named: list[tuple[str, Tensor]], cfg: TrainConfig, group: str = "default"):
    params = [p for _, p in named if p.requires_grad]
    return params, [cfg.lr.get(group, cfg.lr["default"])] * len(params)


class BatchSampler:
    """Seeded epoch-wise shuffling over a fixed scene list."""

    def __init__(self, scenes: Sequence[SyntheticScene], batch_size: int, seed: int):
        if not scenes:
            raise ValueError("no scenes to sample from")
        self.scenes = list(scenes)
        self.batch_size = min(batch_size, len(scenes))
        self.rng = np.random.default_rng(seed)
        self._order: list[int] = []

    def next(self) -> list[SyntheticScene]:
        if len(self._order) < self.batch_size:
            self._order = self._order + list(self.rng.permutation(len(self.scenes)))
        idx, self._order = self._order[:self.batch_size], self._order[self.batch_size:]
        return [self.scenes[i] for i in idx]


def frozen_names(model: Module) -> list[str]:
    return [n for n, p in model.named_parameters() if not p.requires_grad]


def frozen_digest(model: Module) -> str:
    state = model.state_dict()
    return ckpt.tensor_digest(state, frozen_names(model))


def pretrain_step(model: Detector, aux: AuxiliarySupervision, batch: Batch, cfg: TrainConfig,
                  opt: AdamW, step: int, bank: MemoryBank | None = None) -> dict:
    total, parts, _ = pretrain_objective(model, aux, batch, cfg)
    leaves = opt.params
    T.backward(total, leaves)
    opt.clip_grad_norm(cfg.max_grad_norm)
    opt.step(lr_at(1.0, step, cfg.steps, cfg.milestones, cfg.decay))
    if bank is not None:
        bank.extend(p for s in batch.scenes for p in s.phrases)
    return _as_float(parts)


def pretrain(split: BenchmarkSplit, cfg: TrainConfig, model: Detector | None = None,
             aux: AuxiliarySupervision | None = None, callback=None):
    """Pre-train on ``split`` and return (model, aux, history)."""
    if model is None:
        model = Detector(Vocabulary.from_phrases(split.categories), cfg.model, cfg.seed)
    if aux is None:
        aux = AuxiliarySupervision(cfg.model.d, cfg.seed)
    named = list(model.named_parameters())
    if cfg.use_aux or cfg.use_prompt_loss:
        named += list(aux.named_parameters())
    params, lrs = _param_groups(named, cfg)
    opt = AdamW(params, lrs, cfg.betas, cfg.weight_decay)
    sampler = BatchSampler(split.scenes, cfg.batch_size, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    bank = MemoryBank()
    history = []
    t0 = time.time()
    for step in range(cfg.steps):
        scenes = sampler.next()
        phrases = prompt_phrases(scenes, split.categories, cfg.num_negatives, rng, bank)
        parts = pretrain_step(model, aux, collate(scenes, phrases), cfg, opt, step, bank)
        history.append(parts)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("step %d  loss %.4f  (%.1fs)", step + 1, parts["total"], time.time() - t0)
        if callback is not None:
            callback(step, parts)
    return model, aux, history


def train_visual_prompt_step(model: Detector, batch: Batch, cfg: TrainConfig, opt: AdamW, step: int,
                             rng: np.random.Generator | None = None) -> dict:
    total, parts, _ = visual_prompt_objective(model, batch, cfg, rng=rng)
    T.backward(total, opt.params)
    opt.clip_grad_norm(cfg.max_grad_norm)
    opt.step(lr_at(1.0, step, cfg.steps, cfg.milestones, cfg.decay))
    return _as_float(parts)


def train_visual_prompt(model: Detector, split: BenchmarkSplit, cfg: TrainConfig):
    """Freeze everything but the visual-prompt encoder and distil it towards text prompts."""
    if model is None:
        raise StateError("visual-prompt training needs a pre-trained base model")
    model.freeze()
    model.visual.unfreeze()
    params, lrs = _param_groups(list(model.visual.named_parameters()), cfg)
    opt = AdamW(params, lrs, cfg.betas, cfg.weight_decay)
    sampler = BatchSampler(split.scenes, cfg.batch_size, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 2)
    history = []
    for step in range(cfg.steps):
        scenes = sampler.next()
        phrases = prompt_phrases(scenes, split.categories, cfg.num_negatives)
        history.append(train_visual_prompt_step(model, collate(scenes, phrases), cfg, opt, step, rng))
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("visual step %d  mse %.4f", step + 1, history[-1]["mse"])
    return history


def tune_optimized_prompt(model: Detector, split: BenchmarkSplit, cfg: TrainConfig, M: int | None = None,
                          eval_split: BenchmarkSplit | None = None):
    """Learn M prompt rows per class on a frozen detector.

    Returns (table, super-class map, report) where the report holds the
    zero-shot text-prompt AP and the tuned AP on ``eval_split`` (default:
    ``split``).
    """
    if model is None:
        raise StateError("prompt tuning needs a pre-trained base model")
    M = cfg.super_class if M is None else M
    eval_split = eval_split or split
    present = {normalize_phrase(p) for s in split.scenes for p in s.phrases}
    classes = []
    for i, p in enumerate(split.categories):
        if normalize_phrase(p) in present:
            classes.append(i)
        else:
            log.warning("class %r absent from the downstream split; skipped", p)
    model.freeze()
    zero_shot = evaluate(model, eval_split, "text", class_subset=classes)["mean"]
    table, smap, _ = init_optimized_prompts(classes, M, cfg.model.d, cfg.seed)
    table.astype(model.backbone.down.weight.dtype)
    lr = cfg.lr.get("prompt_embedding", 5e-2)
    opt = AdamW([table.embedding], [lr], cfg.betas, cfg.weight_decay)
    sampler = BatchSampler(split.scenes, cfg.batch_size, cfg.seed)
    cat_col = {normalize_phrase(split.categories[c]): j for j, c in enumerate(classes)}
    history = []
    for step in range(cfg.steps):
        scenes = sampler.next()
        batch = _class_batch(scenes, cat_col)
        total, parts, _ = tune_objective(model, table, smap_cols(smap), batch, cfg)
        T.backward(total, opt.params)
        opt.step(lr_at(1.0, step, cfg.steps, (cfg.milestones[0],), cfg.decay))
        history.append(_as_float(parts))
    tuned = evaluate_tuned(model, table, smap, eval_split)["mean"]
    report = {"M": M, "zero_shot_ap": zero_shot, "tuned_ap": tuned, "classes": classes,
              "final_loss": history[-1]["total"] if history else None}
    return table, smap, report


def smap_cols(smap: SuperClassMap) -> SuperClassMap:
    """Re-key a super-class map by column position (0..K-1) for the loss targets."""
    return SuperClassMap({j: smap.rows[c] for j, c in enumerate(smap.classes)})


def _class_batch(scenes, cat_col: dict[str, int]) -> Batch:
    K = len(cat_col)
    size = scenes[0].image.shape[-1]
    targets, gts = [], []
    positive = np.zeros((len(scenes), K))
    for b, s in enumerate(scenes):
        keep = [i for i, p in enumerate(s.phrases) if normalize_phrase(p) in cat_col]
        labels = [cat_col[normalize_phrase(s.phrases[i])] for i in keep]
        targets.append(Target(s.boxes[keep], labels))
        gts.append(s.boxes_xyxy[keep] * size)
        positive[b, labels] = 1.0
    phrases = sorted(cat_col, key=cat_col.get)
    return Batch(np.stack([s.image for s in scenes]), phrases, targets, gts, positive, list(scenes))


# ---------------------------------------------------------------------------
# evaluation

def _gt_records(split: BenchmarkSplit, class_subset=None) -> list[dict]:
    recs = []
    for s in split.scenes:
        keep = np.ones(len(s.class_ids), dtype=bool) if class_subset is None else np.isin(s.class_ids, class_subset)
        recs.append({"boxes": s.boxes_xyxy[keep], "class_ids": s.class_ids[keep]})
    return recs


def _chunks(seq, n):
    for i in range(0, len(seq), n):
        yield seq[i:i + n]


def predict_text(model: Detector, split: BenchmarkSplit, class_subset=None, phrases=None, chunk: int = 8) -> list[dict]:
    """Text-prompt predictions with every (selected) category prompted."""
    classes = list(range(len(split.categories))) if class_subset is None else list(class_subset)
    phrases = [split.categories[c] for c in classes] if phrases is None else list(phrases)
    preds = []
    with T.no_grad():
        P = model.text_prompts(phrases)
        for scenes in _chunks(split.scenes, chunk):
            feats = model.image_features(np.stack([s.image for s in scenes]))
            res = model.forward(feats, P)
            preds += postprocess(res.output.logits.data, res.output.boxes.data, classes)
    return preds


def evaluate(model: Detector, split: BenchmarkSplit, prompt_mode: str = "text", class_subset=None,
             iou_thresholds=None, seed: int = 0, prompt_vectors: Tensor | None = None) -> dict:
    """AP of ``model`` on ``split`` under text, visual or interactive prompting."""
    from .shapes import COCO_THRESHOLDS
    thr = COCO_THRESHOLDS if iou_thresholds is None else iou_thresholds
    if prompt_mode == "text":
        preds = predict_text(model, split, class_subset)
    elif prompt_mode in ("interactive", "visual"):
        preds = predict_interactive(model, split, seed=seed, all_visual=prompt_mode == "visual")
    else:
        raise ValueError(f"unknown prompt mode {prompt_mode!r}")
    return evaluate_ap(preds, _gt_records(split, class_subset), thr)


def evaluate_tuned(model: Detector, table: OptimizedPrompts, smap: SuperClassMap, split: BenchmarkSplit,
                   iou_thresholds=None, chunk: int = 8) -> dict:
    from .shapes import COCO_THRESHOLDS
    thr = COCO_THRESHOLDS if iou_thresholds is None else iou_thresholds
    preds = []
    with T.no_grad():
        for scenes in _chunks(split.scenes, chunk):
            feats = model.image_features(np.stack([s.image for s in scenes]))
            res = model.forward(feats, table())
            logits = superclass_scores(res.output.logits, smap)
            preds += postprocess(logits.data, res.output.boxes.data, smap.classes)
    return evaluate_ap(preds, _gt_records(split, smap.classes), thr)


def compositional_probe(model: Detector, spec, held_out: tuple[str, str], num_scenes: int = 64,
                        seed: int = 1000) -> dict:
    """Held-out (color, shape) AP@0.5 against a shuffled-prompt control.

    Probe scenes hold one held-out object plus two training objects. The
    control scores the same held-out column once with every training phrase
    in its place and averages.
    """
    from .shapes import SceneSpec, generate_scene
    cats = tuple(tuple(c) for c in spec.categories)
    if tuple(held_out) in cats:
        raise ContractError(f"{held_out} is a training category")
    full = SceneSpec(cats + (tuple(held_out),), **{k: v for k, v in spec.to_dict().items() if k != "categories"})
    k = len(cats)
    scenes = [generate_scene(seed + i, full, categories=[k] + [int(c) for c in
                             np.random.default_rng(seed + i).integers(0, k, size=2)]) for i in range(num_scenes)]
    probe = BenchmarkSplit(scenes, full.phrases)
    gts = _gt_records(probe)
    held = evaluate_ap(predict_text(model, probe), gts, [0.5])["per_class"][k]
    control = {}
    for j in range(k):
        phrases = list(full.phrases)
        phrases[k] = full.phrases[j]
        control[full.phrases[j]] = evaluate_ap(predict_text(model, probe, phrases=phrases), gts, [0.5])["per_class"][k]
    mean = float(np.mean(list(control.values())))
    return {"held_out": full.phrases[k], "held_out_ap50": float(held), "control_ap50": mean,
            "control": control, "passed": bool(held > mean)}


def interactive_prompts(model: Detector, scene: SyntheticScene, categories: Sequence[str], feats,
                        rng: np.random.Generator, all_visual: bool = False):
    """Prompt vectors [K, D] for one image and the number of text prompts used.

    Each category present in the image is prompted by one randomly chosen
    ground-truth box of it; the rest by text. With ``all_visual`` the
    visual prompt aggregates every box of the class instead.
    """
    col = {normalize_phrase(p): i for i, p in enumerate(categories)}
    P = model.text_prompts(categories)
    cols = [col[normalize_phrase(p)] for p in scene.phrases]
    present = sorted(set(cols))
    if not present:
        return P, len(categories)
    boxes, groups = [], np.zeros((len(present), len(scene.boxes)))
    for r, c in enumerate(present):
        members = [i for i, x in enumerate(cols) if x == c]
        if all_visual:
            groups[r, members] = 1.0 / len(members)
        else:
            groups[r, members[int(rng.integers(len(members)))]] = 1.0
    P_v = model.visual(scene.boxes[None], groups[None], feats)[0]   # [len(present), D]
    rows = []
    vis = {c: r for r, c in enumerate(present)}
    for k in range(len(categories)):
        rows.append(P_v[vis[k]] if k in vis else P[k])
    return T.stack(rows, axis=0), len(categories) - len(present)


def predict_interactive(model: Detector, split: BenchmarkSplit, seed: int = 0, all_visual: bool = False) -> list[dict]:
    rng = np.random.default_rng(seed)
    preds = []
    classes = list(range(len(split.categories)))
    with T.no_grad():
        for s in split.scenes:
            feats = model.image_features(s.image)
            P, _ = interactive_prompts(model, s, split.categories, feats, rng, all_visual)
            res = model.forward(feats, P)
            preds += postprocess(res.output.logits.data, res.output.boxes.data, classes)
    return preds


def prompt_alignment(model: Detector, split: BenchmarkSplit) -> dict:
    """Mean cosine and MSE between visual prompts (all boxes of a class in an image) and text prompts."""
    cos, mse = [], []
    with T.no_grad():
        P_t = model.text_prompts(split.categories).data.astype(np.float64)
        for s in split.scenes:
            if len(s.boxes) == 0:
                continue
            feats = model.image_features(s.image)
            present = sorted(set(int(c) for c in s.class_ids))
            groups = group_matrix(s.class_ids, present)
            P_v = model.visual(s.boxes[None], groups[None], feats)[0].data.astype(np.float64)
            t = P_t[present]
            cos.extend(np.sum(P_v * t, -1) / (np.linalg.norm(P_v, axis=-1) * np.linalg.norm(t, axis=-1)))
            mse.extend(np.mean((P_v - t) ** 2, -1))
    return {"cosine": float(np.mean(cos)), "mse": float(np.mean(mse))}


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model: Detector, cfg: TrainConfig, step: int, aux: AuxiliarySupervision | None = None,
                    extra_tensors: dict | None = None, extra_meta: dict | None = None) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if aux is not None:
        tensors.update({f"aux.{k}": v for k, v in aux.state_dict().items()})
    tensors.update(extra_tensors or {})
    meta = {"config": cfg.to_dict(), "step": int(step), "vocab": list(model.vocab.tokens),
            "frozen": sorted(f"model.{n}" for n in frozen_names(model))}
    meta.update(extra_meta or {})
    ckpt.save(path, tensors, meta)


def load_checkpoint(path):
    """Return (model, aux or None, config, meta, extra tensors)."""
    if not Path(path).exists():
        raise StateError(f"checkpoint {path} not found")
    tensors, meta = ckpt.load(path)
    cfg = TrainConfig.from_dict(meta["config"])
    vocab = Vocabulary(meta["vocab"][1:])
    model = Detector(vocab, cfg.model, cfg.seed)
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    aux = None
    aux_state = {k[4:]: v for k, v in tensors.items() if k.startswith("aux.")}
    if aux_state:
        aux = AuxiliarySupervision(cfg.model.d, cfg.seed)
        aux.load_state_dict(aux_state)
    extra = {k: v for k, v in tensors.items() if not (k.startswith("model.") or k.startswith("aux."))}
    return model, aux, cfg, meta, extra
