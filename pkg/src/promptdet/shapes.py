"""Synthetic coloured-shape scenes, COCO-style AP, and JSON-lines record formats."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .boxes import box_iou, cxcywh_to_xyxy, xyxy_to_cxcywh

COLORS = {
    "red": (0.90, 0.12, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.15, 0.30, 0.95),
    "yellow": (0.95, 0.90, 0.10),
    "purple": (0.60, 0.15, 0.75),
}
SHAPES = ("circle", "square", "triangle")

# the six training categories of the toy benchmark; "red triangle" is held out
TOY_CATEGORIES = (("red", "circle"), ("red", "square"), ("green", "circle"),
                  ("green", "triangle"), ("blue", "square"), ("blue", "triangle"))
TOY_HELD_OUT = ("red", "triangle")
SUPERSAMPLE = 4
BACKGROUND = 0.12


class GenerationError(RuntimeError):
    """The requested scene cannot be placed within the overlap budget."""


def phrase(color: str, shape: str) -> str:
    return f"{color} {shape}"


@dataclass(frozen=True)
class SceneSpec:
    categories: tuple[tuple[str, str], ...]
    min_objects: int = 1
    max_objects: int = 3
    size: int = 64
    min_side: float = 12.0
    max_side: float = 24.0
    max_iou: float = 0.3
    max_retries: int = 200
    noise: float = 0.02

    def __post_init__(self):
        if self.size % 64:
            raise ValueError(f"image size {self.size} must be divisible by 64")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("object-count range is empty")
        for color, shape in self.categories:
            if color not in COLORS or shape not in SHAPES:
                raise ValueError(f"unknown category {color} {shape}")

    @property
    def phrases(self) -> list[str]:
        return [phrase(c, s) for c, s in self.categories]

    def to_dict(self) -> dict:
        d = dict(vars(self))
        d["categories"] = [list(c) for c in self.categories]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["categories"] = tuple(tuple(c) for c in d["categories"])
        return cls(**d)


@dataclass
class SyntheticScene:
    image: np.ndarray           # [3, H, W] in [0, 1]
    boxes: np.ndarray           # [G, 4] normalised cxcywh
    class_ids: np.ndarray       # [G] index into the split's category list
    phrases: list[str]
    seed: int
    masks: np.ndarray | None = field(default=None, repr=False)  # [G, H, W] per-object coverage

    @property
    def boxes_xyxy(self) -> np.ndarray:
        return cxcywh_to_xyxy(self.boxes).reshape(-1, 4)


def _coverage(kind: str, cx: float, cy: float, side: float, size: int) -> np.ndarray:
    n = size * SUPERSAMPLE
    sub = (np.arange(n) + 0.5) / SUPERSAMPLE
    ys, xs = np.meshgrid(sub, sub, indexing="ij")
    half = side / 2
    if kind == "circle":
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= half ** 2
    elif kind == "square":
        inside = (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
    else:
        # apex at top centre, base along the bottom edge of the bounding square
        top, bottom = cy - half, cy + half
        frac = (ys - top) / side
        inside = (ys >= top) & (ys <= bottom) & (np.abs(xs - cx) <= frac * half)
    return inside.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


def mask_box(mask: np.ndarray) -> np.ndarray:
    """Pixel-extent corner box [x0, y0, x1, y1] of the non-zero coverage."""
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    return np.array([cols[0], rows[0], cols[-1] + 1, rows[-1] + 1], dtype=np.float64)


def generate_scene(seed: int, spec: SceneSpec, num_objects: int | None = None,
                   categories: Sequence[int] | None = None) -> SyntheticScene:
    """Render a scene deterministically from ``seed``.

    ``categories`` forces the class of each object (and their count);
    otherwise classes are drawn uniformly from ``spec.categories``.
    """
    rng = np.random.default_rng(seed)
    size = spec.size
    if categories is not None:
        cats = list(categories)
    else:
        n = int(rng.integers(spec.min_objects, spec.max_objects + 1)) if num_objects is None else num_objects
        cats = [int(c) for c in rng.integers(0, len(spec.categories), size=n)]
    placed: list[np.ndarray] = []
    geoms = []
    for _ in cats:
        for _attempt in range(spec.max_retries):
            side = rng.uniform(spec.min_side, spec.max_side)
            cx = rng.uniform(side / 2 + 1, size - side / 2 - 1)
            cy = rng.uniform(side / 2 + 1, size - side / 2 - 1)
            box = np.array([cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2])
            if not placed or box_iou(box[None], np.array(placed)).max() <= spec.max_iou:
                placed.append(box)
                geoms.append((cx, cy, side))
                break
        else:
            raise GenerationError(f"could not place {len(cats)} objects within IoU {spec.max_iou}")
    image = np.full((3, size, size), BACKGROUND)
    if spec.noise:
        image = image + rng.normal(0, spec.noise, size=image.shape)
    masks = []
    for cid, (cx, cy, side) in zip(cats, geoms):
        color, kind = spec.categories[cid]
        cov = _coverage(kind, cx, cy, side, size)
        masks.append(cov)
        image = image * (1 - cov) + np.asarray(COLORS[color])[:, None, None] * cov
    image = np.clip(image, 0, 1).astype(np.float32)
    boxes = xyxy_to_cxcywh(np.array(placed).reshape(-1, 4) / size)
    return SyntheticScene(
        image=image,
        boxes=boxes.reshape(-1, 4),
        class_ids=np.asarray(cats, dtype=np.intp),
        phrases=[phrase(*spec.categories[c]) for c in cats],
        seed=seed,
        masks=np.asarray(masks) if masks else np.zeros((0, size, size)),
    )


@dataclass
class BenchmarkSplit:
    """Scenes over a category dictionary; ``held_out`` pairs never occur in ``scenes``."""

    scenes: list[SyntheticScene]
    categories: list[str]
    held_out: list[str] = field(default_factory=list)

    def __post_init__(self):
        bad = set(self.held_out) & {p for s in self.scenes for p in s.phrases}
        if bad:
            raise ValueError(f"held-out categories present in scenes: {sorted(bad)}")

    def renamed(self, mapping: dict[str, str]) -> "BenchmarkSplit":
        """Same scenes with category phrases rewritten word by word."""
        def swap(p: str) -> str:
            return " ".join(mapping.get(w, w) for w in p.split())
        scenes = [SyntheticScene(s.image, s.boxes, s.class_ids, [swap(p) for p in s.phrases], s.seed, s.masks)
                  for s in self.scenes]
        return BenchmarkSplit(scenes, [swap(p) for p in self.categories], [swap(p) for p in self.held_out])


def make_split(spec: SceneSpec, seeds: Iterable[int], held_out: Sequence[str] = ()) -> BenchmarkSplit:
    scenes = [generate_scene(int(s), spec) for s in seeds]
    return BenchmarkSplit(scenes, spec.phrases, list(held_out))


def toy_split(num_scenes: int = 32, first_seed: int = 0) -> BenchmarkSplit:
    """The overfit split: 32 scenes over the six toy categories."""
    return make_split(SceneSpec(TOY_CATEGORIES), range(first_seed, first_seed + num_scenes),
                      held_out=[phrase(*TOY_HELD_OUT)])


def save_split(directory, split: BenchmarkSplit, spec: SceneSpec, with_images: bool = True) -> None:
    """``index.jsonl`` (header line, then one record per scene) and, optionally,
    the rendered images in the tensor container ``images.bin``."""
    from . import checkpoint as ckpt
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    header = {"spec": spec.to_dict(), "categories": split.categories, "held_out": split.held_out}
    write_jsonl(d / "index.jsonl", [header] + [ground_truth_record(s, i) for i, s in enumerate(split.scenes)])
    if with_images:
        ckpt.save(d / "images.bin", {f"{i:06d}": s.image for i, s in enumerate(split.scenes)}, {"count": len(split.scenes)})


def load_split(directory) -> tuple[BenchmarkSplit, SceneSpec]:
    """Inverse of :func:`save_split`; scenes are regenerated from their seeds
    and checked against the stored boxes (and images, when present)."""
    from . import checkpoint as ckpt
    d = Path(directory)
    header, *records = read_jsonl(d / "index.jsonl")
    spec = SceneSpec.from_dict(header["spec"])
    images = ckpt.load(d / "images.bin")[0] if (d / "images.bin").exists() else None
    scenes = []
    for r in records:
        s = generate_scene(int(r["seed"]), spec)
        same = np.allclose(s.boxes_xyxy, np.asarray(r["boxes"]).reshape(-1, 4)) and s.class_ids.tolist() == r["class_ids"]
        if not same:
            raise ValueError(f"scene {r['image_id']} does not regenerate from seed {r['seed']}")
        if images is not None and images[f"{r['image_id']:06d}"].tobytes() != s.image.tobytes():
            raise ValueError(f"stored image {r['image_id']} differs from its regeneration")
        scenes.append(SyntheticScene(s.image, s.boxes, s.class_ids, list(r["phrases"]), s.seed, s.masks))
    split = BenchmarkSplit(scenes, list(header["categories"]), list(header.get("held_out", [])))
    return split, spec


# ---------------------------------------------------------------------------
# AP

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


def _match_image(det_boxes: np.ndarray, gt_boxes: np.ndarray, thr: float) -> np.ndarray:
    """Greedy COCO matching in the given (score-descending) detection order."""
    tp = np.zeros(len(det_boxes), dtype=bool)
    if len(gt_boxes) == 0 or len(det_boxes) == 0:
        return tp
    ious = box_iou(det_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for i in range(len(det_boxes)):
        cand = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= thr:
            taken[j] = True
            tp[i] = True
    return tp


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """All-point interpolated AP of a ranked true-positive sequence."""
    if num_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / num_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def evaluate_ap(preds: Sequence[dict], gts: Sequence[dict], iou_thresholds=COCO_THRESHOLDS) -> dict:
    """COCO-style AP per class and averaged.

    ``preds[i]`` and ``gts[i]`` describe image ``i`` with corner-form
    ``boxes``, ``class_ids`` and (predictions only) ``scores``. Classes with no
    ground truth are left out of the mean.
    """
    thresholds = [float(t) for t in np.atleast_1d(iou_thresholds)]
    classes = sorted({int(c) for g in gts for c in np.asarray(g["class_ids"]).reshape(-1)})
    per_class = {}
    for c in classes:
        dets = []  # (score, image, box)
        num_gt = 0
        gt_by_img = []
        for i, (p, g) in enumerate(zip(preds, gts)):
            gcls = np.asarray(g["class_ids"]).reshape(-1)
            gb = np.asarray(g["boxes"], dtype=np.float64).reshape(-1, 4)[gcls == c]
            gt_by_img.append(gb)
            num_gt += len(gb)
            pcls = np.asarray(p["class_ids"]).reshape(-1)
            pb = np.asarray(p["boxes"], dtype=np.float64).reshape(-1, 4)
            ps = np.asarray(p["scores"], dtype=np.float64).reshape(-1)
            for k in np.nonzero(pcls == c)[0]:
                dets.append((ps[k], i, pb[k]))
        order = sorted(range(len(dets)), key=lambda k: -dets[k][0])
        aps = []
        for thr in thresholds:
            tp = np.zeros(len(order), dtype=bool)
            for i, gb in enumerate(gt_by_img):
                ranks = [r for r, k in enumerate(order) if dets[k][1] == i]
                if not ranks:
                    continue
                boxes = np.array([dets[order[r]][2] for r in ranks])
                tp[ranks] = _match_image(boxes, gb, thr)
            aps.append(average_precision(tp, num_gt))
        per_class[c] = float(np.mean(aps))
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return {"per_class": per_class, "mean": mean}


# ---------------------------------------------------------------------------
# JSON lines

def _as_list(a) -> list:
    return np.asarray(a).tolist()


def prediction_record(image_id, boxes_xyxy, class_ids, scores) -> dict:
    return {"image_id": image_id, "boxes": _as_list(boxes_xyxy), "class_ids": _as_list(class_ids),
            "scores": _as_list(scores)}


def ground_truth_record(scene: SyntheticScene, image_id=None) -> dict:
    return {"image_id": scene.seed if image_id is None else image_id, "boxes": _as_list(scene.boxes_xyxy),
            "class_ids": _as_list(scene.class_ids), "phrases": list(scene.phrases), "seed": scene.seed}


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
