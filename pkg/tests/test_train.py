import math

import numpy as np
import pytest

from promptdet import checkpoint as ckpt
from promptdet.model import ModelConfig
from promptdet.shapes import SceneSpec, make_split
from promptdet.train import (AdamW, StateError, TrainConfig, collate, frozen_digest, load_checkpoint, lr_at,
                             pretrain, pretrain_objective, pretrain_step, prompt_phrases, save_checkpoint,
                             train_visual_prompt, tune_optimized_prompt)

CATS = (("red", "circle"), ("green", "square"), ("blue", "triangle"))
SMALL = ModelConfig(d=8, num_queries=6)


@pytest.fixture(scope="module")
def split():
    return make_split(SceneSpec(CATS), range(8))


def small_cfg(**kw):
    return TrainConfig(model=SMALL, log_every=0, batch_size=2, **kw)


def test_lr_milestones():
    assert lr_at(1.0, 79, 100, (0.8, 0.9)) == 1.0
    assert lr_at(1.0, 80, 100, (0.8, 0.9)) == pytest.approx(0.1)
    assert lr_at(1.0, 90, 100, (0.8, 0.9)) == pytest.approx(0.01)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(milestones=(0.9, 0.8))
    with pytest.raises(ValueError):
        TrainConfig(milestones=(0.0, 0.5))
    with pytest.raises(ValueError):
        TrainConfig(lr={"default": 0.0})
    with pytest.raises(ValueError):
        TrainConfig(regime="finetune")
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"stepz": 3})


def test_config_yaml_round_trip(tmp_path):
    cfg = small_cfg(steps=7, milestones=(0.5, 0.75))
    cfg.save(tmp_path / "c.yaml")
    assert TrainConfig.load(tmp_path / "c.yaml") == cfg
    assert cfg.with_overrides(steps=9, seed=None).steps == 9
    assert cfg.with_overrides(model={"d": 16}).model.num_queries == SMALL.num_queries


def test_losses_finite_at_init(split):
    from promptdet.encoders import Vocabulary
    from promptdet.model import AuxiliarySupervision, Detector
    cfg = small_cfg()
    model, aux = Detector(Vocabulary.from_phrases(split.categories), SMALL), AuxiliarySupervision(8)
    batch = collate(split.scenes[:2], prompt_phrases(split.scenes[:2], split.categories, 80))
    _, parts, _ = pretrain_objective(model, aux, batch, cfg)
    assert all(math.isfinite(float(v.data)) for v in parts.values())
    assert set(parts) >= {"decoder", "aux", "prompt", "total"}


def test_repeated_steps_on_one_batch_decrease_loss(split):
    from promptdet.encoders import Vocabulary
    from promptdet.model import AuxiliarySupervision, Detector
    cfg = small_cfg(steps=10)
    model, aux = Detector(Vocabulary.from_phrases(split.categories), SMALL), AuxiliarySupervision(8)
    params = model.parameters() + aux.parameters()
    opt = AdamW(params, [1e-3] * len(params))
    batch = collate(split.scenes[:2], prompt_phrases(split.scenes[:2], split.categories, 80))
    losses = [pretrain_step(model, aux, batch, cfg, opt, s)["total"] for s in range(11)]
    rises = sum(b >= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0] and rises <= 2


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        collate([], ["red circle"])


def test_seeded_runs_identical(split, tmp_path):
    cfg = small_cfg(steps=3)
    for name in ("a", "b"):
        model, aux, _ = pretrain(split, cfg)
        save_checkpoint(tmp_path / name, model, cfg, 3, aux)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


@pytest.fixture(scope="module")
def base(split, tmp_path_factory):
    cfg = small_cfg(steps=2)
    model, aux, _ = pretrain(split, cfg)
    path = tmp_path_factory.mktemp("ck") / "base.ckpt"
    save_checkpoint(path, model, cfg, 2, aux)
    return path


def test_checkpoint_round_trip_byte_identical(base, tmp_path):
    model, aux, cfg, meta, extra = load_checkpoint(base)
    save_checkpoint(tmp_path / "again", model, cfg, meta["step"], aux, extra)
    assert (tmp_path / "again").read_bytes() == base.read_bytes()


def test_missing_checkpoint_is_state_error(tmp_path):
    with pytest.raises(StateError):
        load_checkpoint(tmp_path / "nope")
    with pytest.raises(StateError):
        train_visual_prompt(None, None, small_cfg())


def test_visual_training_leaves_base_untouched(base, split):
    model, *_ = load_checkpoint(base)
    model.freeze()
    model.visual.unfreeze()
    before = frozen_digest(model)
    visual_before = ckpt.tensor_digest(model.visual.state_dict(), list(model.visual.state_dict()))
    train_visual_prompt(model, split, small_cfg(regime="visual-prompt", steps=2))
    assert frozen_digest(model) == before
    assert ckpt.tensor_digest(model.visual.state_dict(), list(model.visual.state_dict())) != visual_before
    # frozen tensors never receive a gradient buffer
    assert all(p.grad is None for p in model.backbone.parameters() + model.decoder.parameters())


def test_tuning_leaves_base_untouched(base, split):
    model, *_ = load_checkpoint(base)
    state = model.state_dict()
    before = ckpt.tensor_digest(state, list(state))
    _, smap, report = tune_optimized_prompt(model, split, small_cfg(regime="tune-prompt", steps=2), M=3)
    after = model.state_dict()
    assert ckpt.tensor_digest(after, list(after)) == before
    assert report["M"] == 3 and smap.num_rows == 3 * len(report["classes"])
    assert 0 <= report["zero_shot_ap"] <= 1 and 0 <= report["tuned_ap"] <= 1


def test_tuning_skips_absent_class(base, split, caplog):
    from promptdet.shapes import BenchmarkSplit
    model, *_ = load_checkpoint(base)
    only = [s for s in split.scenes if "blue triangle" not in s.phrases]
    sub = BenchmarkSplit(only, split.categories)
    _, _, report = tune_optimized_prompt(model, sub, small_cfg(regime="tune-prompt", steps=1))
    assert 2 not in report["classes"]
    assert "absent" in caplog.text
