import numpy as np
import pytest

from promptdet import tensor as T
from promptdet.encoders import (MemoryBank, MultiScaleFeatures, TextEncoder, ToyBackbone, Vocabulary,
                                encode_image, encode_text_prompt, sample_negatives)
from promptdet.gradcheck import grad_check
from promptdet.tensor import ContractError, ShapeError


@pytest.fixture
def vocab():
    return Vocabulary.from_phrases(["red circle", "green square", "blue triangle"])


def test_image_scales(rng):
    feats = encode_image(ToyBackbone(8, rng), rng.uniform(size=(3, 64, 64)))
    assert [m.shape for m in feats.maps] == [(1, 8, 8, 8), (1, 8, 4, 4), (1, 8, 2, 2), (1, 8, 1, 1)]
    assert feats.level_shapes == [(8, 8), (4, 4), (2, 2), (1, 1)]
    assert all(np.isfinite(m.data).all() for m in feats.maps)


def test_image_determinism(rng):
    bb = ToyBackbone(8, rng)
    img = rng.uniform(size=(3, 64, 64))
    a, b = encode_image(bb, img), encode_image(bb, img.copy())
    for x, y in zip(a.maps, b.maps):
        np.testing.assert_array_equal(x.data, y.data)


def test_image_size_contract(rng):
    with pytest.raises(ShapeError):
        encode_image(ToyBackbone(8, rng), np.zeros((3, 48, 64)))
    with pytest.raises(ShapeError):
        encode_image(ToyBackbone(8, rng), np.zeros((1, 64, 64)))


def test_features_reject_bad_pyramid():
    with pytest.raises(ShapeError):
        MultiScaleFeatures([T.zeros((1, 4, 8, 8)), T.zeros((1, 4, 4, 4)), T.zeros((1, 4, 3, 3)), T.zeros((1, 4, 1, 1))])


def test_tokens_round_trip(rng):
    feats = encode_image(ToyBackbone(4, rng), rng.uniform(size=(3, 64, 64)))
    tok = feats.tokens()
    assert tok.shape == (1, 85, 4)
    back = MultiScaleFeatures.from_tokens(tok, feats.level_shapes)
    for x, y in zip(feats.maps, back.maps):
        np.testing.assert_array_equal(x.data, y.data)


def test_backbone_gradient(rng):
    with T.precision(np.float64):
        bb = ToyBackbone(2, rng).astype(np.float64)
        img = T.tensor(rng.uniform(size=(1, 3, 64, 64)))
        w = rng.normal(size=85 * 2)

        def f():
            return T.sum(encode_image(bb, img).tokens() * T.tensor(w.reshape(1, 85, 2)))

        assert grad_check(f, bb.parameters(), max_coords=6) <= 1e-5


def test_text_single_token_is_projected_embedding(vocab, rng):
    enc = TextEncoder(vocab, 8, rng)
    emb = enc.embedding.data[vocab["red"]]
    expected = enc.norm(enc.proj(T.tensor(emb[None]))).data[0]
    np.testing.assert_allclose(encode_text_prompt(enc, "red").data, expected, atol=1e-6)


def test_text_mean_pooling(vocab, rng):
    enc = TextEncoder(vocab, 8, rng)
    pooled = (enc.embedding.data[vocab["red"]] + enc.embedding.data[vocab["circle"]]) / 2
    expected = enc.norm(enc.proj(T.tensor(pooled[None]))).data[0]
    np.testing.assert_allclose(encode_text_prompt(enc, "red circle").data, expected, atol=1e-6)


def test_text_order_invariant_and_normalised(vocab, rng):
    enc = TextEncoder(vocab, 8, rng)
    a = encode_text_prompt(enc, "red circle").data
    np.testing.assert_array_equal(a, encode_text_prompt(enc, "circle red").data)
    np.testing.assert_array_equal(a, encode_text_prompt(enc, "  Red   CIRCLE ").data)


def test_text_unknown_and_empty(vocab, rng):
    enc = TextEncoder(vocab, 8, rng)
    assert vocab.ids("purple blob") == [0, 0]
    with pytest.raises(ContractError):
        encode_text_prompt(enc, "   ")


def test_vocabulary_round_trip(vocab, tmp_path):
    vocab.save(tmp_path / "v.txt")
    back = Vocabulary.load(tmp_path / "v.txt")
    assert back.tokens == vocab.tokens


def test_memory_bank_against_list_oracle(rng):
    cap = 50
    bank, oracle = MemoryBank(cap), []
    for x in rng.integers(0, 400, size=100_000):
        p = f"phrase {x}"
        bank.add(p)
        if p not in oracle:
            oracle.append(p)
            if len(oracle) > cap:
                oracle.pop(0)
        assert len(bank) <= cap
    assert bank.phrases() == oracle


def test_memory_bank_normalises():
    bank = MemoryBank(3)
    bank.extend(["Red Circle", "red  circle", " red circle "])
    assert bank.phrases() == ["red circle"]


def test_sample_negatives(rng):
    bank = MemoryBank()
    bank.extend(f"thing {i}" for i in range(200))
    neg = sample_negatives(bank, {"thing 3", "thing 5"}, 80, rng)
    assert len(neg) == 80 and len(set(neg)) == 80
    assert not {"thing 3", "thing 5"} & set(neg)
    assert sample_negatives(bank, set(), 0, rng) == []
    only_pos = MemoryBank()
    only_pos.extend(["a", "b"])
    assert sample_negatives(only_pos, {"a", "b"}, 5, rng) == []
