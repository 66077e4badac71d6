import numpy as np
import pytest

from cxrvit import autograd as ag
from cxrvit import tnt
from cxrvit.autograd import ShapeError, Tensor
from cxrvit.models import model_gradcheck
from cxrvit.swin import MASK_VALUE
from cxrvit.tnt import TNT, TNT_SMALL_384, TNT_TOY, TntConfig


def jitter(model, rng, scale=0.1):
    for _, p in model.named_parameters():
        p.data += rng.normal(0.0, scale, size=p.shape).astype(p.dtype)
    return model


def test_split_counts():
    assert (TNT_SMALL_384.num_sentences, TNT_SMALL_384.num_words) == (576, 16)
    assert (TNT_TOY.num_sentences, TNT_TOY.num_words) == (4, 4)


def test_sentence_word_split_shapes(rng):
    model = TNT(TNT_TOY)
    s, w = tnt.sentence_word_split(model, rng.normal(size=(2, 3, 16, 16)))
    assert s.shape == (2, 4, 16)
    assert w.shape == (8, 4, 8)


def test_split_pixel_layout():
    # sentence k of a 16x16 image holds the 8x8 block at grid cell (k // 2, k % 2)
    model = TNT(TNT_TOY)
    x = np.zeros((1, 3, 16, 16))
    x[0, :, 8:, :8] = 1.0
    raw = model.embed.split(Tensor(x)).data
    assert raw.shape == (4, 4, 48)
    assert [bool(raw[k].all()) for k in range(4)] == [False, False, True, False]
    assert not raw[[0, 1, 3]].any()


def test_split_rejects_wrong_size():
    with pytest.raises(ShapeError):
        TNT(TNT_TOY)(np.zeros((1, 3, 24, 24)))


@pytest.mark.parametrize("kw", [dict(img_size=20), dict(word_patch=3), dict(inner_heads=3), dict(num_classes=1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TntConfig(**kw)


# ---------------------------------------------------------------- inner block
def test_word_group_isolation_jacobian_exactly_zero(f64):
    rng = np.random.default_rng(0)
    layer = jitter(tnt.TransformerLayer(8, 2, 4.0, rng), rng)
    words = Tensor(rng.normal(size=(4, 4, 8)), requires_grad=True)
    for i in range(4):
        for unit in np.ndindex(4, 8):
            words.grad = None
            out = layer(words)
            out[i][unit].sum().backward()
            others = np.delete(words.grad, i, axis=0)
            assert np.all(others == 0.0)
            assert np.any(words.grad[i] != 0.0)


def test_word_group_isolation_by_perturbation(rng):
    layer = tnt.TransformerLayer(8, 2, 4.0, rng)
    words = rng.normal(size=(3, 4, 8))
    base = layer(Tensor(words)).data
    bumped = words.copy()
    bumped[2] += 5.0
    out = layer(Tensor(bumped)).data
    assert np.array_equal(out[:2], base[:2])
    assert not np.array_equal(out[2], base[2])


def test_single_word_attention(f64, rng):
    layer = tnt.TransformerLayer(8, 2, 4.0, rng)
    layer.attn.record = True
    x = rng.normal(size=(3, 1, 8))
    out = layer(Tensor(x)).data
    assert np.all(layer.attn.last_attention == 1.0)
    a = layer.attn
    h = layer.norm1(Tensor(x)).data
    v = h @ a.qkv.weight.data[:, 16:] + a.qkv.bias.data[16:]
    mid = x + v @ a.proj.weight.data + a.proj.bias.data
    np.testing.assert_allclose(out, mid + layer.mlp(layer.norm2(Tensor(mid))).data, atol=1e-12)


def test_inner_attention_rows_sum_to_one(rng):
    model = TNT(TNT_TOY, seed=2)
    for m in model.modules():
        if hasattr(m, "record"):
            m.record = True
    model(rng.normal(size=(2, 3, 16, 16)))
    for m in model.modules():
        if hasattr(m, "record"):
            np.testing.assert_allclose(m.last_attention.sum(axis=-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------- aggregation
def test_aggregation_zero_words_keeps_sentences(rng):
    agg = tnt.WordAggregation(TNT_TOY, rng)
    sentences = Tensor(rng.normal(size=(2, 5, 16)))
    out = agg(Tensor(np.zeros((8, 4, 8))), sentences)
    assert out.shape == (2, 5, 16)
    np.testing.assert_array_equal(out.data, sentences.data)


def test_aggregation_targets_own_sentence(rng):
    agg = jitter(tnt.WordAggregation(TNT_TOY, rng), rng)
    sentences = Tensor(rng.normal(size=(1, 5, 16)))
    words = np.zeros((4, 4, 8))
    base = agg(Tensor(words), sentences).data
    words[2] = rng.normal(size=(4, 8))
    out = agg(Tensor(words), sentences).data
    changed = [bool(np.any(out[0, k] != base[0, k])) for k in range(5)]
    assert changed == [False, False, False, True, False]


def test_word_gradients_flow_through_aggregation(f64):
    rng = np.random.default_rng(4)
    model = jitter(TNT(TNT_TOY, seed=4), rng)
    x = Tensor(rng.normal(size=(1, 3, 16, 16)))
    _, words = model.embed(x)
    block = model.blocks[0]
    w = rng.normal(size=(1, 3))
    words = Tensor(words.data)

    def f(t):
        s, _ = model.embed(x)
        _, s = block(t, s)
        return (model.head(model.norm(s[:, 0])) * w).sum()

    assert ag.gradcheck(f, words) < 1e-4
    words.requires_grad = True
    f(words).backward()
    assert np.abs(words.grad).max() > 0


# ---------------------------------------------------------------- outer block
def test_outer_two_token_attention(rng):
    layer = tnt.TransformerLayer(16, 2, 4.0, rng)
    layer.attn.record = True
    layer(Tensor(rng.normal(size=(3, 2, 16))))
    assert layer.attn.last_attention.shape == (3, 2, 2, 2)
    np.testing.assert_allclose(layer.attn.last_attention.sum(axis=-1), 1.0, atol=1e-6)


def test_outer_permutation_equivariance(f64, rng):
    layer = tnt.TransformerLayer(16, 2, 4.0, rng)
    x = rng.normal(size=(2, 5, 16))
    perm = np.array([0, 3, 1, 4, 2])
    np.testing.assert_allclose(layer(Tensor(x[:, perm])).data, layer(Tensor(x)).data[:, perm], atol=1e-12)


def test_sentence_permutation_invariance_without_positions(f64):
    rng = np.random.default_rng(5)
    model = jitter(TNT(TNT_TOY, seed=5), rng)
    model.embed.sentence_pos.data[...] = 0.0
    x = rng.normal(size=(2, 3, 16, 16))
    blocks = [x[..., r * 8 : r * 8 + 8, c * 8 : c * 8 + 8] for r in range(2) for c in range(2)]
    order = [3, 0, 2, 1]
    shuffled = np.block([[blocks[order[0]], blocks[order[1]]], [blocks[order[2]], blocks[order[3]]]])
    np.testing.assert_allclose(model(shuffled).data, model(x).data, atol=1e-12)


def test_outer_block_gradcheck(f64):
    rng = np.random.default_rng(6)
    layer = jitter(tnt.TransformerLayer(16, 2, 4.0, rng), rng)
    w = rng.normal(size=(1, 5, 16))
    assert ag.gradcheck(lambda t: (layer(t) * w).sum(), Tensor(rng.normal(size=(1, 5, 16)))) < 1e-4


def test_class_token_path_at_one_sentence(f64):
    cfg = TntConfig(img_size=8, sentence_patch=8, word_patch=4, outer_dim=8, inner_dim=4, depth=1)
    rng = np.random.default_rng(7)
    model = jitter(TNT(cfg, seed=7), rng)
    mask = np.zeros((1, 2, 2))
    mask[0, :, 1] = MASK_VALUE
    x = rng.normal(size=(2, 3, 8, 8))
    logits = model(x, outer_mask=mask).data

    # brute force: the token only sees itself, so its update skips every sentence
    emb, outer = model.embed, model.blocks[0].outer
    cls = emb.cls_token.data[0] + emb.sentence_pos.data[:1]
    h = outer.norm1(Tensor(cls)).data
    a = outer.attn
    v = h @ a.qkv.weight.data[:, 16:] + a.qkv.bias.data[16:]
    cls = cls + v @ a.proj.weight.data + a.proj.bias.data
    cls = cls + outer.mlp(outer.norm2(Tensor(cls))).data
    expected = model.head(model.norm(Tensor(cls))).data
    np.testing.assert_allclose(logits, np.tile(expected, (2, 1)), atol=1e-9)
    # and without the mask the image does matter
    unmasked = model(x).data
    assert not np.allclose(unmasked[0], unmasked[1])


# ---------------------------------------------------------------- full model
def test_forward_shape_and_determinism(rng):
    x = rng.normal(size=(2, 3, 16, 16))
    a, b = TNT(TNT_TOY, seed=1)(x).data, TNT(TNT_TOY, seed=1)(x).data
    assert a.shape == (2, 3)
    assert a.tobytes() == b.tobytes()
    np.testing.assert_allclose(ag.softmax(Tensor(a)).data.sum(axis=1), 1.0, atol=1e-6)


def test_class_token_starts_at_zero():
    assert not TNT(TNT_TOY).embed.cls_token.data.any()


@pytest.mark.parametrize(
    "cfg",
    [TNT_TOY, TntConfig(img_size=24, sentence_patch=12, word_patch=3, outer_dim=12, inner_dim=6, depth=2,
                        outer_heads=3, inner_heads=2, mlp_ratio=2.0, num_classes=4)],
)
def test_param_count_closed_form_matches_instance(cfg):
    assert tnt.tnt_param_count(cfg) == TNT(cfg).num_parameters()


def test_param_count_regression():
    assert tnt.tnt_param_count(TNT_TOY) == 5971
    assert tnt.tnt_param_count(TNT_SMALL_384) == 23_538_363


def test_toy_loss_gradcheck_sampled(f64):
    rng = np.random.default_rng(8)
    model = jitter(TNT(TNT_TOY, seed=8), rng, 0.05)
    errors = model_gradcheck(model, rng.normal(size=(2, 3, 16, 16)), [1, 2], max_components=3)
    assert len(errors) == len(model.parameters()) + 1
    assert max(errors.values()) < 1e-4
