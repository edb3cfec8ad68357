import numpy as np
import pytest
from gradcheck import numeric_grad, rel_error

from fedembed import nn
from fedembed.errors import ConfigurationError, UsageError
from fedembed.model import (
    ArchConfig,
    LossWeights,
    build_model,
    embed_input,
    grads_to_tensors,
    model_backward,
    model_forward,
)


def tiny(num_heads=3, side=6, preset="small-mlp", seed=0, **kw):
    cfg = ArchConfig(preset=preset, num_heads=num_heads, num_styles=3, embed_dim=side, image_side=side, feature_dim=5, **kw)
    return build_model(cfg, np.random.default_rng(seed))


def batch(rng, n=4, side=6):
    return rng.uniform(size=(n, side, side)), rng.uniform(size=side), np.array([1, 0] * (n // 2)), rng.integers(0, 3, n)


def test_mnist_conv_head_input_is_92():
    p = build_model(ArchConfig(preset="mnist-conv", num_heads=10, num_styles=10))
    assert p.feature_dim == 64
    assert p.head_input_dim == 92
    assert p.heads.W.shape == (10, 2, 92)
    assert p.kway_head.params[0]["W"].shape == (10, 92)
    assert p.encoder.num_params() == 114896


def test_embed_dim_must_match_side():
    with pytest.raises(ConfigurationError, match="image side"):
        build_model(ArchConfig(embed_dim=20, image_side=28))


def test_embed_input_places_diagonal():
    e = np.arange(1.0, 5.0)
    x = embed_input(np.zeros((4, 4)), e)
    assert x.shape == (2, 4, 4)
    assert np.array_equal(np.diag(x[1]), e)
    assert x[1].sum() == e.sum()


def test_zero_embedding_leaves_channel_empty():
    x = embed_input(np.ones((2, 4, 4)), np.zeros(4))
    assert not x[:, 1].any()


@pytest.mark.parametrize("preset", ["small-mlp", "synthetic-conv"])
@pytest.mark.parametrize("seed", range(3))
def test_embedding_gradient_matches_finite_differences(preset, seed):
    side = 16 if preset == "synthetic-conv" else 6
    rng = np.random.default_rng(seed)
    p = tiny(preset=preset, side=side, seed=seed)
    x, e, y, m = batch(rng, side=side)
    b = model_forward(p, e, x, 2)
    g = model_backward(p, b, y, m, LossWeights(), embed_source="global+subpop")

    def loss(ev):
        bb = model_forward(p, ev, x, 2)
        return float(nn.cross_entropy(bb.subpop_logits, y)[0].sum() + nn.cross_entropy(bb.global_logits, y)[0].sum())

    assert rel_error(g.embedding, numeric_grad(loss, e)) < 1e-4


@pytest.mark.parametrize("key", ["encoder.1.W", "encoder.2.gamma", "heads.W", "heads.b", "kway.0.W"])
def test_shared_parameters_follow_subpop_and_kway_losses(key):
    rng = np.random.default_rng(1)
    p = tiny()
    x, e, y, m = batch(rng)
    g = grads_to_tensors(p, model_backward(p, model_forward(p, e, x, 1), y, m))

    def loss(v):
        q = p.with_tensors(dict(p.tensors(), **{key: v}))
        b = model_forward(q, e, x, 1)
        return float(nn.cross_entropy(b.subpop_logits, y)[0].sum() + nn.cross_entropy(b.kway_logits, m)[0].sum())

    assert rel_error(g[key], numeric_grad(loss, p.tensors()[key])) < 1e-4


def test_global_head_trains_only_on_its_own_loss():
    rng = np.random.default_rng(2)
    p = tiny()
    x, e, y, m = batch(rng)
    base = model_backward(p, model_forward(p, e, x, 0), y, m, LossWeights(global_=0.0))
    full = model_backward(p, model_forward(p, e, x, 0), y, m, LossWeights())
    for a, b in zip(base.encoder, full.encoder):
        for k in a:
            assert np.array_equal(a[k], b[k])
    assert not np.any(base.global_head["0.W"])
    assert np.any(full.global_head["0.W"])


def test_unused_heads_get_exact_zeros():
    rng = np.random.default_rng(3)
    p = tiny(num_heads=4)
    x, e, y, m = batch(rng)
    t = grads_to_tensors(p, model_backward(p, model_forward(p, e, x, 2), y, m))
    assert np.any(t["heads.W"][2])
    for j in (0, 1, 3):
        assert not t["heads.W"][j].any() and not t["heads.b"][j].any()


def test_grouped_backward_matches_separate_users():
    rng = np.random.default_rng(4)
    p = tiny()
    xs = [batch(rng) for _ in range(3)]
    heads = [0, 2, 2]
    emb = np.repeat(np.stack([b[1] for b in xs]), 4, axis=0)
    X = np.concatenate([b[0] for b in xs])
    Y = np.concatenate([b[2] for b in xs])
    M = np.concatenate([b[3] for b in xs])
    g = model_backward(p, model_forward(p, emb, X, np.repeat(heads, 4)), Y, M, groups=3)
    for i, (x, e, y, m) in enumerate(xs):
        one = model_backward(p, model_forward(p, e, x, heads[i]), y, m)
        t1 = grads_to_tensors(p, one)
        tg = grads_to_tensors(p, g, group=i)
        for k in t1:
            assert np.allclose(t1[k], tg[k], rtol=1e-12, atol=1e-12), k
        assert np.allclose(one.embedding, g.embedding[i], atol=1e-12)


def test_group_must_share_a_head():
    rng = np.random.default_rng(5)
    p = tiny()
    x, e, y, m = batch(rng)
    with pytest.raises(UsageError, match="single head"):
        model_backward(p, model_forward(p, e, x, np.array([0, 1, 0, 1])), y, m, groups=1)


def test_head_index_out_of_range():
    rng = np.random.default_rng(6)
    p = tiny(num_heads=2)
    x, e, _, _ = batch(rng)
    with pytest.raises(UsageError, match="out of range"):
        model_forward(p, e, x, 5)


def test_stale_bundle_rejected():
    rng = np.random.default_rng(7)
    p = tiny()
    x, e, y, m = batch(rng)
    b = model_forward(p, e, x, 0)
    q = p.with_tensors(p.tensors())
    with pytest.raises(UsageError):
        model_backward(q, b, y, m)


def test_no_server_heads_needs_local_bank():
    p = tiny(num_heads=0)
    assert p.heads is None and "heads.W" not in p.tensors()
    with pytest.raises(UsageError, match="local head bank"):
        model_forward(p, np.zeros(6), np.zeros((1, 6, 6)), 0)


def test_build_is_deterministic():
    a, b = tiny(seed=9), tiny(seed=9)
    for k, v in a.tensors().items():
        assert np.array_equal(v, b.tensors()[k])
