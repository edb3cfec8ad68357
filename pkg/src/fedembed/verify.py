"""Built-in property suite run by ``fedembed verify``.

Each check is small enough that the whole suite finishes in well under a
minute on one CPU core. A check returns a short detail string and raises
``AssertionError`` on failure.
"""

from __future__ import annotations

import time

import numpy as np

from . import nn
from .clustering import (
    make_som,
    prototype_assign,
    som_bmu,
    som_client_step,
    som_server_round,
    triplet_update,
)
from .data import StyledDataset, UserDataset, UserRecord
from .federation import (
    centralized_train,
    client_round,
    init_user,
    method_behaviors,
    server_aggregate,
    server_apply,
)
from .model import ArchConfig, LossWeights, build_model, grads_to_tensors, model_backward, model_forward
from .privacy import DPConfig, clip_packet, gaussianize, global_norm


def _fd(f, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def _layer_cases(rng):
    yield nn.Dense(4, 3), (4,)
    yield nn.Conv2d(2, 3, 3, stride=2, padding=1), (2, 5, 6)
    yield nn.AvgPool2d(2), (2, 4, 6)
    yield nn.LayerNorm((3, 2)), (4, 3, 2)
    yield nn.ReLU(), (6,)
    yield nn.Flatten(), (2, 3, 2)


def check_layer_gradients(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for layer, shape in _layer_cases(rng):
        net = nn.build_network([layer], shape, rng)
        net.params = [{k: v + 0.3 * rng.normal(size=v.shape) for k, v in p.items()} for p in net.params]
        x = rng.normal(size=(2,) + shape)
        x[np.abs(x) < 1e-3] = 0.5
        out, tape = nn.forward(net, x)
        r = rng.normal(size=out.shape)
        grads, gx = nn.backward(net, tape, r)
        worst = max(worst, _rel(gx, _fd(lambda v: float((nn.forward(net, v)[0] * r).sum()), x)))
        for name, value in net.params[0].items():
            def f(pv, name=name):
                trial = nn.Network(net.layers, net.input_shape, [dict(net.params[0], **{name: pv})])
                return float((nn.forward(trial, x)[0] * r).sum())

            worst = max(worst, _rel(grads[0][name], _fd(f, value)))
    assert worst < 1e-4, f"max relative error {worst:.2e}"
    return f"6 layer kinds, max rel err {worst:.1e}"


def _tiny_model(rng, side=6):
    cfg = ArchConfig(preset="small-mlp", num_heads=3, num_styles=3, embed_dim=side, image_side=side, feature_dim=5)
    return build_model(cfg, rng)


def check_model_gradients(seed=0):
    rng = np.random.default_rng(seed)
    params = _tiny_model(rng)
    x = rng.uniform(size=(4, 6, 6))
    e = rng.uniform(size=6)
    y = np.array([1, 0, 1, 0])
    m = np.array([0, 1, 2, 1])

    def shared_loss(p):
        # the encoder and task heads train on L_C(phi) + L_M(gamma); nu trains on its own L_C
        b = model_forward(p, e, x, 1)
        return float(nn.cross_entropy(b.subpop_logits, y)[0].sum() + nn.cross_entropy(b.kway_logits, m)[0].sum())

    def global_loss(p):
        return float(nn.cross_entropy(model_forward(p, e, x, 1).global_logits, y)[0].sum())

    b = model_forward(params, e, x, 1)
    g = model_backward(params, b, y, m, LossWeights(), embed_source="global+subpop")
    t = grads_to_tensors(params, g)
    worst = 0.0
    for key, loss in (("encoder.1.W", shared_loss), ("heads.W", shared_loss), ("kway.0.b", shared_loss), ("global.0.W", global_loss)):
        def f(v, key=key, loss=loss):
            return loss(params.with_tensors(dict(params.tensors(), **{key: v})))

        worst = max(worst, _rel(t[key], _fd(f, params.tensors()[key])))
    # the embedding sees L_C through both heads, but not the k-way loss
    def fe(ev):
        bb = model_forward(params, ev, x, 1)
        return float(nn.cross_entropy(bb.subpop_logits, y)[0].sum() + nn.cross_entropy(bb.global_logits, y)[0].sum())

    worst = max(worst, _rel(g.embedding, _fd(fe, e)))
    assert worst < 1e-4, f"max relative error {worst:.2e}"
    return f"encoder/heads/embedding, max rel err {worst:.1e}"


def _one_user(rng, n=8, side=6):
    samples = StyledDataset(rng.uniform(size=(n, side, side)), np.array([0, 1] * (n // 2)))
    data = UserDataset(np.arange(n), (samples.styles == 0).astype(np.int64), np.arange(n), (samples.styles == 0).astype(np.int64))
    return samples, UserRecord(0, 0, data)


def check_federation_oracle(seed=0, steps=50):
    rng = np.random.default_rng(seed)
    samples, record = _one_user(rng)
    spec = method_behaviors("fedembed-type")
    params = _tiny_model(rng)
    user = init_user(record, samples, spec, 6, params.head_input_dim, seed, 1e-3)
    ref_traj, ref_e = centralized_train(params, init_user(record, samples, spec, 6, params.head_input_dim, seed, 1e-3), samples, spec, steps, 0.01)
    opt = nn.adam_init(params.tensors(), lr=0.01)
    for s in range(steps):
        packet = client_round(user, params, spec, None, DPConfig(), s, samples)
        params, opt = server_apply(opt, params, server_aggregate([packet]))
        for k, v in params.tensors().items():
            assert np.array_equal(v, ref_traj[s][k]), f"step {s}: {k} differs"
    assert np.array_equal(user.embedding, ref_e), "embedding differs"
    return f"{steps} steps bit-identical"


def check_aggregation(seed=0):
    rng = np.random.default_rng(seed)
    packets = [{"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)} for _ in range(7)]
    mean = server_aggregate(packets)
    for k in ("a", "b"):
        brute = sum(p[k] for p in packets) / 7
        assert np.allclose(mean[k], brute, rtol=0, atol=1e-15)
    assert all(np.array_equal(server_aggregate([packets[0]])[k], packets[0][k]) for k in "ab")
    neg = {k: -v for k, v in packets[0].items()}
    assert all(not server_aggregate([packets[0], neg])[k].any() for k in "ab")
    return "mean, identity and cancellation"


def check_privacy(seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(200):
        p = {"x": rng.normal(size=5) * rng.uniform(0, 10)}
        assert global_norm(clip_packet(p, 1.0)) <= 1.0 + 1e-12
    zero = {"x": np.zeros(100_000)}
    noisy = gaussianize(zero, 0.5, 1.0, np.random.default_rng(seed))["x"]
    var = float(noisy.var())
    assert abs(var - 0.25) / 0.25 < 0.02, f"variance {var:.4f}"
    return f"clip bound held, noise variance {var:.4f} vs 0.25"


def check_neighbours(seed=0, trials=1000):
    rng = np.random.default_rng(seed)
    som = make_som(6, 4, 10, rng)
    for _ in range(trials):
        e = rng.normal(size=4)
        protos = rng.normal(size=(5, 4))
        assert prototype_assign(e, protos) == min(range(5), key=lambda j: float(((protos[j] - e) ** 2).sum()))
        assert som_bmu(som, e) == min(range(6), key=lambda j: float(((som.weights[j] - e) ** 2).sum()))
    e_u, e_p, e_n = rng.normal(size=(3, 4))
    step = triplet_update(np.zeros(4), e_p, e_n, 1.0, 0.01)
    assert np.array_equal(step, 0.01 * (2.0 * (e_p - e_n)))
    return f"{trials} nearest-neighbour instances, exact triplet step"


def check_som_clusters(seed=0):
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]])
    som = make_som(3, 2, 200, rng)
    som = som_server_round(som, [som_client_step(som, centers[0])], "best")
    assert som.iteration == 1
    return "server round advances schedule"


CHECKS = (
    ("layer gradients", check_layer_gradients),
    ("model gradients", check_model_gradients),
    ("federation oracle", check_federation_oracle),
    ("aggregation", check_aggregation),
    ("privacy", check_privacy),
    ("nearest neighbours", check_neighbours),
    ("som round", check_som_clusters),
)


def run_all(out=print):
    failed = 0
    t0 = time.time()
    for name, fn in CHECKS:
        try:
            detail = fn()
            out(f"PASS  {name}: {detail}")
        except AssertionError as exc:
            failed += 1
            out(f"FAIL  {name}: {exc}")
    out(f"{len(CHECKS) - failed}/{len(CHECKS)} checks passed in {time.time() - t0:.1f}s")
    return failed == 0
