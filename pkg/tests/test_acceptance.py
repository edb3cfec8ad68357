"""Acceptance criteria 1-12, each at its stated tolerance.

Every test prints one ``[criterion N] PASS|FAIL`` line, even under output
capture. Criteria 1-5 are desk-scale learning runs (K=10, 30 users per
sub-population, 300 rounds, small-mlp, seeds 0-4); see acceptance_runs.py
for the result cache.
"""

import math

import numpy as np
from acceptance_runs import desk_config, mean_over_seeds
from gradcheck import numeric_grad, rel_error
from test_nn import KINDS, random_case

from fedembed import config as C
from fedembed import nn
from fedembed.clustering import (
    make_som,
    prototype_assign,
    purity,
    som_bmu,
    som_bmu_many,
    som_client_step,
    som_server_round,
    triplet_update,
)
from fedembed.data import UserRecord
from fedembed.federation import (
    centralized_train,
    client_round,
    init_user,
    load_samples,
    run_experiment,
    server_aggregate,
    server_apply,
    setup_experiment,
)
from fedembed.metrics import matched_diagonal_fraction
from fedembed.model import ArchConfig, LossWeights, build_model, grads_to_tensors, model_backward, model_forward
from fedembed.privacy import DPConfig, clip_packet, gaussianize, global_norm, privatize

PERSONAL_HEAD = ("fedrep", "pfedme", "fedembed-personal")


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def fmt(d):
    return ", ".join(f"{k}={v:.3f}" for k, v in d.items())


# ---------------------------------------------------------------------------
# quantitative, desk scale


def test_criterion_01_balanced_mnist_no_dp(capsys):
    m = {name: mean_over_seeds(name)[0] for name in C.METHOD_NAMES}
    tiers = [
        ("fedembed-type", "fedembed-prototype"),
        PERSONAL_HEAD,
        ("fedembed-som",),
        ("pfedkm", "global", "global+"),
    ]
    checks = {
        "type>=0.80": m["fedembed-type"] >= 0.80,
        "prototype>=0.80": m["fedembed-prototype"] >= 0.80,
        "global<=0.55": m["global"] <= 0.55,
        # the within-tier order carries the +-0.05 run-to-run tolerance stated for it
        "type>=prototype(+-0.05)": m["fedembed-type"] >= m["fedembed-prototype"] - 0.05,
        "prototype-tier2>=0.03": m["fedembed-prototype"] - max(m[x] for x in tiers[1]) >= 0.03,
        "tier2-som>=0.03": min(m[x] for x in tiers[1]) - m["fedembed-som"] >= 0.03,
        "som-tier4>=0.03": m["fedembed-som"] - max(m[x] for x in tiers[3]) >= 0.03,
    }
    failed = [k for k, v in checks.items() if not v]
    strict = m["fedembed-type"] >= m["fedembed-prototype"]
    report(capsys, 1, not failed, f"5-seed means {fmt(m)}; strict type>=prototype {strict}; failed checks: {failed or 'none'}")


def test_criterion_02_balanced_mnist_dp(capsys):
    m = {name: mean_over_seeds(name, dp=True)[0] for name in ("fedembed-prototype",) + PERSONAL_HEAD}
    proto = m["fedembed-prototype"]
    margin_ok = all(proto - m[b] >= 0.10 for b in PERSONAL_HEAD)
    band_ok = all(abs(m[b] - 0.50) <= 0.06 for b in PERSONAL_HEAD)
    report(capsys, 2, margin_ok and band_ok, f"DP C=1 sigma=0.5 5-seed means {fmt(m)}; margin>=0.10 {margin_ok}, baselines in 0.50+-0.06 {band_ok}")


def _subpop_means(reports):
    per = [r["final"]["per_subpop_f1"] for r in reports]
    return {int(k): float(np.mean([p[k] for p in per])) for k in per[0]}


def test_criterion_03_imbalanced_mnist(capsys):
    g = _subpop_means(mean_over_seeds("global", balance="imbalanced")[1])
    p = _subpop_means(mean_over_seeds("fedembed-prototype", balance="imbalanced")[1])
    small = (6, 7, 8, 9)  # the four 5% sub-populations
    g_gap = min(g[0] - g[j] for j in small)
    p_gap = max(p[0] - p[j] for j in small)
    ok = g_gap >= 0.25 and p_gap <= 0.10
    report(
        capsys, 3, ok,
        f"Global F1 25%={g[0]:.3f} vs 5% {[round(g[j], 3) for j in small]} (min gap {g_gap:.3f}, need >=0.25); "
        f"Prototype F1 25%={p[0]:.3f} vs 5% {[round(p[j], 3) for j in small]} (max gap {p_gap:.3f}, need <=0.10)",
    )


def test_criterion_04_prototype_cluster_recovery(capsys):
    _, reports = mean_over_seeds("fedembed-prototype")
    fracs = [matched_diagonal_fraction(r["final"]["confusion"]) for r in reports]
    report(capsys, 4, min(fracs) >= 0.95, f"matched-diagonal fraction per seed {[round(f, 3) for f in fracs]} (need >=0.95)")


def test_criterion_05_synthetic_interpolated(capsys):
    m = {name: mean_over_seeds(name, dataset="synthetic")[0] for name in ("fedembed-prototype", "fedembed-som", "global+")}
    proto = m["fedembed-prototype"]
    ok = proto - m["fedembed-som"] >= 0.10 and proto - m["global+"] >= 0.10
    report(capsys, 5, ok, f"K=20 from 8 bases, 5-seed means {fmt(m)} (prototype margin >=0.10)")


# ---------------------------------------------------------------------------
# property based


def _layer_instance(kind, seed):
    rng = np.random.default_rng(seed)
    layer, shape = random_case(kind, rng)
    net = nn.build_network([layer], shape, rng)
    net.params = [{k: v + 0.3 * rng.normal(size=v.shape) for k, v in p.items()} for p in net.params]
    x = rng.normal(size=(2,) + shape)
    if kind == "relu":
        x[np.abs(x) < 1e-3] = 0.5
    out, tape = nn.forward(net, x)
    r = rng.normal(size=out.shape)
    grads, gx = nn.backward(net, tape, r)
    err = rel_error(gx, numeric_grad(lambda v: float((nn.forward(net, v)[0] * r).sum()), x))
    for name, value in net.params[0].items():
        def f(pv, name=name):
            trial = nn.Network(net.layers, net.input_shape, [dict(net.params[0], **{name: pv})])
            return float((nn.forward(trial, x)[0] * r).sum())

        err = max(err, rel_error(grads[0][name], numeric_grad(f, value)))
    return err


def _model_instance(seed):
    """Embedding plus every model tensor of one random small model."""
    rng = np.random.default_rng(seed)
    preset = ("small-mlp", "synthetic-conv")[seed % 2]
    side = 6 if preset == "small-mlp" else 16
    cfg = ArchConfig(preset=preset, num_heads=3, num_styles=3, embed_dim=side, image_side=side, feature_dim=4)
    p = build_model(cfg, rng)
    x = rng.uniform(size=(2, side, side))
    e = rng.uniform(size=side)
    y, m, head = np.array([1, 0]), rng.integers(0, 3, 2), int(rng.integers(0, 3))
    g = model_backward(p, model_forward(p, e, x, head), y, m, LossWeights(), embed_source="global+subpop")

    def loss(q, ev, which):
        b = model_forward(q, ev, x, head)
        out = float(nn.cross_entropy(b.global_logits, y)[0].sum()) if "global" in which else 0.0
        if "shared" in which:
            out += float(nn.cross_entropy(b.subpop_logits, y)[0].sum() + nn.cross_entropy(b.kway_logits, m)[0].sum())
        if "subpop" in which:
            out += float(nn.cross_entropy(b.subpop_logits, y)[0].sum())
        return out

    err = rel_error(g.embedding, numeric_grad(lambda ev: loss(p, ev, ("global", "subpop")), e))
    t = p.tensors()
    gt = grads_to_tensors(p, g)
    for key, value in t.items():
        which = ("global",) if key.startswith("global.") else ("shared",)
        num = numeric_grad(lambda v, key=key: loss(p.with_tensors(dict(t, **{key: v})), e, which), value)
        err = max(err, rel_error(gt[key], num))
    return err


def test_criterion_06_gradient_suite(capsys):
    errs = []
    for i in range(100):
        if i % 7 == 6:
            errs.append(("model", _model_instance(i)))
        else:
            kind = KINDS[i % len(KINDS)]
            errs.append((kind, _layer_instance(kind, 1000 + i)))
    worst = max(errs, key=lambda e: e[1])
    kinds = sorted({k for k, _ in errs})
    report(capsys, 6, worst[1] < 1e-4, f"100 instances over {kinds}; worst rel err {worst[1]:.2e} ({worst[0]})")


def test_criterion_07_federation_oracle(capsys):
    cfg = desk_config("fedembed-type", 0, rounds=50)
    exp = setup_experiment(cfg)
    u = exp.users[0]
    twin = init_user(UserRecord(u.user_id, u.subpop, u.data), exp.samples, exp.spec, 28, exp.params.head_input_dim, exp.config.seed, 1e-3)
    traj, e = centralized_train(exp.params, twin, exp.samples, exp.spec, 50, cfg.training.central_lr)
    params, opt, first_bad = exp.params, exp.opt, None
    for s in range(50):
        packet = client_round(u, params, exp.spec, exp.clustering, DPConfig(), s, exp.samples, exp.settings)
        params, opt = server_apply(opt, params, server_aggregate([packet]))
        if first_bad is None and not all(np.array_equal(v, traj[s][k]) for k, v in params.tensors().items()):
            first_bad = s
    ok = first_bad is None and np.array_equal(u.embedding, e)
    report(capsys, 7, ok, f"small-mlp, 1 client, 50 steps: {'bit-identical' if ok else f'diverged at step {first_bad}'}")


def test_criterion_08_aggregation(capsys):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 12))
        packets = [{"a": rng.normal(size=(3, 2)), "h": rng.normal(size=(4, 2)) * (rng.random() < 0.3)} for _ in range(n)]
        mean = server_aggregate(packets)
        for k in ("a", "h"):
            brute = np.zeros_like(packets[0][k])
            for p in packets:
                for idx in np.ndindex(brute.shape):
                    brute[idx] += p[k][idx]
            worst = max(worst, float(np.abs(mean[k] - brute / n).max()))
    g = {"a": rng.normal(size=(5, 5))}
    single = np.array_equal(server_aggregate([g])["a"], g["a"])
    cancel = not server_aggregate([g, {"a": -g["a"]}])["a"].any()
    ok = worst == 0.0 and single and cancel
    report(capsys, 8, ok, f"max |mean - brute force| = {worst:.1e}; single-packet identity {single}; cancellation {cancel}")


def test_criterion_09_dp_statistics(capsys):
    sigma, C_ = 0.5, 1.0
    noise = gaussianize({"z": np.zeros(100_000)}, sigma, C_, np.random.default_rng(9))["z"]
    var_err = abs(noise.var() - (sigma * C_) ** 2) / (sigma * C_) ** 2
    rng = np.random.default_rng(10)
    max_norm = max(
        global_norm(clip_packet({"a": rng.normal(size=7) * rng.uniform(0, 100), "b": rng.normal(size=(2, 2))}, C_))
        for _ in range(2000)
    )
    exp = setup_experiment(desk_config("fedembed-type", 0, rounds=1))
    u = exp.users[0]
    p_off = client_round(u, exp.params, exp.spec, exp.clustering, DPConfig(), 0, exp.samples, exp.settings)
    unused = [j for j in range(10) if j != u.subpop]
    zero_off = all(not p_off.tensors["heads.W"][j].any() for j in unused)
    p_on = privatize(p_off, DPConfig(enabled=True, clip_norm=C_, noise_multiplier=sigma), np.random.default_rng(0))
    nonzero_on = all(np.all(p_on.tensors["heads.W"][j] != 0) for j in unused)
    ok = var_err < 0.02 and max_norm <= C_ + 1e-12 and zero_off and nonzero_on
    report(
        capsys, 9, ok,
        f"variance rel err {var_err:.4f} over 1e5 (need <0.02); max clipped norm {max_norm:.15f}; "
        f"unused heads zero without DP {zero_off}, nonzero with DP {nonzero_on}",
    )


def test_criterion_10_triplet_and_nearest_neighbour(capsys):
    rng = np.random.default_rng(10)
    exact = True
    for _ in range(1000):
        e_u, e_p, e_n = rng.normal(size=(3, 6))
        lr = float(rng.uniform(1e-4, 1.0))
        exact &= np.array_equal(triplet_update(e_u, e_p, e_n, 1.0, lr), e_u - lr * (2.0 * (e_n - e_p)))
        # from the origin the step itself is representable exactly
        exact &= np.array_equal(triplet_update(np.zeros(6), e_p, e_n, 1.0, lr), lr * (2.0 * (e_p - e_n)))
    proto_ok = som_ok = 0
    for _ in range(1000):
        n, d = int(rng.integers(2, 12)), int(rng.integers(1, 10))
        table, e = rng.normal(size=(n, d)), rng.normal(size=d)
        brute = min(range(n), key=lambda j: (math.fsum((table[j] - e) ** 2), j))
        proto_ok += prototype_assign(e, table) == brute
        som = make_som(n, d, 10, rng)
        sb = min(range(n), key=lambda j: (math.fsum((som.weights[j] - e) ** 2), j))
        som_ok += som_bmu(som, e) == sb
    ok = exact and proto_ok == 1000 and som_ok == 1000
    report(capsys, 10, ok, f"triplet step exact on 1000 draws: {exact}; prototype {proto_ok}/1000, SOM BMU {som_ok}/1000 agree with brute force")


def _som_purity(seed, rule):
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [6.0, 0.0], [3.0, 3.0 * math.sqrt(3)]])  # pairwise 6 sigma apart
    pts = np.concatenate([c + rng.normal(size=(30, 2)) for c in centers])
    labels = np.repeat(np.arange(3), 30)
    som = make_som(3, 2, 200, rng)
    lo, hi = pts.min(0), pts.max(0)
    som.weights = lo + som.weights * (hi - lo)
    for _ in range(200):
        som = som_server_round(som, (som_client_step(som, p) for p in pts), rule)
    return float(purity(som_bmu_many(som, pts), labels))


def test_criterion_11_som_purity(capsys):
    best = [_som_purity(s, "best") for s in range(5)]
    mean = [_som_purity(s, "mean") for s in range(5)]
    report(
        capsys, 11, min(best) >= 0.95,
        f"best-client purity per seed {[round(p, 3) for p in best]} (need >=0.95); "
        f"all-client mean rule for reference {[round(p, 3) for p in mean]}",
    )


def _tiny(method, dp):
    return C.from_dict({
        "method": method,
        "dataset": {"kind": "synthetic", "side": 8, "n_base_styles": 3, "num_styles": 3, "samples_per_style": 40},
        "population": {"K": 3, "users_per_subpop": 4},
        "model": {"embed_dim": 8, "feature_dim": 6},
        "training": {"rounds": 30, "eval_every": 10, "participation": 0.75},
        "clustering": {"remap_every": 5},
        "dp": {"enabled": dp},
        "seed": 12,
    })


def test_criterion_12_determinism(capsys):
    same = 0
    total = 0
    for method in C.METHOD_NAMES:
        for dp in (False, True):
            a = run_experiment(_tiny(method, dp)).to_json(include_timestamps=False)
            b = run_experiment(_tiny(method, dp)).to_json(include_timestamps=False)
            same += a == b
            total += 1
    cfg = desk_config("fedembed-prototype", 3, rounds=5)
    samples = load_samples(cfg)
    desk = run_experiment(cfg, samples=samples).to_json(False) == run_experiment(cfg, samples=samples).to_json(False)
    ok = same == total and desk
    report(capsys, 12, ok, f"{same}/{total} method x privacy configs byte-identical on re-run; desk-scale MNIST config identical {desk}")
