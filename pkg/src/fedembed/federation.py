"""Federated training rounds for FedEmbed and the baseline methods.

A round has three parts. Each active client picks a head, computes summed
gradients over its 20 train samples, updates its personal embedding (and
local head, where the method has one) and sends a possibly privatised
:class:`GradientPacket`. The server averages the packets and takes one
central Adam step. Finally the server updates the clustering state: one SOM
round, prototype moves, or a head remap at refit rounds.

Clients are simulated in batches. One grouped forward/backward pass
computes every active client's gradients at once, and the result is
identical to running the clients one at a time.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .clustering import (
    PrototypeSet,
    SOMap,
    make_som,
    match_overlap,
    overlap_matrix,
    prototype_assign,
    prototype_assign_many,
    som_bmu,
    som_bmu_many,
    som_client_step,
    som_server_round,
    triplet_update,
    update_prototypes,
)
from .data import (
    PopulationSpec,
    StyledDataset,
    UserDataset,
    build_population,
    find_mnist,
    gen_interpolated_dataset,
    load_mnist_idx,
)
from .errors import ConfigurationError, ExperimentError, NumericError, ProtocolError, UsageError
from .metrics import RunReport, cluster_confusion, evaluate_population, export_embeddings
from .model import (
    ArchConfig,
    HeadBank,
    LossWeights,
    ModelParams,
    build_model,
    grads_to_tensors,
    init_head_bank,
    model_backward,
    model_forward,
)
from .nn import AdamState, adam_init, adam_step
from .privacy import DPConfig, privatize, server_noise
from .seeding import rng_for

# ---------------------------------------------------------------------------
# methods


@dataclass(frozen=True)
class MethodSpec:
    """How one method uses the shared machinery.

    ``head_mode`` is ``shared`` (one server head), ``server`` (a bank of
    server heads picked by ``assignment``) or ``local`` (one private head
    per client, never transmitted).
    """

    name: str
    embeddings: bool
    head_mode: str
    assignment: str
    global_head: str = "none"
    kway: bool = False
    embed_source: str = "global"
    pfedme_lambda: float = 0.0

    @property
    def clustered(self):
        return self.assignment in ("som", "prototype", "gradient-som")


def method_behaviors(name, pfedme_lambda=0.1, embed_source="global") -> MethodSpec:
    table = {
        "global": MethodSpec("global", False, "shared", "fixed"),
        "global+": MethodSpec("global+", True, "shared", "fixed", embed_source="subpop"),
        "fedrep": MethodSpec("fedrep", False, "local", "local"),
        "pfedme": MethodSpec("pfedme", False, "local", "local", global_head="reference", pfedme_lambda=pfedme_lambda),
        "pfedkm": MethodSpec("pfedkm", False, "server", "gradient-som"),
    }
    for name_, assign in (
        ("fedembed-som", "som"),
        ("fedembed-personal", "personal"),
        ("fedembed-prototype", "prototype"),
        ("fedembed-type", "type"),
    ):
        table[name_] = MethodSpec(name_, True, "server", assign, "task", True, embed_source)
    if name not in table:
        raise ConfigurationError(f"unknown method {name!r}; choose from {', '.join(cfgmod.METHOD_NAMES)}")
    spec = table[name]
    if spec.name == "pfedme" and not pfedme_lambda > 0:
        raise ConfigurationError("PFedMe needs lambda > 0")
    return spec


def server_head_count(spec: MethodSpec, K, num_users, som_nodes=None):
    if spec.head_mode == "shared":
        return 1
    if spec.head_mode == "local":
        return 0
    if spec.assignment in ("som", "gradient-som"):
        return som_nodes or K
    if spec.assignment == "personal":
        return num_users
    return K


# ---------------------------------------------------------------------------
# wire format and client state


@dataclass
class GradientPacket:
    """What one client sends the server in one round.

    ``tensors`` uses the keys of :meth:`ModelParams.tensors`. There is no
    user id, sub-population or embedding field; ``packet_id`` is a per-round
    random label.
    """

    tensors: dict
    round_index: int
    packet_id: int

    def to_wire(self):
        """JSON-compatible form, used by the privacy audit."""
        return {
            "round_index": self.round_index,
            "packet_id": self.packet_id,
            "tensors": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in sorted(self.tensors.items())},
        }


@dataclass
class UserState:
    user_id: int
    subpop: int
    data: UserDataset
    embedding: np.ndarray
    embed_opt: AdamState
    positive_style: int
    head: int = 0
    local_head: dict | None = None
    head_opt: AdamState | None = None
    cluster_vector: np.ndarray | None = None
    refit_node: int = -1


@dataclass
class ClusteringState:
    som: SOMap | None = None
    prototypes: PrototypeSet | None = None


@dataclass(frozen=True)
class ClientSettings:
    seed: int = 0
    local_lr: float = 1e-3
    kway_weight: float = 1.0
    triplet_lr: float = 0.01


@dataclass
class ClientMessage:
    """A client's round output: the packet plus clustering side information."""

    packet: GradientPacket
    som_vector: np.ndarray | None = None
    prototype: tuple | None = None


def positive_style(data: UserDataset, styles):
    pos = styles[data.train_idx[data.train_y == 1]]
    return int(np.bincount(pos).argmax())


def init_user(record, samples: StyledDataset, spec: MethodSpec, embed_dim, head_input_dim, seed, local_lr):
    if spec.embeddings:
        emb = rng_for(seed, "embedding", record.user_id).uniform(0.0, 1.0, size=embed_dim)
    else:
        emb = np.zeros(embed_dim)
    user = UserState(
        user_id=record.user_id,
        subpop=record.subpop,
        data=record.data,
        embedding=emb,
        embed_opt=adam_init({"e": emb}, lr=local_lr),
        positive_style=positive_style(record.data, samples.styles),
    )
    if spec.head_mode == "local":
        bank = init_head_bank(1, head_input_dim, rng_for(seed, "local-head", record.user_id))
        user.local_head = {"W": bank.W[0], "b": bank.b[0]}
        user.head_opt = adam_init(user.local_head, lr=local_lr)
    return user


# ---------------------------------------------------------------------------
# client update


def _select_head(user: UserState, spec: MethodSpec, clustering: ClusteringState, settings, round_index):
    a = spec.assignment
    if a == "prototype":
        protos = clustering.prototypes.prototypes
        K = len(protos)
        rng = rng_for(settings.seed, "triplet", user.user_id, round_index)
        others = [j for j in range(K) if j != user.positive_style]
        neg = others[int(rng.integers(len(others)))]
        user.embedding = triplet_update(
            user.embedding, protos[user.positive_style], protos[neg], clustering.prototypes.margin, settings.triplet_lr
        )
        return prototype_assign(user.embedding, clustering.prototypes)
    if a == "som":
        return som_bmu(clustering.som, user.embedding)
    if a == "gradient-som":
        return 0 if user.cluster_vector is None else som_bmu(clustering.som, user.cluster_vector)
    if a == "type":
        return user.subpop
    if a == "personal":
        return user.user_id
    return 0


def _check_clustering(spec: MethodSpec, clustering: ClusteringState | None):
    needs = {"prototype": "prototypes", "som": "som", "gradient-som": "som"}.get(spec.assignment)
    if needs and (clustering is None or getattr(clustering, needs) is None):
        raise ConfigurationError(f"method {spec.name} needs clustering state ({needs}) but none was given")


def client_round_batch(
    users,
    params: ModelParams,
    spec: MethodSpec,
    clustering: ClusteringState | None,
    dp: DPConfig,
    round_index,
    samples: StyledDataset,
    settings: ClientSettings = ClientSettings(),
    packet_ids=None,
):
    """Run the client update for several users in one grouped pass.

    Mutates each user's embedding, optimiser state, head choice and local
    head. Returns one :class:`ClientMessage` per user, in input order.
    """
    _check_clustering(spec, clustering)
    if not users:
        return []
    A = len(users)
    sizes = {len(u.data.train_idx) for u in users}
    if len(sizes) != 1:
        raise UsageError("batched clients must hold the same number of train samples")
    n = sizes.pop()

    assigned_vec = []
    for u in users:
        u.head = _select_head(u, spec, clustering, settings, round_index)
        assigned_vec.append(u.embedding.copy() if spec.assignment == "som" else u.cluster_vector)

    idx = np.concatenate([u.data.train_idx for u in users])
    labels = np.concatenate([u.data.train_y for u in users])
    styles = samples.styles[idx]
    emb = np.repeat(np.stack([u.embedding for u in users]), n, axis=0)
    if spec.head_mode == "local":
        bank = HeadBank(np.stack([u.local_head["W"] for u in users]), np.stack([u.local_head["b"] for u in users]))
        hidx = np.repeat(np.arange(A), n)
    else:
        bank = None
        hidx = np.repeat([u.head for u in users], n)

    bundle = model_forward(params, emb, samples.images[idx], hidx, bank)
    weights = LossWeights(
        subpop=1.0,
        kway=settings.kway_weight if spec.kway else 0.0,
        global_=1.0 if spec.global_head == "task" else 0.0,
    )
    grads = model_backward(
        params,
        bundle,
        labels,
        styles if spec.kway else None,
        weights,
        embed_source=spec.embed_source,
        groups=A,
        want_embedding=spec.embeddings,
    )

    out = []
    for g, u in enumerate(users):
        tensors = grads_to_tensors(params, grads, group=g)
        if spec.head_mode == "local":
            gW, gb = grads.head_W[g], grads.head_b[g]
            if spec.global_head == "reference":
                lam = spec.pfedme_lambda
                ref = params.global_head.params[0]
                gW = gW + lam * (u.local_head["W"] - ref["W"])
                gb = gb + lam * (u.local_head["b"] - ref["b"])
                tensors["global.0.W"] = lam * (ref["W"] - u.local_head["W"])
                tensors["global.0.b"] = lam * (ref["b"] - u.local_head["b"])
            u.local_head, u.head_opt = adam_step(u.head_opt, u.local_head, {"W": gW, "b": gb})
        proto = None
        if spec.embeddings:
            if spec.assignment == "prototype":
                proto = (u.head, grads.embedding[g].copy())
            new, u.embed_opt = adam_step(u.embed_opt, {"e": u.embedding}, {"e": grads.embedding[g]})
            u.embedding = new["e"]
        som_vector = assigned_vec[g]
        if spec.assignment == "gradient-som":
            u.cluster_vector = np.concatenate([tensors[k].ravel() for k in sorted(tensors)])
        pid = g if packet_ids is None else int(packet_ids[g])
        packet = GradientPacket(tensors, round_index, pid)
        packet = privatize(packet, dp, rng_for(settings.seed, "dp", u.user_id, round_index))
        out.append(ClientMessage(packet, som_vector, proto))
    return out


def client_round(user, params, method, clustering, dp, round_index, samples, settings=ClientSettings()):
    """Single-client form of :func:`client_round_batch`; returns the packet."""
    spec = method if isinstance(method, MethodSpec) else method_behaviors(method)
    return client_round_batch([user], params, spec, clustering, dp, round_index, samples, settings)[0].packet


# ---------------------------------------------------------------------------
# server


def _tensors(p):
    return p.tensors if isinstance(p, GradientPacket) else p


def server_aggregate(packets):
    """Elementwise mean of every tensor over all packets (summed in order)."""
    packets = list(packets)
    if not packets:
        raise ProtocolError("server_aggregate needs at least one packet")
    first = _tensors(packets[0])
    total = {k: np.array(v, dtype=np.float64, copy=True) for k, v in first.items()}
    for i, p in enumerate(packets[1:], start=1):
        t = _tensors(p)
        if set(t) != set(total):
            raise ProtocolError(f"packet {i} carries tensors {sorted(set(t) ^ set(total))} that others do not")
        for k, v in t.items():
            if v.shape != total[k].shape:
                raise ProtocolError(f"packet {i} tensor {k} has shape {v.shape}, expected {total[k].shape}")
            total[k] += v
    n = len(packets)
    return {k: v / n for k, v in total.items()}


def server_apply(opt: AdamState, params: ModelParams, averaged):
    current = params.tensors()
    if set(averaged) != set(current):
        raise ProtocolError(f"update names {sorted(set(averaged) ^ set(current))} do not match the model")
    new, opt = adam_step(opt, current, averaged)
    return params.with_tensors(new), opt


def remap_head_state(params: ModelParams, opt: AdamState, mapping, fresh: HeadBank):
    """Permute server heads and their Adam moments by ``mapping`` (new -> old, or -1)."""
    hit = mapping >= 0
    src = mapping[hit]

    def move(arr, fill):
        out = fill.copy()
        out[hit] = arr[src]
        return out

    heads = HeadBank(move(params.heads.W, fresh.W), move(params.heads.b, fresh.b))
    m, v = dict(opt.m), dict(opt.v)
    for key in ("heads.W", "heads.b"):
        m[key] = move(opt.m[key], np.zeros_like(opt.m[key]))
        v[key] = move(opt.v[key], np.zeros_like(opt.v[key]))
    return replace(params, heads=heads), replace(opt, m=m, v=v)


# ---------------------------------------------------------------------------
# experiment


@dataclass
class Experiment:
    config: cfgmod.ExperimentConfig
    spec: MethodSpec
    samples: StyledDataset
    users: list
    params: ModelParams
    opt: AdamState
    clustering: ClusteringState
    settings: ClientSettings
    round: int = 0
    history: list = field(default_factory=list)
    packets_sent: int = 0


def load_samples(cfg: cfgmod.ExperimentConfig) -> StyledDataset:
    d = cfg.dataset
    if d.kind == "synthetic":
        return gen_interpolated_dataset(d.n_base_styles, d.num_styles, d.samples_per_style, d.noise_scale, cfg.seed, d.side)
    images, labels = find_mnist(d.path)
    return load_mnist_idx(images, labels)


def setup_experiment(cfg: cfgmod.ExperimentConfig, samples: StyledDataset | None = None) -> Experiment:
    spec = method_behaviors(cfg.method.name, cfg.method.pfedme_lambda, cfg.training.embed_source)
    if samples is None:
        samples = load_samples(cfg)
    pop = cfg.population
    if samples.num_styles < pop.K:
        raise ConfigurationError(f"dataset has {samples.num_styles} styles but K={pop.K}")
    records = build_population(
        samples, PopulationSpec(pop.K, pop.proportions, pop.total_users, pop.train_per_user, pop.test_per_user, cfg.seed)
    )
    side = samples.images.shape[1]
    n_heads = server_head_count(spec, pop.K, len(records), cfg.clustering.som_nodes)
    arch = ArchConfig(
        preset=cfg.model.preset,
        num_heads=n_heads,
        num_styles=samples.num_styles,
        embed_dim=cfg.model.embed_dim,
        image_side=side,
        feature_dim=cfg.model.feature_dim,
        relu=cfg.model.relu,
        global_head=spec.global_head != "none",
        kway_head=spec.kway,
    )
    params = build_model(arch, rng_for(cfg.seed, "model-init"))
    opt = adam_init(params.tensors(), lr=cfg.training.central_lr)
    users = [
        init_user(r, samples, spec, cfg.model.embed_dim, params.head_input_dim, cfg.seed, cfg.training.local_lr)
        for r in records
    ]
    clustering = ClusteringState()
    c = cfg.clustering
    if spec.assignment == "som":
        clustering.som = make_som(
            n_heads, cfg.model.embed_dim, cfg.training.rounds, rng_for(cfg.seed, "som"),
            shape=c.som_grid, lr0=c.som_lr0, broadcast=c.som_broadcast,
        )
        bmus = som_bmu_many(clustering.som, np.stack([u.embedding for u in users]))
        for u, b in zip(users, bmus):
            u.refit_node = int(b)
    elif spec.assignment == "gradient-som":
        clustering.som = make_som(
            n_heads, params.num_params(), cfg.training.rounds, rng_for(cfg.seed, "som"),
            shape=c.som_grid, lr0=c.som_lr0, init="normal", init_scale=1e-3, broadcast=c.som_broadcast,
        )
    elif spec.assignment == "prototype":
        protos = rng_for(cfg.seed, "prototypes").uniform(0.0, 1.0, size=(pop.K, cfg.model.embed_dim))
        clustering.prototypes = PrototypeSet(protos, c.margin)
    settings = ClientSettings(cfg.seed, cfg.training.local_lr, cfg.training.kway_weight, c.triplet_lr)
    return Experiment(cfg, spec, samples, users, params, opt, clustering, settings)


def current_assignments(exp: Experiment):
    """Head index each user would use right now (no triplet step)."""
    a = exp.spec.assignment
    emb = np.stack([u.embedding for u in exp.users])
    if a == "prototype":
        return prototype_assign_many(emb, exp.clustering.prototypes)
    if a == "som":
        return som_bmu_many(exp.clustering.som, emb)
    if a == "gradient-som":
        return np.array([u.head for u in exp.users])
    if a == "type":
        return np.array([u.subpop for u in exp.users])
    if a in ("personal", "local"):
        return np.arange(len(exp.users))
    return np.zeros(len(exp.users), dtype=np.int64)


def _local_bank(exp):
    if exp.spec.head_mode != "local":
        return None
    return HeadBank(np.stack([u.local_head["W"] for u in exp.users]), np.stack([u.local_head["b"] for u in exp.users]))


def evaluate(exp: Experiment):
    heads = current_assignments(exp)
    scores = evaluate_population(exp.users, exp.params, exp.samples, heads, _local_bank(exp))
    return scores, heads


def _history_entry(exp, scores):
    return {"round": exp.round, **scores.to_dict()}


def active_users(exp: Experiment, round_index):
    U = len(exp.users)
    frac = exp.config.training.participation
    if frac >= 1.0:
        return np.arange(U)
    k = max(1, int(round(frac * U)))
    return np.sort(rng_for(exp.config.seed, "sampling", round_index).choice(U, size=k, replace=False))


def _run_clients(exp, users, r, packet_ids, parallel):
    args = (exp.params, exp.spec, exp.clustering, exp.config.dp, r, exp.samples, exp.settings)
    if parallel <= 1 or len(users) < 2:
        return client_round_batch(users, *args, packet_ids=packet_ids)
    chunks = np.array_split(np.arange(len(users)), min(parallel, len(users)))
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        futures = [
            pool.submit(client_round_batch, [users[i] for i in c], *args, packet_ids=packet_ids[c]) for c in chunks
        ]
        return [m for f in futures for m in f.result()]


def _remap(exp: Experiment, r):
    som = exp.clustering.som
    old = np.array([u.refit_node for u in exp.users])
    new = som_bmu_many(som, np.stack([u.embedding for u in exp.users]))
    n = som.num_nodes
    mapping = match_overlap(overlap_matrix(old, new, n, n))
    fresh = init_head_bank(n, exp.params.head_input_dim, rng_for(exp.config.seed, "fresh-head", r))
    exp.params, exp.opt = remap_head_state(exp.params, exp.opt, mapping, fresh)
    for u, b in zip(exp.users, new):
        u.refit_node = int(b)


def run_round(exp: Experiment, parallel=1):
    r = exp.round
    phase = "client"
    try:
        active = active_users(exp, r)
        ids = rng_for(exp.config.seed, "packet-id", r).permutation(len(active))
        messages = _run_clients(exp, [exp.users[i] for i in active], r, ids, parallel)
        exp.packets_sent += len(messages)
        phase = "aggregate"
        mean = server_aggregate(m.packet for m in messages)
        mean = server_noise(mean, exp.config.dp, len(messages), rng_for(exp.config.seed, "server-dp", r))
        phase = "apply"
        exp.params, exp.opt = server_apply(exp.opt, exp.params, mean)
        for k, v in exp.params.tensors().items():
            if not np.all(np.isfinite(v)):
                raise NumericError(f"parameter {k} became non-finite")
        phase = "clustering"
        cs, c = exp.clustering, exp.config.clustering
        if exp.spec.assignment in ("som", "gradient-som"):
            vectors = [m.som_vector for m in messages if m.som_vector is not None]
            if vectors:
                reports = (som_client_step(cs.som, v) for v in vectors)
                cs.som = som_server_round(cs.som, reports, c.som_rule)
            if exp.spec.assignment == "som" and (r + 1) % c.remap_every == 0:
                _remap(exp, r)
        elif exp.spec.assignment == "prototype":
            assigned = np.array([m.prototype[0] for m in messages])
            grads = np.stack([m.prototype[1] for m in messages])
            cs.prototypes = update_prototypes(cs.prototypes, assigned, grads, exp.config.training.local_lr)
    except ConfigurationError as exc:
        raise ConfigurationError(f"[round {r}, phase {phase!r}] {exc}") from exc
    except ExperimentError:
        raise
    except Exception as exc:
        raise ExperimentError(f"{type(exc).__name__}: {exc}", r, phase) from exc
    exp.round = r + 1


def _evaluate_into(exp):
    try:
        scores, heads = evaluate(exp)
    except Exception as exc:
        raise ExperimentError(f"{type(exc).__name__}: {exc}", exp.round, "evaluate") from exc
    exp.history.append(_history_entry(exp, scores))
    return scores, heads


def build_report(exp: Experiment, scores, heads, artifacts=None, timestamps=None) -> RunReport:
    K = exp.config.population.K
    n_clusters = max(int(np.max(heads)) + 1, K) if len(heads) else K
    conf = cluster_confusion([u.subpop for u in exp.users], heads, K, n_clusters)
    dp = exp.config.dp
    privacy = {
        "enabled": dp.enabled,
        "clip_norm": dp.clip_norm,
        "noise_multiplier": dp.noise_multiplier,
        "site": dp.site,
        "noise_std": dp.noise_multiplier * dp.clip_norm if dp.enabled else 0.0,
        "packets": exp.packets_sent,
        "embeddings_noised": False,
    }
    final = {
        **scores.to_dict(),
        "rounds": exp.round,
        "confusion": conf.tolist(),
        "assignments": [int(h) for h in heads],
        "num_params": exp.params.num_params(),
    }
    echo = cfgmod.to_dict(exp.config)
    echo.pop("output_dir")
    return RunReport(
        config=echo,
        seed=exp.config.seed,
        history=list(exp.history),
        final=final,
        privacy=privacy,
        artifacts=artifacts or {},
        timestamps=timestamps,
    )


def run_experiment(
    config: cfgmod.ExperimentConfig,
    out_dir=None,
    parallel_clients=1,
    samples=None,
    checkpoint_every=None,
    resume=None,
    progress=None,
) -> RunReport:
    """Run every round of ``config`` and return the report.

    With ``out_dir`` the report, the embedding CSV and (optionally)
    checkpoints are written there. ``resume`` is a checkpoint path to
    continue from.
    """
    started = time.time()
    try:
        exp = setup_experiment(config, samples)
        if resume is not None:
            load_checkpoint(exp, resume)
    except ConfigurationError:
        raise
    except Exception as exc:
        raise ExperimentError(f"{type(exc).__name__}: {exc}", None, "setup") from exc
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    T = config.training.rounds
    every = config.training.eval_every
    if exp.round == 0 and not exp.history:
        scores, heads = _evaluate_into(exp)
    while exp.round < T:
        run_round(exp, parallel_clients)
        if exp.round % every == 0 or exp.round == T:
            scores, heads = _evaluate_into(exp)
            if progress is not None:
                progress(exp.history[-1])
        if out is not None and checkpoint_every and exp.round % checkpoint_every == 0:
            save_checkpoint(exp, out / f"checkpoint-{exp.round:06d}.npz")
    if exp.history and exp.history[-1]["round"] != exp.round or not exp.history:
        scores, heads = _evaluate_into(exp)
    else:
        scores, heads = evaluate(exp)
    artifacts = {}
    if out is not None:
        export_embeddings(exp.users, heads, out / "embeddings.csv")
        artifacts["embeddings"] = "embeddings.csv"
    finished = time.time()
    stamps = {"started": started, "finished": finished, "seconds": finished - started, "output_dir": None if out is None else str(out)}
    report = build_report(exp, scores, heads, artifacts, stamps)
    if out is not None:
        report.write(out / "report.json")
    report.experiment = exp
    return report


# ---------------------------------------------------------------------------
# centralised reference


def centralized_train(params: ModelParams, user: UserState, samples, spec: MethodSpec, steps, central_lr, kway_weight=1.0):
    """Plain full-batch training of one user's data with no federation code.

    The model is updated by Adam at ``central_lr`` on the summed gradient;
    the embedding by its own Adam state. Returns the parameter trajectory
    (one tensor dict per step) and the final embedding.
    """
    opt = adam_init(params.tensors(), lr=central_lr)
    eopt = adam_init({"e": user.embedding}, lr=user.embed_opt.lr)
    e = user.embedding.copy()
    x = samples.images[user.data.train_idx]
    y = user.data.train_y
    m = samples.styles[user.data.train_idx]
    weights = LossWeights(1.0, kway_weight if spec.kway else 0.0, 1.0 if spec.global_head == "task" else 0.0)
    trajectory = []
    for _ in range(steps):
        head = user.subpop if spec.assignment == "type" else 0
        bundle = model_forward(params, e, x, head)
        grads = model_backward(params, bundle, y, m if spec.kway else None, weights, spec.embed_source, None, spec.embeddings)
        new, opt = adam_step(opt, params.tensors(), grads_to_tensors(params, grads))
        params = params.with_tensors(new)
        if spec.embeddings:
            upd, eopt = adam_step(eopt, {"e": e}, {"e": grads.embedding})
            e = upd["e"]
        trajectory.append(params.tensors())
    return trajectory, e


# ---------------------------------------------------------------------------
# checkpoints


def _adam_arrays(prefix, opt: AdamState, out):
    for k in opt.m:
        out[f"{prefix}m/{k}"] = opt.m[k]
        out[f"{prefix}v/{k}"] = opt.v[k]
    out[f"{prefix}step"] = np.array(opt.step)


def _adam_from(prefix, arrays, like: AdamState):
    return replace(
        like,
        m={k: arrays[f"{prefix}m/{k}"] for k in like.m},
        v={k: arrays[f"{prefix}v/{k}"] for k in like.v},
        step=int(arrays[f"{prefix}step"]),
    )


def _comparable(cfg):
    d = cfgmod.to_dict(cfg)
    d["training"].pop("rounds")
    d.pop("output_dir", None)
    return d


CHECKPOINT_FORMAT = 1


def save_checkpoint(exp: Experiment, path):
    """Write the full simulation state.

    Random streams are derived from (seed, name, round, user), so no
    generator cursor has to be stored.
    """
    a = {}
    for k, v in exp.params.tensors().items():
        a[f"params/{k}"] = v
    _adam_arrays("opt/", exp.opt, a)
    for u in exp.users:
        p = f"user/{u.user_id}/"
        a[p + "embedding"] = u.embedding
        a[p + "head"] = np.array(u.head)
        a[p + "refit"] = np.array(u.refit_node)
        _adam_arrays(p + "eopt/", u.embed_opt, a)
        if u.local_head is not None:
            a[p + "local/W"], a[p + "local/b"] = u.local_head["W"], u.local_head["b"]
            _adam_arrays(p + "hopt/", u.head_opt, a)
        if u.cluster_vector is not None:
            a[p + "cluster_vector"] = u.cluster_vector
    if exp.clustering.som is not None:
        a["som/weights"] = exp.clustering.som.weights
        a["som/iteration"] = np.array(exp.clustering.som.iteration)
    if exp.clustering.prototypes is not None:
        a["prototypes"] = exp.clustering.prototypes.prototypes
    meta = {
        "format": CHECKPOINT_FORMAT,
        "round": exp.round,
        "history": exp.history,
        "packets_sent": exp.packets_sent,
        "config": _comparable(exp.config),
    }
    a["meta"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez_compressed(tmp, **a)
    tmp.replace(path)
    return path


def load_checkpoint(exp: Experiment, path):
    with np.load(path, allow_pickle=False) as z:
        a = {k: z[k] for k in z.files}
    meta = json.loads(str(a["meta"]))
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"checkpoint {path} has format {meta.get('format')}, expected {CHECKPOINT_FORMAT}")
    if meta["config"] != _comparable(exp.config):
        raise ConfigurationError(f"checkpoint {path} was written by a different configuration")
    exp.params = exp.params.with_tensors({k: a[f"params/{k}"] for k in exp.params.tensors()})
    exp.opt = _adam_from("opt/", a, exp.opt)
    for u in exp.users:
        p = f"user/{u.user_id}/"
        u.embedding = a[p + "embedding"]
        u.head = int(a[p + "head"])
        u.refit_node = int(a[p + "refit"])
        u.embed_opt = _adam_from(p + "eopt/", a, u.embed_opt)
        if u.local_head is not None:
            u.local_head = {"W": a[p + "local/W"], "b": a[p + "local/b"]}
            u.head_opt = _adam_from(p + "hopt/", a, u.head_opt)
        u.cluster_vector = a.get(p + "cluster_vector")
    if exp.clustering.som is not None:
        exp.clustering.som = replace(exp.clustering.som, weights=a["som/weights"], iteration=int(a["som/iteration"]))
    if exp.clustering.prototypes is not None:
        exp.clustering.prototypes = replace(exp.clustering.prototypes, prototypes=a["prototypes"])
    exp.round = meta["round"]
    exp.history = meta["history"]
    exp.packets_sent = meta["packets_sent"]
    return exp
