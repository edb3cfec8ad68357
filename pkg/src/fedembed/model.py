"""FedEmbed architecture: shared encoder, sub-population heads and two global heads.

The personal embedding conditions the network twice. It is written onto the
diagonal of a second input channel, and it is concatenated to the encoder
output before every head. Heads therefore see ``feature_dim + embed_dim``
inputs (64 + 28 = 92 for the MNIST conv encoder).

All functions work on a batch of samples that may belong to several users.
Each sample carries its own embedding row and head index, and gradients come
back summed per user block when ``groups`` is given.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .errors import ConfigurationError, UsageError

PRESETS = ("mnist-conv", "small-mlp", "synthetic-conv")


@dataclass(frozen=True)
class ArchConfig:
    preset: str = "small-mlp"
    num_heads: int = 10
    num_styles: int = 10
    embed_dim: int = 28
    image_side: int = 28
    feature_dim: int = 32
    relu: bool = True
    global_head: bool = True
    kway_head: bool = True
    seed: int = 0


def encoder_layers(cfg: ArchConfig):
    side = cfg.image_side
    act = [nn.ReLU()] if cfg.relu else []
    if cfg.preset == "mnist-conv":
        if side != 28:
            raise ConfigurationError("mnist-conv needs 28x28 images")
        return (
            [nn.Conv2d(2, 16, 3, stride=2, padding=1), nn.LayerNorm((16, 14, 14))]
            + act
            + [nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.LayerNorm((32, 7, 7))]
            + act
            + [nn.Conv2d(32, 64, 7, stride=1, padding=0), nn.LayerNorm((64, 1, 1))]
            + act
            + [nn.Flatten()]
        )
    if cfg.preset == "small-mlp":
        f = cfg.feature_dim
        return [nn.Flatten(), nn.Dense(2 * side * side, f), nn.LayerNorm((f,))] + act
    if cfg.preset == "synthetic-conv":
        # scaled-down analogue of the spectrogram encoder: conv, pool, norm, conv, norm, dense, norm
        shapes = nn.infer_shapes(
            [nn.Conv2d(2, 8, 3, stride=2), nn.AvgPool2d(2), nn.Conv2d(8, 16, 3, stride=2)],
            (2, side, side),
        )
        p1, c2 = shapes[2], shapes[3]
        flat = int(np.prod(c2))
        f = cfg.feature_dim
        return (
            [nn.Conv2d(2, 8, 3, stride=2), nn.AvgPool2d(2), nn.LayerNorm(p1)]
            + act
            + [nn.Conv2d(8, 16, 3, stride=2), nn.LayerNorm(c2)]
            + act
            + [nn.Flatten(), nn.Dense(flat, f), nn.LayerNorm((f,))]
            + act
        )
    raise ConfigurationError(f"unknown encoder preset {cfg.preset!r}; choose from {PRESETS}")


@dataclass
class HeadBank:
    """Stacked linear heads ``phi_0 .. phi_{H-1}``: ``W`` is (H, out, in), ``b`` is (H, out)."""

    W: np.ndarray
    b: np.ndarray

    def __len__(self):
        return self.W.shape[0]

    def head(self, k):
        """Head ``k`` as a one-layer :class:`~fedembed.nn.Network` (shares memory)."""
        layer = nn.Dense(self.W.shape[2], self.W.shape[1])
        return nn.Network((layer,), (self.W.shape[2],), [{"W": self.W[k], "b": self.b[k]}])


@dataclass
class ModelParams:
    encoder: nn.Network
    heads: HeadBank | None
    global_head: nn.Network | None
    kway_head: nn.Network | None
    embed_dim: int

    @property
    def feature_dim(self):
        return self.encoder.output_shape[0]

    @property
    def head_input_dim(self):
        return self.feature_dim + self.embed_dim

    @property
    def num_heads(self):
        return 0 if self.heads is None else len(self.heads)

    @property
    def subpop_heads(self):
        return [self.heads.head(k) for k in range(self.num_heads)]

    def tensors(self):
        out = dict(self.encoder.tensors("encoder."))
        if self.heads is not None:
            out["heads.W"] = self.heads.W
            out["heads.b"] = self.heads.b
        if self.global_head is not None:
            out.update(self.global_head.tensors("global."))
        if self.kway_head is not None:
            out.update(self.kway_head.tensors("kway."))
        return out

    def with_tensors(self, t):
        return ModelParams(
            self.encoder.with_tensors(t, "encoder."),
            HeadBank(t["heads.W"], t["heads.b"]) if self.heads is not None else None,
            None if self.global_head is None else self.global_head.with_tensors(t, "global."),
            None if self.kway_head is None else self.kway_head.with_tensors(t, "kway."),
            self.embed_dim,
        )

    def num_params(self):
        return sum(a.size for a in self.tensors().values())


def _linear_head(n_in, n_out, rng):
    return nn.build_network([nn.Dense(n_in, n_out)], (n_in,), rng)


def init_head_bank(num_heads, n_in, rng):
    s = 1.0 / np.sqrt(n_in)
    W = np.stack([rng.uniform(-s, s, size=(2, n_in)) for _ in range(num_heads)])
    return HeadBank(W, np.zeros((num_heads, 2)))


def build_model(cfg: ArchConfig, rng=None) -> ModelParams:
    if cfg.num_heads < 0:
        raise ConfigurationError("num_heads must be >= 0")
    if cfg.num_styles < 2:
        raise ConfigurationError("K (num_styles) must be >= 2")
    if cfg.embed_dim != cfg.image_side:
        raise ConfigurationError(
            f"embed_dim {cfg.embed_dim} must equal the image side {cfg.image_side} for diagonal concatenation"
        )
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    side = cfg.image_side
    encoder = nn.build_network(encoder_layers(cfg), (2, side, side), rng)
    out_shape = encoder.output_shape
    if len(out_shape) != 1:
        raise ConfigurationError(f"encoder must emit a vector, got shape {out_shape}")
    n_in = out_shape[0] + cfg.embed_dim
    heads = init_head_bank(cfg.num_heads, n_in, rng) if cfg.num_heads else None
    global_head = _linear_head(n_in, 2, rng) if cfg.global_head else None
    kway_head = _linear_head(n_in, cfg.num_styles, rng) if cfg.kway_head else None
    params = ModelParams(encoder, heads, global_head, kway_head, cfg.embed_dim)
    for net in (global_head, kway_head):
        if net is not None and net.input_shape != (params.head_input_dim,):
            raise ConfigurationError("head input does not equal feature_dim + embed_dim")
    return params


def embed_input(image, embedding):
    """Stack an image with ``diag(embedding)`` into a two-channel input.

    ``image`` is (H, W) or (N, H, W); ``embedding`` is (D,) or (N, D). Returns
    (N, 2, H, W), or (2, H, W) when both arguments are unbatched.
    """
    x = np.asarray(image, dtype=nn.DTYPE)
    e = np.asarray(embedding, dtype=nn.DTYPE)
    single = x.ndim == 2 and e.ndim == 1
    if x.ndim == 2:
        x = x[None]
    if e.ndim == 1:
        e = np.broadcast_to(e, (x.shape[0], e.shape[0]))
    h, w = x.shape[1], x.shape[2]
    if h != w or e.shape[1] != h:
        raise ConfigurationError(f"embedding length {e.shape[1]} must equal square image side {h}x{w}")
    out = np.zeros((x.shape[0], 2, h, w), dtype=nn.DTYPE)
    out[:, 0] = x
    idx = np.arange(h)
    out[:, 1, idx, idx] = e
    return out[0] if single else out


@dataclass
class ForwardBundle:
    feature: np.ndarray
    z: np.ndarray
    subpop_logits: np.ndarray
    global_logits: np.ndarray | None
    kway_logits: np.ndarray | None
    head_index: np.ndarray
    head_W: np.ndarray
    bank_size: int
    encoder_tape: nn.Tape
    params: ModelParams
    single: bool = False


def model_forward(params: ModelParams, embedding, inputs, head, bank: HeadBank | None = None) -> ForwardBundle:
    """Forward pass for one user or a batch of users.

    ``head`` is an int or one index per sample into ``bank`` (the server head
    bank unless a local bank is supplied).
    """
    x = np.asarray(inputs, dtype=nn.DTYPE)
    single = x.ndim == 2
    if single:
        x = x[None]
    n = x.shape[0]
    e = np.asarray(embedding, dtype=nn.DTYPE)
    if e.ndim == 1:
        e = np.broadcast_to(e, (n, e.shape[0]))
    if e.shape != (n, params.embed_dim):
        raise ConfigurationError(f"embedding shape {e.shape} does not match embed_dim {params.embed_dim}")
    bank = params.heads if bank is None else bank
    if bank is None:
        raise UsageError("model has no server heads; pass a local head bank")
    idx = np.broadcast_to(np.asarray(head, dtype=np.intp), (n,))
    if np.any(idx < 0) or np.any(idx >= len(bank)):
        raise UsageError(f"head index out of range for {len(bank)} heads")

    feat, tape = nn.forward(params.encoder, embed_input(x, e))
    z = np.concatenate([feat, e], axis=1)
    head_W = bank.W[idx]
    subpop = np.einsum("noi,ni->no", head_W, z) + bank.b[idx]
    glob = None if params.global_head is None else nn.forward(params.global_head, z)[0]
    kway = None if params.kway_head is None else nn.forward(params.kway_head, z)[0]
    return ForwardBundle(feat, z, subpop, glob, kway, np.array(idx), head_W, len(bank), tape, params, single)


@dataclass(frozen=True)
class LossWeights:
    subpop: float = 1.0
    kway: float = 1.0
    global_: float = 1.0


EMBED_SOURCES = ("global", "subpop", "global+subpop")


@dataclass
class ModelGrads:
    encoder: list
    head_W: np.ndarray
    head_b: np.ndarray
    head_index: np.ndarray
    global_head: dict | None
    kway_head: dict | None
    embedding: np.ndarray | None
    losses: dict = field(default_factory=dict)

    def dense_heads(self, num_heads):
        """Per-group gradients scattered into a full (G, H, ...) bank, zeros elsewhere."""
        g = self.head_W.shape[0]
        W = np.zeros((g, num_heads) + self.head_W.shape[1:])
        b = np.zeros((g, num_heads) + self.head_b.shape[1:])
        rows = np.arange(g)
        W[rows, self.head_index] = self.head_W
        b[rows, self.head_index] = self.head_b
        return W, b


def _group_sum(a, groups):
    return a.reshape((groups, -1) + a.shape[1:]).sum(axis=1)


def model_backward(
    params: ModelParams,
    bundle: ForwardBundle,
    labels,
    styles=None,
    weights: LossWeights = LossWeights(),
    embed_source="global",
    groups=None,
    want_embedding=True,
) -> ModelGrads:
    """Gradients of the FedEmbed losses for every parameter block and the embedding.

    * ``L_C`` through the assigned sub-population head updates that head and the encoder.
    * ``L_M`` through the k-way head updates the k-way head and the encoder.
    * ``L_C`` through the global head updates the global head only.
    * The embedding gradient follows ``embed_source``: ``global`` (default),
      ``subpop`` or ``global+subpop``. It sums the head-concat slice and the
      diagonal of the second input channel.

    With ``groups=None`` everything is summed over the batch, and the head
    gradient is returned as a full bank of shape (H, ...) with exact zeros for
    unused heads. With ``groups=G`` every block gains a leading G axis, and
    each group must use a single head.
    """
    if bundle.params is not params:
        raise UsageError("bundle was produced with different parameters")
    if embed_source not in EMBED_SOURCES:
        raise UsageError(f"embed_source must be one of {EMBED_SOURCES}")
    y = np.atleast_1d(np.asarray(labels))
    n = bundle.z.shape[0]
    g = 1 if groups is None else int(groups)
    if n % g:
        raise UsageError(f"batch of {n} cannot be split into {g} groups")
    F = bundle.feature.shape[1]
    losses = {}

    loss_c, d_sub = nn.cross_entropy(bundle.subpop_logits, y)
    d_sub = weights.subpop * d_sub
    losses["subpop"] = float(weights.subpop * loss_c.sum())
    dz_sub = np.einsum("no,noi->ni", d_sub, bundle.head_W)

    dz_enc = dz_sub[:, :F].copy()

    kway_grads = None
    if params.kway_head is not None and weights.kway != 0.0:
        if styles is None:
            raise UsageError("styles are required when the k-way loss is active")
        loss_m, d_k = nn.cross_entropy(bundle.kway_logits, np.atleast_1d(styles))
        d_k = weights.kway * d_k
        losses["kway"] = float(weights.kway * loss_m.sum())
        dz_k = d_k @ params.kway_head.params[0]["W"]
        dz_enc += dz_k[:, :F]
        kway_grads = _dense_grads(d_k, bundle.z, g)
    elif params.kway_head is not None:
        kway_grads = _zero_grads(params.kway_head, g)

    global_grads = None
    dz_glob = None
    if params.global_head is not None and weights.global_ != 0.0:
        loss_g, d_g = nn.cross_entropy(bundle.global_logits, y)
        d_g = weights.global_ * d_g
        losses["global"] = float(weights.global_ * loss_g.sum())
        dz_glob = d_g @ params.global_head.params[0]["W"]
        global_grads = _dense_grads(d_g, bundle.z, g)
    elif params.global_head is not None:
        global_grads = _zero_grads(params.global_head, g)

    enc_grads, _ = nn.backward(
        params.encoder, bundle.encoder_tape, dz_enc, groups=groups, need_input_grad=False
    )

    emb = None
    if want_embedding:
        dz_e = np.zeros_like(bundle.z)
        if embed_source in ("global", "global+subpop") and dz_glob is not None:
            dz_e += dz_glob
        if embed_source in ("subpop", "global+subpop"):
            dz_e += dz_sub
        _, dx = nn.backward(
            params.encoder, bundle.encoder_tape, dz_e[:, :F], groups=g, need_param_grads=False
        )
        diag = np.arange(params.embed_dim)
        per_sample = dz_e[:, F:] + dx[:, 1, diag, diag]
        emb = _group_sum(per_sample, g)

    sub_g = d_sub.reshape(g, -1, d_sub.shape[1])
    z_g = bundle.z.reshape(g, -1, bundle.z.shape[1])
    idx_g = bundle.head_index.reshape(g, -1)
    head_W = np.matmul(sub_g.transpose(0, 2, 1), z_g)
    head_b = sub_g.sum(axis=1)
    if groups is not None and np.any(idx_g != idx_g[:, :1]):
        raise UsageError("every group must use a single head")
    head_index = idx_g[:, 0].copy()

    grads = ModelGrads(enc_grads, head_W, head_b, head_index, global_grads, kway_grads, emb, losses)
    if groups is None:
        # full-batch mode: scatter per-sample head grads into the bank
        num = bundle.bank_size
        W = np.zeros((num,) + bundle.head_W.shape[1:])
        b = np.zeros((num, bundle.head_W.shape[1]))
        for h in np.unique(bundle.head_index):
            rows = bundle.head_index == h
            W[h] = np.matmul(d_sub[rows].T[None], bundle.z[rows][None])[0]
            b[h] = d_sub[rows].sum(axis=0)
        grads = replace(
            grads,
            head_W=W,
            head_b=b,
            head_index=np.unique(bundle.head_index),
            global_head=None if global_grads is None else {k: v[0] for k, v in global_grads.items()},
            kway_head=None if kway_grads is None else {k: v[0] for k, v in kway_grads.items()},
            embedding=None if emb is None else emb[0],
        )
    return grads


def _dense_grads(d, z, groups):
    dg = d.reshape(groups, -1, d.shape[1])
    zg = z.reshape(groups, -1, z.shape[1])
    return {"0.W": np.matmul(dg.transpose(0, 2, 1), zg), "0.b": dg.sum(axis=1)}


def _zero_grads(net, groups):
    return {f"0.{k}": np.zeros((groups,) + v.shape) for k, v in net.params[0].items()}


def grads_to_tensors(params: ModelParams, grads: ModelGrads, group=None):
    """Flatten a :class:`ModelGrads` into the same keys as :meth:`ModelParams.tensors`.

    ``group`` selects one user block from grouped gradients.
    """
    pick = (lambda a: a) if group is None else (lambda a: a[group])
    out = {}
    for i, p in enumerate(grads.encoder):
        for k in sorted(p):
            out[f"encoder.{i}.{k}"] = pick(p[k])
    if params.heads is None:
        pass
    elif group is None:
        out["heads.W"], out["heads.b"] = grads.head_W, grads.head_b
    else:
        W = np.zeros(params.heads.W.shape)
        b = np.zeros(params.heads.b.shape)
        W[grads.head_index[group]] = grads.head_W[group]
        b[grads.head_index[group]] = grads.head_b[group]
        out["heads.W"], out["heads.b"] = W, b
    for prefix, g in (("global.", grads.global_head), ("kway.", grads.kway_head)):
        if g is not None:
            for k, v in g.items():
                out[prefix + k] = pick(v)
    return out
