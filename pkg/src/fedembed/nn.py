"""Small numpy neural-network kernel.

Six layer kinds (dense, conv2d, avgpool2d, layernorm, relu, flatten), a
softmax cross-entropy loss and Adam. Tensors are plain float64 ndarrays with a
leading batch axis.

``backward`` can return parameter gradients summed per *group* of
consecutive samples instead of over the whole batch. The federation code uses
this to get one gradient per client out of a single batched pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod, sqrt
from typing import ClassVar, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, NumericError, UsageError

DTYPE = np.float64


def check_finite(name, array):
    if not np.all(np.isfinite(array)):
        raise NumericError(f"{name} contains NaN or Inf")
    return array


def _pair(v):
    if isinstance(v, int):
        return (v, v)
    return tuple(int(a) for a in v)


def _grouped(a, groups):
    return a.reshape((groups, -1) + a.shape[1:])


# ---------------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    kind: ClassVar[str] = "dense"

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ValueError(f"dense expects ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def init(self, rng):
        s = 1.0 / sqrt(self.in_features)
        return {
            "W": rng.uniform(-s, s, size=(self.out_features, self.in_features)),
            "b": np.zeros(self.out_features, dtype=DTYPE),
        }

    def forward(self, p, x):
        return x @ p["W"].T + p["b"], x

    def backward(self, p, x, dy, groups, need_params):
        grads = None
        if need_params:
            dyg, xg = _grouped(dy, groups), _grouped(x, groups)
            grads = {
                "W": np.matmul(dyg.transpose(0, 2, 1), xg),
                "b": dyg.sum(axis=1),
            }
        return grads, dy @ p["W"]


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int | tuple = 3
    stride: int | tuple = 1
    padding: int | tuple = 0
    kind: ClassVar[str] = "conv2d"

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ValueError(f"conv2d expects ({self.in_channels}, H, W), got {tuple(in_shape)}")
        (kh, kw), (sh, sw), (ph, pw) = _pair(self.kernel), _pair(self.stride), _pair(self.padding)
        ho = (in_shape[1] + 2 * ph - kh) // sh + 1
        wo = (in_shape[2] + 2 * pw - kw) // sw + 1
        if ho <= 0 or wo <= 0:
            raise ValueError(f"conv2d output would be {ho}x{wo}")
        return (self.out_channels, ho, wo)

    def init(self, rng):
        kh, kw = _pair(self.kernel)
        s = 1.0 / sqrt(self.in_channels * kh * kw)
        return {
            "W": rng.uniform(-s, s, size=(self.out_channels, self.in_channels, kh, kw)),
            "b": np.zeros(self.out_channels, dtype=DTYPE),
        }

    def _cols(self, x):
        (kh, kw), (sh, sw), (ph, pw) = _pair(self.kernel), _pair(self.stride), _pair(self.padding)
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        n, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * kh * kw)
        return cols, (ho, wo)

    def forward(self, p, x):
        cols, (ho, wo) = self._cols(x)
        w = p["W"].reshape(self.out_channels, -1)
        y = cols @ w.T + p["b"]
        y = y.reshape(x.shape[0], ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        return y, (x.shape, cols)

    def backward(self, p, cache, dy, groups, need_params):
        x_shape, cols = cache
        n, o, ho, wo = dy.shape
        d = dy.transpose(0, 2, 3, 1).reshape(n, ho * wo, o)
        grads = None
        if need_params:
            dg = d.reshape(groups, -1, o)
            cg = cols.reshape(groups, -1, cols.shape[-1])
            grads = {
                "W": np.matmul(dg.transpose(0, 2, 1), cg).reshape((groups,) + p["W"].shape),
                "b": dg.sum(axis=1),
            }
        (kh, kw), (sh, sw), (ph, pw) = _pair(self.kernel), _pair(self.stride), _pair(self.padding)
        c = self.in_channels
        dcols = (d @ p["W"].reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
        h, w = x_shape[2], x_shape[3]
        dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        return grads, dxp[:, :, ph : ph + h, pw : pw + w]


@dataclass(frozen=True)
class AvgPool2d:
    size: int | tuple = 2
    stride: int | tuple | None = None
    kind: ClassVar[str] = "avgpool2d"

    def _geometry(self):
        k = _pair(self.size)
        s = _pair(self.stride) if self.stride is not None else k
        return k, s

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ValueError(f"avgpool2d expects (C, H, W), got {tuple(in_shape)}")
        (kh, kw), (sh, sw) = self._geometry()
        ho = (in_shape[1] - kh) // sh + 1
        wo = (in_shape[2] - kw) // sw + 1
        if ho <= 0 or wo <= 0:
            raise ValueError(f"avgpool2d output would be {ho}x{wo}")
        return (in_shape[0], ho, wo)

    def init(self, rng):
        return {}

    def forward(self, p, x):
        (kh, kw), (sh, sw) = self._geometry()
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        return win.mean(axis=(-2, -1)), x.shape

    def backward(self, p, x_shape, dy, groups, need_params):
        (kh, kw), (sh, sw) = self._geometry()
        ho, wo = dy.shape[2], dy.shape[3]
        dx = np.zeros(x_shape, dtype=DTYPE)
        share = dy / (kh * kw)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += share
        return ({} if need_params else None), dx


@dataclass(frozen=True)
class LayerNorm:
    shape: tuple
    eps: float = 1e-5
    kind: ClassVar[str] = "layernorm"

    def output_shape(self, in_shape):
        n = len(self.shape)
        if tuple(in_shape[-n:]) != tuple(self.shape):
            raise ValueError(f"layernorm over {tuple(self.shape)} got input {tuple(in_shape)}")
        return tuple(in_shape)

    def init(self, rng):
        return {
            "gamma": np.ones(self.shape, dtype=DTYPE),
            "beta": np.zeros(self.shape, dtype=DTYPE),
        }

    def _axes(self, ndim):
        return tuple(range(ndim - len(self.shape), ndim))

    def forward(self, p, x):
        axes = self._axes(x.ndim)
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        return xhat * p["gamma"] + p["beta"], (xhat, inv)

    def backward(self, p, cache, dy, groups, need_params):
        xhat, inv = cache
        axes = self._axes(dy.ndim)
        n = prod(self.shape)
        grads = None
        if need_params:
            # sum over every non-normalized axis inside each group
            lead = tuple(range(1, dy.ndim - len(self.shape) + 1))
            grads = {
                "gamma": _grouped(dy * xhat, groups).sum(axis=lead),
                "beta": _grouped(dy, groups).sum(axis=lead),
            }
        dxhat = dy * p["gamma"]
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        dx = (inv / n) * (n * dxhat - s1 - xhat * s2)
        return grads, dx


@dataclass(frozen=True)
class ReLU:
    kind: ClassVar[str] = "relu"

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def init(self, rng):
        return {}

    def forward(self, p, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, p, mask, dy, groups, need_params):
        return ({} if need_params else None), dy * mask


@dataclass(frozen=True)
class Flatten:
    kind: ClassVar[str] = "flatten"

    def output_shape(self, in_shape):
        return (prod(in_shape),)

    def init(self, rng):
        return {}

    def forward(self, p, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, p, x_shape, dy, groups, need_params):
        return ({} if need_params else None), dy.reshape(x_shape)


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2d, AvgPool2d, LayerNorm, ReLU, Flatten)}


def layer_from_dict(d):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in LAYER_KINDS:
        raise ConfigurationError(f"unknown layer kind {kind!r}")
    if kind == "layernorm":
        d["shape"] = tuple(d["shape"])
    return LAYER_KINDS[kind](**d)


def layer_to_dict(layer):
    out = {"kind": layer.kind}
    for name in layer.__dataclass_fields__:
        v = getattr(layer, name)
        out[name] = list(v) if isinstance(v, tuple) else v
    return out


# ---------------------------------------------------------------------------
# networks


@dataclass
class Network:
    layers: tuple
    input_shape: tuple
    params: list = field(default_factory=list)

    @property
    def output_shape(self):
        return infer_shapes(self.layers, self.input_shape)[-1]

    def tensors(self, prefix=""):
        """Flat ``{name: array}`` view of the parameters, in layer order."""
        out = {}
        for i, p in enumerate(self.params):
            for k in sorted(p):
                out[f"{prefix}{i}.{k}"] = p[k]
        return out

    def with_tensors(self, tensors, prefix=""):
        params = []
        for i, p in enumerate(self.params):
            params.append({k: tensors[f"{prefix}{i}.{k}"] for k in p})
        return Network(self.layers, self.input_shape, params)

    def num_params(self):
        return sum(a.size for p in self.params for a in p.values())


def infer_shapes(layers, input_shape):
    shapes = [tuple(input_shape)]
    for i, layer in enumerate(layers):
        try:
            shapes.append(layer.output_shape(shapes[-1]))
        except ValueError as exc:
            raise ConfigurationError(f"layer {i} ({layer.kind}): {exc}") from None
    return shapes


def build_network(layers, input_shape, rng):
    layers = tuple(layers)
    input_shape = tuple(input_shape)
    infer_shapes(layers, input_shape)
    params = [{k: np.asarray(v, dtype=DTYPE) for k, v in layer.init(rng).items()} for layer in layers]
    return Network(layers, input_shape, params)


def param_count(layers, input_shape):
    """Number of trainable scalars implied by a layer list, without building it."""
    shapes = infer_shapes(layers, input_shape)
    total = 0
    for layer, shape in zip(layers, shapes):
        if isinstance(layer, Dense):
            total += layer.out_features * (layer.in_features + 1)
        elif isinstance(layer, Conv2d):
            kh, kw = _pair(layer.kernel)
            total += layer.out_channels * (layer.in_channels * kh * kw + 1)
        elif isinstance(layer, LayerNorm):
            total += 2 * prod(layer.shape)
    return total


@dataclass
class Tape:
    layers: tuple
    params: list
    caches: list
    batched: bool
    input_shape: tuple
    output_shape: tuple


def forward(net, x):
    """Run ``net`` on ``x`` of shape ``(batch, *input_shape)`` or ``input_shape``."""
    x = np.asarray(x, dtype=DTYPE)
    batched = x.shape[1:] == net.input_shape
    if not batched:
        if x.shape != net.input_shape:
            raise ConfigurationError(
                f"layer 0 ({net.layers[0].kind}): input shape {x.shape} does not match {net.input_shape}"
            )
        x = x[None]
    caches = []
    h = x
    for layer, p in zip(net.layers, net.params):
        h, cache = layer.forward(p, h)
        caches.append(cache)
    tape = Tape(net.layers, list(net.params), caches, batched, x.shape, h.shape)
    return (h if batched else h[0]), tape


def backward(net, tape, grad_output, groups=None, need_param_grads=True, need_input_grad=True):
    """Backpropagate ``grad_output`` through the activations stored in ``tape``.

    With ``groups=None`` parameter gradients are summed over the batch and
    shaped like the parameters. With an integer ``groups`` the batch is split
    into that many equal consecutive blocks and every gradient gains a leading
    axis of length ``groups``.
    """
    if tape.layers is not net.layers or len(tape.params) != len(net.params) or any(
        a[k] is not b[k] for a, b in zip(tape.params, net.params) for k in a
    ):
        raise UsageError("tape was recorded for a different network or stale parameters")
    dy = np.asarray(grad_output, dtype=DTYPE)
    if not tape.batched:
        dy = dy[None]
    if dy.shape != tape.output_shape:
        raise UsageError(f"grad_output shape {dy.shape} does not match output {tape.output_shape}")
    n = dy.shape[0]
    g = 1 if groups is None else int(groups)
    if g < 1 or n % g:
        raise UsageError(f"batch of {n} cannot be split into {g} groups")

    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        last = i == 0 and not need_input_grad
        if last and not need_param_grads:
            break
        gi, dy = layer.backward(net.params[i], tape.caches[i], dy, g, need_param_grads)
        if need_param_grads:
            grads[i] = gi if groups is not None else {k: v[0] for k, v in gi.items()}
    param_grads = grads if need_param_grads else None
    grad_input = None
    if need_input_grad:
        grad_input = dy if tape.batched else dy[0]
    return param_grads, grad_input


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits, label):
    """Softmax cross-entropy with log-sum-exp stabilisation.

    ``logits`` of shape ``(C,)`` with an int label returns ``(loss, grad)``;
    shape ``(N, C)`` with ``N`` labels returns per-sample losses and grads.
    """
    z = np.asarray(logits, dtype=DTYPE)
    single = z.ndim == 1
    if single:
        z = z[None]
    y = np.atleast_1d(np.asarray(label))
    c = z.shape[-1]
    if c < 2:
        raise UsageError("cross_entropy needs at least two logits")
    if y.shape != (z.shape[0],):
        raise UsageError(f"{y.shape[0]} labels for {z.shape[0]} logit rows")
    if np.any(y < 0) or np.any(y >= c):
        raise UsageError(f"label out of range for {c} classes")
    y = y.astype(np.intp)
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(z.shape[0])
    loss = -logp[rows, y]
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict
    v: dict
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0


def adam_init(params: Mapping, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v, dtype=DTYPE) for k, v in params.items()},
        v={k: np.zeros_like(v, dtype=DTYPE) for k, v in params.items()},
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(state: AdamState, params: Mapping, grads: Mapping):
    """One bias-corrected Adam step; returns ``(new_params, new_state)``.

    Follows the PyTorch update order so traces can be compared one-to-one.
    """
    if set(params) != set(state.m) or set(grads) != set(params):
        raise UsageError("params, grads and optimiser state name different tensors")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    step_size = state.lr / bc1
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise UsageError(f"shape mismatch for {k}: param {p.shape}, grad {g.shape}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        denom = np.sqrt(v) / sqrt(bc2) + state.eps
        new_p[k] = p - step_size * (m / denom)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, state.lr, b1, b2, state.eps, t)
