"""Feed-forward noise predictor with hand-written backprop, ADAM and a one-cycle LR."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError, NumericalError, ShapeError

ACTIVATIONS = ("silu", "identity")


def silu(z):
    return z * expit(z)


def silu_grad(z):
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


def time_embedding(t, dim, dtype=np.float64):
    """Sinusoidal features of the diffusion step, shape (n, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if dim == 0:
        return np.zeros((t.shape[0], 0), dtype=dtype)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.shape[0], 1))], axis=1)
    return emb.astype(dtype)


@dataclass
class MlpNetwork:
    """Dense network mapping ``[x_t, embed(t)]`` to a vector shaped like ``x_t``.

    ``weights[k]`` has shape ``(fan_in, fan_out)`` so a layer computes ``h @ W + b``.
    """

    data_dim: int
    time_dim: int
    weights: list
    biases: list
    activations: list

    @property
    def widths(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def n_params(self):
        return sum(p.size for p in self.params())

    def copy(self):
        return MlpNetwork(
            self.data_dim,
            self.time_dim,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )

    def astype(self, dtype):
        return MlpNetwork(
            self.data_dim,
            self.time_dim,
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
            list(self.activations),
        )

    def forward(self, x, t):
        return forward(self, x, t)

    def backward(self, x, t, target):
        return backward(self, x, t, target)


def init_mlp(data_dim, hidden=(512,) * 5, time_dim=64, seed=0, dtype=np.float32):
    """Kaiming-uniform (fan-in) weights, zero biases, SiLU hidden / identity output."""
    if data_dim < 1:
        raise ConfigError("data_dim must be >= 1")
    rng = np.random.default_rng(seed)
    widths = [data_dim + time_dim, *hidden, data_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    acts = ["silu"] * len(hidden) + ["identity"]
    return MlpNetwork(data_dim, time_dim, weights, biases, acts)


def _inputs(net, x, t):
    x = np.asarray(x)
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(x).astype(net.dtype, copy=False)
    if x2.shape[1] != net.data_dim:
        raise ShapeError(f"expected input of width {net.data_dim}, got {x2.shape[1]}")
    t = np.asarray(t)
    if t.ndim == 0:
        t = np.full(x2.shape[0], t)
    h = x2
    if net.time_dim:
        h = np.concatenate([x2, time_embedding(t, net.time_dim, net.dtype)], axis=1)
    return h, squeeze


def forward(net, x, t, _cache=None):
    h, squeeze = _inputs(net, x, t)
    for k, (w, b, act) in enumerate(zip(net.weights, net.biases, net.activations)):
        z = h @ w + b
        if _cache is not None:
            _cache.append((h, z))
        h = silu(z) if act == "silu" else z
    return h[0] if squeeze else h


def backward(net, x, t, target):
    """Loss and parameter gradients for ``mean((forward(x, t) - target)**2)``.

    Returns ``(loss, grads)`` with ``grads`` ordered like ``net.params()``.
    """
    cache = []
    out = forward(net, x, t, _cache=cache)
    out2 = np.atleast_2d(out)
    target2 = np.atleast_2d(np.asarray(target, dtype=out2.dtype))
    if target2.shape != out2.shape:
        raise ShapeError(f"target shape {target2.shape} != output shape {out2.shape}")
    diff = out2 - target2
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    if not math.isfinite(loss):
        raise NumericalError("non-finite loss", layer=len(net.weights) - 1)

    delta = (2.0 / diff.size) * diff
    grads = [None] * (2 * len(net.weights))
    for k in range(len(net.weights) - 1, -1, -1):
        h_in, z = cache[k]
        if net.activations[k] == "silu":
            delta = delta * silu_grad(z)
        gw = h_in.T @ delta
        gb = delta.sum(axis=0)
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericalError(f"non-finite gradient in layer {k}", layer=k)
        grads[2 * k] = gw
        grads[2 * k + 1] = gb
        if k:
            delta = delta @ net.weights[k].T
    return loss, grads


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(state, params, grads, lr):
    """Bias-corrected ADAM update, applied in place. Returns ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("parameter / gradient / state lists differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch {p.shape} vs {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params


@dataclass
class OneCycleSchedule:
    total_steps: int
    max_lr: float = 1e-3
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if not 0.0 <= self.pct_start <= 1.0:
            raise ConfigError("pct_start must lie in [0, 1]")

    @property
    def initial_lr(self):
        return self.max_lr / self.div_factor

    @property
    def final_lr(self):
        return self.initial_lr / self.final_div_factor

    @property
    def peak_step(self):
        return int(round(self.pct_start * (self.total_steps - 1)))


def _cos_interp(start, end, frac):
    if frac <= 0.0:
        return start
    if frac >= 1.0:
        return end
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def one_cycle_lr(sched, step):
    """Cosine warm-up to ``max_lr`` at ``peak_step``, then cosine anneal to ``final_lr``."""
    if not 0 <= step < sched.total_steps:
        raise ConfigError(f"step {step} outside [0, {sched.total_steps})")
    peak = sched.peak_step
    if step <= peak:
        if peak == 0:
            return sched.max_lr
        return _cos_interp(sched.initial_lr, sched.max_lr, step / peak)
    span = sched.total_steps - 1 - peak
    return _cos_interp(sched.max_lr, sched.final_lr, (step - peak) / span)


@dataclass
class TrainConfig:
    batch_size: int = 1024
    max_epochs: int = 8000
    patience: int = 100
    val_interval: int = 1
    val_draws: int = 1  # fixed (t, eps) draws per validation window
    seed: int = 0
    max_lr: float = 1e-3
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    hidden: tuple = field(default_factory=lambda: (512,) * 5)
    time_dim: int = 64

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 1 or self.val_interval < 1 or self.val_draws < 1:
            raise ConfigError("max_epochs, val_interval and val_draws must be >= 1")
