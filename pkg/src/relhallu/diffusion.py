"""DDPM forward/reverse processes, training loop and inpainting-style conditioned sampling.

All functions here work in the model's normalized space unless their name or
docstring says otherwise. Public imputation entry points take and return
original units.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .datasets import Normalizer
from .errors import ConfigError, ModelStateError, NumericalError, ShapeError
from .nn import AdamState, OneCycleSchedule, TrainConfig, adam_step, init_mlp, one_cycle_lr

log = logging.getLogger(__name__)


@dataclass
class VarianceSchedule:
    """Arrays indexed by ``t - 1`` for diffusion steps ``t = 1..T``."""

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or len(self.betas) < 1:
            raise ConfigError("betas must be a non-empty 1-D array")
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ConfigError("betas must lie in (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    @property
    def T(self):
        return len(self.betas)

    @property
    def sigmas(self):
        return np.sqrt(self.betas)

    def check_t(self, t):
        t_arr = np.asarray(t)
        if np.any(t_arr < 1) or np.any(t_arr > self.T):
            raise ConfigError(f"diffusion step out of range [1, {self.T}]: {t}")
        return t_arr.astype(np.int64)

    def at(self, name, t):
        t = self.check_t(t)
        return getattr(self, name)[t - 1]


def make_linear_schedule(T=1000, beta_start=1e-4, beta_end=1e-2):
    if T < 1:
        raise ConfigError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError("need 0 < beta_start <= beta_end < 1")
    if T == 1:
        return VarianceSchedule(np.array([beta_start]))
    return VarianceSchedule(np.linspace(beta_start, beta_end, T))


def _col(a, x):
    """Broadcast a scalar or per-row coefficient against ``x``."""
    a = np.asarray(a, dtype=np.float64)
    return a[:, None] if a.ndim == 1 and np.ndim(x) == 2 else a


def q_sample(schedule, x0, t, eps):
    """Jump the forward process straight to step ``t``."""
    ab = schedule.at("alpha_bars", t)
    x0 = np.asarray(x0, dtype=np.float64)
    return _col(np.sqrt(ab), x0) * x0 + _col(np.sqrt(1.0 - ab), x0) * np.asarray(eps, np.float64)


def posterior_mean(x_t, eps_pred, alpha, alpha_bar):
    """Predicted mean of ``x_{t-1}`` from the network's noise estimate."""
    x_t = np.asarray(x_t, dtype=np.float64)
    alpha = _col(alpha, x_t)
    alpha_bar = _col(alpha_bar, x_t)
    coef = (1.0 - alpha) / np.sqrt(1.0 - alpha_bar)
    return (x_t - coef * np.asarray(eps_pred, np.float64)) / np.sqrt(alpha)


@dataclass
class DiffusionModel:
    network: object  # anything with forward(x, t) -> eps estimate
    schedule: VarianceSchedule
    normalizer: Normalizer | None = None
    dim: int = 0
    trained: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        net_dim = getattr(self.network, "data_dim", None)
        if not self.dim:
            self.dim = net_dim or 0
        if net_dim is not None and net_dim != self.dim:
            raise ShapeError(f"network width {net_dim} != data dim {self.dim}")

    def predict_noise(self, x_t, t):
        return np.asarray(self.network.forward(x_t, t), dtype=np.float64)

    def require_trained(self):
        if not self.trained:
            raise ModelStateError("model has not been trained or loaded from a checkpoint")

    def normalize(self, x):
        return x if self.normalizer is None else self.normalizer.normalize(x)

    def denormalize(self, z):
        return z if self.normalizer is None else self.normalizer.denormalize(z)


def p_mean(model, x_t, t):
    s = model.schedule
    t_arr = s.check_t(t)
    eps = model.predict_noise(x_t, t_arr)
    return posterior_mean(x_t, eps, s.alphas[t_arr - 1], s.alpha_bars[t_arr - 1])


def p_sample(model, x_t, t, z):
    """One reverse step. No noise is added on the final step ``t == 1``."""
    mu = p_mean(model, x_t, t)
    t_arr = model.schedule.check_t(t)
    sigma = np.where(t_arr > 1, model.schedule.sigmas[t_arr - 1], 0.0)
    return mu + _col(sigma, mu) * np.asarray(z, dtype=np.float64)


@dataclass
class PromptSpec:
    """Prompt indices with their values (original units); the rest is the response."""

    dim: int
    prompt_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.prompt_indices = np.asarray(self.prompt_indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.prompt_indices.shape != self.values.shape:
            raise ShapeError("prompt indices and values differ in length")
        if len(np.unique(self.prompt_indices)) != len(self.prompt_indices):
            raise ShapeError("duplicate prompt indices")
        if len(self.prompt_indices) and (
            self.prompt_indices.min() < 0 or self.prompt_indices.max() >= self.dim
        ):
            raise ShapeError(f"prompt index outside [0, {self.dim})")
        if not np.all(np.isfinite(self.values)):
            raise ShapeError("prompt values must be finite")

    @property
    def mask(self):
        m = np.zeros(self.dim, dtype=bool)
        m[self.prompt_indices] = True
        return m

    @property
    def response_indices(self):
        return np.flatnonzero(~self.mask)

    def full_vector(self, fill=0.0):
        x = np.full(self.dim, fill, dtype=np.float64)
        x[self.prompt_indices] = self.values
        return x

    @classmethod
    def complete(cls, x):
        """Condition on every index of ``x``."""
        x = np.asarray(x, dtype=np.float64)
        return cls(len(x), np.arange(len(x)), x)


def row_rngs(seed, *keys, n=None):
    """Independent per-row generators keyed by ``(seed, *keys, row)``."""
    if n is None:
        return np.random.default_rng([seed, *keys])
    return [np.random.default_rng([seed, *keys, i]) for i in range(n)]


def _draw(rngs, d):
    return np.stack([r.standard_normal(d) for r in rngs])


def repaint_batch(model, masks, prompts, rngs, capture=False):
    """Conditioned reverse pass for a batch, normalized space.

    ``masks`` (n, d) bool marks conditioning entries, ``prompts`` (n, d) holds their
    clean normalized values, ``rngs`` is one generator per row. Returns ``x_0`` and,
    with ``capture``, the predicted means as an array ``(T, n, d)`` ordered ``t = T..1``.
    """
    s = model.schedule
    masks = np.atleast_2d(np.asarray(masks, dtype=bool))
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.float64))
    n, d = prompts.shape
    if masks.shape != (n, d) or len(rngs) != n:
        raise ShapeError("masks, prompts and rngs must agree on batch shape")
    x = _draw(rngs, d)
    traj = np.empty((s.T, n, d)) if capture else None
    for step, t in enumerate(range(s.T, 0, -1)):
        known = q_sample(s, prompts, t, _draw(rngs, d))
        x = np.where(masks, known, x)
        mu = p_mean(model, x, t)
        if not np.all(np.isfinite(mu)):
            raise NumericalError(f"non-finite predicted mean at diffusion step {t}", step=t)
        if capture:
            traj[step] = mu
        x = mu + s.sigmas[t - 1] * _draw(rngs, d) if t > 1 else mu
    x = np.where(masks, prompts, x)
    return (x, traj) if capture else x


def repaint_impute(model, prompt, rng, capture=False):
    """Impute the response of ``prompt``; returns a full vector in original units.

    Prompt entries are copied back verbatim, so ``out[I_p] == prompt.values`` exactly.
    """
    model.require_trained()
    if len(prompt.response_indices) == 0:
        out = prompt.full_vector()
        return (out, None) if capture else out
    res = impute_many(model, [prompt], [rng], capture=capture)
    if capture:
        return res[0][0], res[1][:, 0, :]
    return res[0]


def impute_many(model, prompts, rngs, capture=False):
    """Batched ``repaint_impute``. Each row uses only its own generator, so results do
    not depend on how prompts are grouped into batches (up to matmul rounding)."""
    model.require_trained()
    masks = np.stack([p.mask for p in prompts])
    clean = np.stack([model.normalize(p.full_vector()) for p in prompts])
    clean = np.where(masks, clean, 0.0)
    res = repaint_batch(model, masks, clean, rngs, capture=capture)
    x, traj = res if capture else (res, None)
    out = model.denormalize(x)
    for row, p in zip(out, prompts):
        row[p.prompt_indices] = p.values
    return (out, traj) if capture else out


def denoise_full_batch(model, x_hat, rngs, draws=0):
    """Corrupt every index to step 1 and take one predicted-mean step. Normalized space.

    ``draws=0`` corrupts to the forward-process mean (no noise draw, deterministic);
    ``draws=k`` averages the result over ``k`` seeded noise draws.
    """
    x_hat = np.atleast_2d(np.asarray(x_hat, dtype=np.float64))
    n, d = x_hat.shape
    if draws == 0:
        return p_mean(model, q_sample(model.schedule, x_hat, 1, np.zeros_like(x_hat)), 1)
    acc = np.zeros_like(x_hat)
    for _ in range(draws):
        x1 = q_sample(model.schedule, x_hat, 1, _draw(rngs, d))
        acc += p_mean(model, x1, 1)
    return acc / draws


def denoise_full_vector(model, x_hat, rng=None, draws=0):
    """Re-denoise a complete prompt-response pair (original units in and out)."""
    model.require_trained()
    z = model.normalize(np.asarray(x_hat, dtype=np.float64))
    out = denoise_full_batch(model, z[None, :], [rng] if rng is not None else [], draws)[0]
    return model.denormalize(out)


def noise_loss(model, x0, t, eps):
    """Noise-prediction MSE without touching parameters."""
    x_t = q_sample(model.schedule, x0, t, eps)
    pred = model.predict_noise(x_t, t)
    return float(np.mean((pred - eps) ** 2))


def train_step(model, opt, batch, rng, lr, t=None, eps=None):
    """One ADAM step on a batch of normalized windows; returns the batch loss."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    n, d = batch.shape
    if t is None:
        t = rng.integers(1, model.schedule.T + 1, size=n)
    if eps is None:
        eps = rng.standard_normal((n, d))
    x_t = q_sample(model.schedule, batch, t, eps)
    loss, grads = model.network.backward(x_t, t, eps)
    if not math.isfinite(loss):
        raise NumericalError("non-finite training loss")
    adam_step(opt, model.network.params(), grads, lr)
    return loss


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)  # (epoch, step, train_loss, val_loss, lr)
    best_epoch: int = -1
    best_val: float = math.inf
    stopped_early: bool = False


def build_model(dim, config, schedule=None, normalizer=None, dtype=np.float32):
    net = init_mlp(dim, config.hidden, config.time_dim, seed=config.seed, dtype=dtype)
    return DiffusionModel(net, schedule or make_linear_schedule(), normalizer, dim)


def train_diffusion(model, train_x, val_x, config: TrainConfig, on_epoch=None):
    """Fit ``model.network`` on normalized windows with early stopping on validation loss.

    The best-validation parameters are restored into ``model`` at the end.
    ``on_epoch(epoch, history, best_network, improved)`` runs after each validation.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    val_x = np.asarray(val_x, dtype=np.float64)
    if len(train_x) == 0 or len(val_x) == 0:
        raise ConfigError("train and validation sets must be non-empty")
    rng = np.random.default_rng([config.seed, 1])
    # the validation noise is drawn once so that epochs are compared on the same loss
    val_x = np.tile(val_x, (config.val_draws, 1))
    val_rng = np.random.default_rng([config.seed, 2])
    val_t = val_rng.integers(1, model.schedule.T + 1, size=len(val_x))
    val_eps = val_rng.standard_normal(val_x.shape)

    steps_per_epoch = math.ceil(len(train_x) / config.batch_size)
    sched = OneCycleSchedule(
        steps_per_epoch * config.max_epochs,
        config.max_lr,
        config.pct_start,
        config.div_factor,
        config.final_div_factor,
    )
    opt = AdamState.for_params(model.network.params())
    hist = TrainHistory()
    best = model.network.copy()
    since_best = 0
    step = 0
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(train_x))
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            lr = one_cycle_lr(sched, step)
            try:
                losses.append(train_step(model, opt, train_x[idx], rng, lr))
            except NumericalError as exc:
                exc.step = step
                raise NumericalError(f"training diverged at step {step}: {exc}", exc.layer, step) from exc
            step += 1
        if (epoch + 1) % config.val_interval and epoch + 1 != config.max_epochs:
            continue
        val = noise_loss(model, val_x, val_t, val_eps)
        hist.rows.append((epoch, step, float(np.mean(losses)), val, lr))
        improved = val < hist.best_val
        if improved:
            hist.best_val, hist.best_epoch = val, epoch
            best = model.network.copy()
            since_best = 0
        else:
            since_best += config.val_interval
        if on_epoch is not None:
            on_epoch(epoch, hist, best, improved)
        if since_best >= config.patience:
            hist.stopped_early = True
            log.info("early stop at epoch %d (best %d)", epoch, hist.best_epoch)
            break
    model.network = best
    model.trained = True
    return hist
