"""Relational error, Combined Error and the trajectory-based hallucination metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import denoise_full_batch, repaint_batch
from .errors import ConfigError, NumericalError, ShapeError


def rmse(a, b, axis=-1):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.sqrt(np.mean((a - b) ** 2, axis=axis))


def relational_error(window, relation, n_vars=None, window_len=None):
    """Mean over time-steps of ``|f|``. Accepts one window or a batch (original units)."""
    w = np.asarray(window, dtype=np.float64)
    n_vars = n_vars or relation.n_vars
    window_len = window_len or w.shape[-1] // n_vars
    if w.shape[-1] != n_vars * window_len:
        raise ShapeError(f"window width {w.shape[-1]} != {n_vars} x {window_len}")
    res = relation.residual(w.reshape(*w.shape[:-1], n_vars, window_len))
    out = np.mean(np.abs(res), axis=-1)
    return float(out) if out.ndim == 0 else out


def combined_error_batch(model, x_hat, rngs=None, draws=0):
    """CE for each row of ``x_hat`` (original units in, normalized-space RMSE out)."""
    model.require_trained()
    z = model.normalize(np.atleast_2d(np.asarray(x_hat, dtype=np.float64)))
    zz = denoise_full_batch(model, z, rngs, draws)
    return rmse(zz, z)


def combined_error(model, x_hat, rng=None, draws=0):
    rngs = None if rng is None else [rng]
    return float(combined_error_batch(model, np.asarray(x_hat)[None, :], rngs, draws)[0])


def prompt_error(x_hat, prompt):
    """RMSE between the output and the prompt over prompt indices.

    Pure function of its inputs; the caller chooses the units.
    """
    idx = prompt.prompt_indices
    if len(idx) == 0:
        raise ConfigError("prompt error is undefined for an empty prompt")
    return float(rmse(np.asarray(x_hat, dtype=np.float64)[idx], prompt.values))


@dataclass
class TrajectoryRecord:
    """Predicted means ``mu[k, i]`` for diffusion steps ``t = T - k`` (so row 0 is ``t = T``)."""

    means: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        if self.means.ndim != 2 or self.means.shape[0] < 1:
            raise ShapeError("trajectory must be a (T, d) array")

    def check_complete(self):
        if not np.all(np.isfinite(self.means)):
            raise ShapeError("trajectory grid has missing entries")
        return self.means


def trajectory_variance(traj):
    return float(np.mean(np.var(traj.check_complete(), axis=0)))


def rts(traj, response_indices):
    """Mean over response indices of the std of the predicted mean across steps."""
    idx = np.asarray(response_indices, dtype=np.int64)
    if len(idx) == 0:
        raise ConfigError("response trajectory spread needs a non-empty response")
    return float(np.mean(np.std(traj.check_complete()[:, idx], axis=0)))


def _trajectory_rmse(means, targets):
    return float(np.mean(np.sqrt(np.mean((means - targets[None, :]) ** 2, axis=0))))


def pts(traj, prompt):
    """Mean over prompt indices of the RMSE (across steps) to the prompt value.

    ``prompt.values`` must be in the same units as the trajectory.
    """
    idx = prompt.prompt_indices
    if len(idx) == 0:
        raise ConfigError("prompt trajectory spread needs a non-empty prompt")
    return _trajectory_rmse(traj.check_complete()[:, idx], prompt.values)


def cts_batch(model, x_hat, rngs):
    """Second full conditioned pass with every index clamped to ``x_hat`` (original units).

    Returns the per-row CTS in normalized units.
    """
    model.require_trained()
    z = model.normalize(np.atleast_2d(np.asarray(x_hat, dtype=np.float64)))
    _, traj = repaint_batch(model, np.ones_like(z, dtype=bool), z, rngs, capture=True)
    return np.array([_trajectory_rmse(traj[:, r, :], z[r]) for r in range(len(z))])


def cts(model, x_hat, rng):
    return float(cts_batch(model, np.asarray(x_hat)[None, :], [rng])[0])


@dataclass
class Histogram:
    edges: np.ndarray
    probs: np.ndarray


def shared_histograms(samples, n_bins=50):
    """Normalized histograms of several samples over common equal-width bins."""
    samples = [np.asarray(s, dtype=np.float64).ravel() for s in samples]
    if any(len(s) == 0 for s in samples):
        raise ConfigError("histogram inputs must be non-empty")
    pooled = np.concatenate(samples)
    lo, hi = float(pooled.min()), float(pooled.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, n_bins + 1)
    out = []
    for s in samples:
        counts, _ = np.histogram(s, bins=edges)
        out.append(Histogram(edges, counts / counts.sum()))
    return out


def overlap_from_probs(p, q):
    return float(np.sum(np.minimum(p, q)))


def overlap_coefficient(low_errors, high_errors, n_bins=50):
    """Sum over shared bins of the smaller of the two normalized histogram masses."""
    h_low, h_high = shared_histograms([low_errors, high_errors], n_bins)
    return overlap_from_probs(h_low.probs, h_high.probs)


SCORE_FIELDS = ("ce", "pe", "tv", "rts", "pts", "cts", "er")


@dataclass
class ScoredPair:
    window_id: str
    task: str
    model: str
    x_hat: np.ndarray
    ce: float
    pe: float | None = None
    tv: float | None = None
    rts: float | None = None
    pts: float | None = None
    cts: float | None = None
    er: float | None = None

    def __post_init__(self):
        for name in SCORE_FIELDS:
            val = getattr(self, name)
            if val is not None and not (np.isfinite(val) and val >= 0):
                raise NumericalError(f"{name} must be finite and non-negative, got {val} (window {self.window_id}, {self.task}, {self.model})")

    def row(self):
        return [self.window_id, self.task, self.model] + [getattr(self, f) for f in SCORE_FIELDS]
