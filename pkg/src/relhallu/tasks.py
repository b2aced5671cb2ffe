"""Prompt masks for the over-constrained, under-constrained and forecast tasks."""

from __future__ import annotations

import enum

import numpy as np

from .datasets import N_VARS, WINDOW_LEN
from .diffusion import PromptSpec
from .errors import ConfigError, ShapeError


class TaskKind(str, enum.Enum):
    OC = "oc"
    UC = "uc"
    FC = "fc"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ConfigError(f"unknown task {name!r}; expected one of oc, uc, fc") from None


ALL_TASKS = (TaskKind.OC, TaskKind.UC, TaskKind.FC)


def prompt_mask(kind, n_vars=N_VARS, window_len=WINDOW_LEN):
    """Boolean (n_vars * window_len,) mask, True on prompt indices ``i = v * L + tau``."""
    kind = TaskKind.parse(kind)
    v = np.repeat(np.arange(n_vars), window_len)
    tau = np.tile(np.arange(window_len), n_vars)
    if kind is TaskKind.OC:
        return v < n_vars - 1
    if kind is TaskKind.UC:
        return v == n_vars - 1
    return tau < window_len // 2


def make_mask(kind, n_vars=N_VARS, window_len=WINDOW_LEN):
    """Return ``(prompt_indices, response_indices)``."""
    m = prompt_mask(kind, n_vars, window_len)
    return np.flatnonzero(m), np.flatnonzero(~m)


def assemble_prompt(window, kind, n_vars=N_VARS, window_len=WINDOW_LEN):
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (n_vars * window_len,):
        raise ShapeError(f"window must have {n_vars * window_len} values, got {window.shape}")
    idx, _ = make_mask(kind, n_vars, window_len)
    return PromptSpec(len(window), idx, window[idx].copy())
