"""Hallucination detection (quartile calibration), mitigation (argmin-CE filtering),
the training-mean baseline and ingestion of third-party responses."""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import impute_many, row_rngs
from .errors import ConfigError, DataError
from .metrics import combined_error_batch, relational_error
from .tasks import ALL_TASKS, TaskKind, assemble_prompt

log = logging.getLogger(__name__)

# stream ids mixed into per-row seeds
IMPUTE_STREAM = 11
CE_STREAM = 12


class HallucinationLevel(str, enum.Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


@dataclass(frozen=True)
class CalibrationQuartiles:
    q2: float
    q3: float
    n: int
    dataset: str = ""
    model_hash: str = ""

    def __post_init__(self):
        if self.n < 4:
            raise ConfigError(f"calibration needs at least 4 CE values, got {self.n}")
        if not self.q2 <= self.q3:
            raise ConfigError("Q2 must not exceed Q3")

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def quartiles(values):
    """Q2 and Q3 by linear interpolation between order statistics."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 4:
        raise ConfigError(f"calibration needs at least 4 CE values, got {v.size}")
    q2, q3 = np.quantile(v, [0.5, 0.75], method="linear")
    return float(q2), float(q3)


def classify(ce, quartiles):
    if ce < quartiles.q2:
        return HallucinationLevel.LOW
    if ce > quartiles.q3:
        return HallucinationLevel.HIGH
    return HallucinationLevel.MEDIUM


def impute_windows(model, windows, task, seed, ids=None, batch=256, capture=False):
    """DM responses for every window under ``task``; row ``k`` is seeded by ``ids[k]``."""
    task = TaskKind.parse(task)
    windows = np.atleast_2d(np.asarray(windows, dtype=np.float64))
    ids = np.arange(len(windows)) if ids is None else np.asarray(ids)
    n_vars = model.normalizer.n_vars if model.normalizer is not None else 3
    L = windows.shape[1] // n_vars
    t_idx = ALL_TASKS.index(task)
    prompts = [assemble_prompt(w, task, n_vars, L) for w in windows]
    outs, trajs = [], []
    for a in range(0, len(prompts), batch):
        rngs = [row_rngs(seed, IMPUTE_STREAM, t_idx, int(i)) for i in ids[a : a + batch]]
        res = impute_many(model, prompts[a : a + batch], rngs, capture=capture)
        if capture:
            outs.append(res[0])
            trajs.append(res[1])
        else:
            outs.append(res)
    out = np.concatenate(outs) if outs else np.zeros((0, windows.shape[1]))
    if capture:
        return out, prompts, np.concatenate(trajs, axis=1)
    return out, prompts


def ce_for(model, x_hat, seed, ids, stream=CE_STREAM, draws=0):
    rngs = [row_rngs(seed, stream, *np.atleast_1d(k).tolist()) for k in ids]
    return combined_error_batch(model, x_hat, rngs, draws)


def calibrate(model, train_windows, seed=0, tasks=ALL_TASKS, dataset="", model_hash="", draws=0):
    """Quartiles of the CE over DM responses to every training prompt of every task."""
    model.require_trained()
    train_windows = np.atleast_2d(train_windows)
    if len(train_windows) < 4:
        raise ConfigError("calibration needs at least 4 training windows")
    ces = []
    for task in tasks:
        t_idx = ALL_TASKS.index(TaskKind.parse(task))
        out, _ = impute_windows(model, train_windows, task, seed)
        ids = [(t_idx, i) for i in range(len(out))]
        ces.append(ce_for(model, out, seed, ids, draws=draws))
    ces = np.concatenate(ces)
    q2, q3 = quartiles(ces)
    return CalibrationQuartiles(q2, q3, int(ces.size), dataset, model_hash), ces


def argmin_index(values):
    """Index of the smallest value; ties go to the lowest index."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ConfigError("cannot select from an empty group")
    return int(np.argmin(v))


def delta_er(er_samples, selected):
    """Relational error of the selected sample relative to the sample mean."""
    mean = float(np.mean(er_samples))
    if mean == 0.0:
        return math.nan
    return float(er_samples[selected]) / mean


@dataclass
class MitigationResult:
    samples: np.ndarray
    ce: np.ndarray
    selected: int
    er: np.ndarray | None = None
    delta_er: float | None = None

    @property
    def response(self):
        return self.samples[self.selected]


def mitigate(model, prompt, n, rng, relation=None, draws=0):
    """Sample ``n`` responses, score each by CE and keep the lowest."""
    if n < 1:
        raise ConfigError("need at least one sample")
    model.require_trained()
    subseeds = rng.integers(0, 2**63 - 1, size=(n, 2))
    impute_rngs = [np.random.default_rng(int(s)) for s in subseeds[:, 0]]
    ce_rngs = [np.random.default_rng(int(s)) for s in subseeds[:, 1]]
    samples = impute_many(model, [prompt] * n, impute_rngs)
    ce = combined_error_batch(model, samples, ce_rngs, draws)
    j = argmin_index(ce)
    er = d = None
    if relation is not None:
        er = relational_error(samples, relation)
        d = delta_er(er, j)
    return MitigationResult(samples, ce, j, er, d)


def baseline_respond(normalizer, prompt=None):
    """Training-mean window, every index (prompt included) set to its variable's mean."""
    return normalizer.mean_window()


@dataclass
class ExternalResponse:
    window_id: str
    task: str
    model: str
    values: np.ndarray
    group: str = ""
    line: int = 0


@dataclass
class IngestReport:
    responses: list = field(default_factory=list)
    rejected: list = field(default_factory=list)  # (line, reason)


def value_columns(dim):
    return [f"x{i}" for i in range(dim)]


def ingest_external_responses(path, dim=72):
    """Parse an external-response CSV.

    Columns: ``window_id, task, model[, sample_group], x0..x{dim-1}`` (original units).
    Lines starting with ``#`` are comments. Structural problems raise ``DataError``
    naming the line; rows with non-finite values are skipped and reported.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"response file not found: {path}")
    report = IngestReport()
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = None
        for lineno, row in enumerate(reader, start=1):
            if not row or row[0].startswith("#"):
                continue
            if header is None:
                header = [h.strip() for h in row]
                missing = [c for c in ("window_id", "task", "model", *value_columns(dim)) if c not in header]
                if missing:
                    raise DataError(f"{path}:{lineno}: header missing columns {missing[:5]}")
                pos = {c: header.index(c) for c in header}
                vcols = [pos[c] for c in value_columns(dim)]
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}:{lineno}: expected {len(header)} columns, found {len(row)}"
                )
            try:
                task = TaskKind.parse(row[pos["task"]]).value
                values = np.array([float(row[k]) for k in vcols])
            except (ConfigError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if not np.all(np.isfinite(values)):
                report.rejected.append((lineno, "non-finite value"))
                continue
            group = row[pos["sample_group"]] if "sample_group" in pos else ""
            report.responses.append(
                ExternalResponse(row[pos["window_id"]], task, row[pos["model"]], values, group, lineno)
            )
    if header is None:
        raise DataError(f"{path}: empty file")
    if report.rejected:
        log.warning("%s: rejected %d rows with non-finite values", path, len(report.rejected))
    return report


def group_responses(responses):
    """Group by ``(model, window_id, task, sample_group)``, preserving file order."""
    groups = {}
    for r in responses:
        groups.setdefault((r.model, r.window_id, r.task, r.group), []).append(r)
    return groups


def select_external(groups, ce_by_line):
    """Argmin-CE selection within each group; returns ``{key: index}``."""
    return {k: argmin_index([ce_by_line[r.line] for r in rs]) for k, rs in groups.items()}
