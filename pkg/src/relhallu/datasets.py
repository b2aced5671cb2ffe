"""Relational dataset construction: source ingestion, relations, windowing, splits, scaling."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.signal import lfilter

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

WINDOW_LEN = 24
N_VARS = 3


def relation_vpd(temp_c, humidity):
    """Vapour pressure deficit in kPa from temperature (deg C) and relative humidity (0..1)."""
    temp_c = np.asarray(temp_c, dtype=np.float64)
    humidity = np.asarray(humidity, dtype=np.float64)
    if np.any(temp_c <= -237.3):
        raise DataError("temperature must exceed -237.3 C")
    if np.any((humidity < 0.0) | (humidity > 1.0)):
        warnings.warn("relative humidity outside [0, 1]", RuntimeWarning, stacklevel=2)
    out = 0.6108 * np.exp(17.27 * temp_c / (temp_c + 237.3)) * (1.0 - humidity)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class Relation:
    """Residual ``f`` of a ground-truth relation; ``f == 0`` on consistent data.

    ``residual`` takes an array shaped ``(..., n_vars, L)`` and returns ``(..., L)``.
    ``derive`` builds the last variable from the others.
    """

    name: str
    n_vars: int
    derive: object
    residual_fn: object
    tolerance: float = 1e-9

    def residual(self, variables):
        variables = np.asarray(variables, dtype=np.float64)
        return self.residual_fn(*(variables[..., v, :] for v in range(self.n_vars)))


RELATIONS = {
    "difference": Relation(
        "difference", 3, lambda a, b: a - b, lambda a, b, c: a - b - c
    ),
    "sum": Relation("sum", 3, lambda a, b: a + b, lambda a, b, c: a + b - c),
    "product": Relation("product", 3, lambda a, b: a * b, lambda a, b, c: a * b - c),
    "vpd": Relation(
        "vpd",
        3,
        lambda t, h: 0.6108 * np.exp(17.27 * t / (t + 237.3)) * (1.0 - h),
        lambda t, h, v: 0.6108 * np.exp(17.27 * t / (t + 237.3)) * (1.0 - h) - v,
    ),
    "sine": Relation(
        "sine", 2, lambda x: np.sin(2 * np.pi * x), lambda x, y: y - np.sin(2 * np.pi * x)
    ),
}


@dataclass(frozen=True)
class DatasetKind:
    name: str
    relation: str
    columns: tuple = ()  # empty -> first two value columns
    scales: tuple = (1.0, 1.0)


DATASET_KINDS = {
    "recl": DatasetKind("rECL", "difference"),
    "rwth": DatasetKind("rWTH", "vpd", ("T (degC)", "rh (%)"), (1.0, 0.01)),
    "rtraffic": DatasetKind("rTraffic", "sum"),
    "rillness": DatasetKind("rIllness", "difference"),
    "rett": DatasetKind("rETT", "product", ("MUFL", "OT")),
}


def dataset_kind(name):
    key = name.lower()
    if key not in DATASET_KINDS:
        raise ConfigError(f"unknown dataset kind {name!r}; choose from {sorted(DATASET_KINDS)}")
    return DATASET_KINDS[key]


def relation_for(dataset_name):
    key = dataset_name.lower()
    if key == "synthetic2d":
        return RELATIONS["sine"]
    return RELATIONS[dataset_kind(key).relation]


@dataclass
class RawSeries:
    x0: np.ndarray
    x1: np.ndarray
    timestamps: np.ndarray | None = None
    columns: tuple = ()
    source: str = ""


def load_source_csv(path, columns=(), timestamp_col=None, scales=(1.0, 1.0)):
    """Read two aligned value columns from a source CSV.

    The timestamp column defaults to ``date`` when present, else the first column.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"source file not found: {path}")
    try:
        frame = pd.read_csv(path)
    except Exception as exc:  # pandas raises several parser error types
        raise DataError(f"{path}: cannot parse CSV ({exc})") from exc
    if timestamp_col is None:
        timestamp_col = "date" if "date" in frame.columns else frame.columns[0]
    if timestamp_col not in frame.columns:
        raise DataError(f"{path}: timestamp column {timestamp_col!r} missing")
    value_cols = [c for c in frame.columns if c != timestamp_col]
    columns = tuple(columns) or tuple(value_cols[:2])
    if len(columns) != 2:
        raise DataError(f"{path}: need two value columns, found {list(value_cols)}")
    for c in columns:
        if c not in frame.columns:
            raise DataError(f"{path}: column {c!r} not found (have {list(frame.columns)})")
    x0 = pd.to_numeric(frame[columns[0]], errors="coerce").to_numpy(np.float64) * scales[0]
    x1 = pd.to_numeric(frame[columns[1]], errors="coerce").to_numpy(np.float64) * scales[1]
    ts = frame[timestamp_col].astype(str).to_numpy()
    return RawSeries(x0, x1, ts, columns, str(path))


@dataclass
class SplitSpec:
    """Half-open window index ranges, chronologically ordered."""

    train: tuple
    val: tuple
    test: tuple

    def ranges(self):
        return {"train": self.train, "val": self.val, "test": self.test}

    def labels(self, n):
        out = np.full(n, "none", dtype=object)
        for name, (a, b) in self.ranges().items():
            out[a:b] = name
        return out


def split_chrono(n_windows, ratio=(5, 1, 1), starts=None, window_len=None):
    """Contiguous train/val/test ranges; val and test counts are floored, train takes the rest.

    With ``starts`` and ``window_len`` given (overlapping windows), leading val/test
    windows that share time-steps with the previous split are purged.
    """
    total = sum(ratio)
    if n_windows < total:
        raise ConfigError(f"need at least {total} windows to split, got {n_windows}")
    n_val = n_windows * ratio[1] // total
    n_test = n_windows * ratio[2] // total
    n_train = n_windows - n_val - n_test
    train = (0, n_train)
    val = (n_train, n_train + n_val)
    test = (n_train + n_val, n_windows)
    if starts is not None and window_len is not None:
        starts = np.asarray(starts)

        def purge(rng, prev_end_row):
            a, b = rng
            while a < b and starts[a] < prev_end_row:
                a += 1
            return (a, b)

        val = purge(val, starts[train[1] - 1] + window_len)
        if val[1] > val[0]:
            test = purge(test, starts[val[1] - 1] + window_len)
        if val[0] == val[1] or test[0] == test[1]:
            raise ConfigError("purging overlapping windows left an empty split")
    return SplitSpec(train, val, test)


@dataclass
class RelationalDataset:
    name: str
    relation: Relation
    n_vars: int
    window_len: int
    windows: np.ndarray  # (n, n_vars * window_len), i = v * L + tau
    starts: np.ndarray
    stride: int = 1
    timestamps: np.ndarray | None = None
    dropped_rows: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.n_vars * self.window_len

    def __len__(self):
        return len(self.windows)

    def variables(self, windows=None):
        w = self.windows if windows is None else np.asarray(windows)
        return w.reshape(*w.shape[:-1], self.n_vars, self.window_len)

    def residuals(self, windows=None):
        return self.relation.residual(self.variables(windows))


def make_windows(series, window_len, stride, valid=None):
    """Stack ``(n_vars, n_rows)`` series into flattened windows. Returns ``(windows, starts)``."""
    series = np.asarray(series, dtype=np.float64)
    n_rows = series.shape[1]
    if valid is None:
        valid = np.ones(n_rows, dtype=bool)
    starts = []
    for s in range(0, n_rows - window_len + 1, stride):
        if valid[s : s + window_len].all():
            starts.append(s)
    starts = np.asarray(starts, dtype=np.int64)
    if len(starts) == 0:
        return np.zeros((0, series.shape[0] * window_len)), starts
    idx = starts[:, None] + np.arange(window_len)[None, :]
    windows = series[:, idx].transpose(1, 0, 2).reshape(len(starts), -1)
    return windows, starts


def build_relational(raw, kind, window_len=WINDOW_LEN, stride=None):
    """Derive the third variable for ``kind`` and cut windows (stride defaults to ``window_len``)."""
    kind_info = dataset_kind(kind)
    relation = RELATIONS[kind_info.relation]
    x0 = np.asarray(raw.x0, dtype=np.float64)
    x1 = np.asarray(raw.x1, dtype=np.float64)
    if x0.shape != x1.shape or x0.ndim != 1:
        raise DataError(f"source series misaligned: {x0.shape} vs {x1.shape}")
    stride = window_len if stride is None else int(stride)
    if stride < 1 or window_len < 1:
        raise ConfigError("stride and window_len must be >= 1")
    valid = np.isfinite(x0) & np.isfinite(x1)
    dropped = int((~valid).sum())
    if dropped:
        log.warning("%s: dropped %d rows containing NaN", kind_info.name, dropped)
    x2 = np.full_like(x0, np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        x2[valid] = relation.derive(x0[valid], x1[valid])
    valid &= np.isfinite(x2)
    windows, starts = make_windows(np.stack([x0, x1, x2]), window_len, stride, valid)
    ts = None
    if raw.timestamps is not None and len(starts):
        ts = np.asarray(raw.timestamps)[starts]
    return RelationalDataset(
        kind_info.name,
        relation,
        N_VARS,
        window_len,
        windows,
        starts,
        stride,
        ts,
        dropped,
        {"columns": list(raw.columns), "source": raw.source},
    )


def make_synthetic2d(n_points, noise_std=0.05, seed=0):
    """Points ``(x, sin(2 pi x) + noise)`` with ``x ~ U[-1, 1]``."""
    if n_points < 1:
        raise ConfigError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, n_points)
    y = np.sin(2 * np.pi * x) + noise_std * rng.standard_normal(n_points)
    return RelationalDataset(
        "synthetic2d",
        RELATIONS["sine"],
        2,
        1,
        np.stack([x, y], axis=1),
        np.arange(n_points),
        1,
        None,
        0,
        {"noise_std": noise_std, "seed": seed},
    )


@dataclass
class Normalizer:
    """Per-variable standardisation fitted on training windows only."""

    mean: np.ndarray
    std: np.ndarray
    window_len: int

    @classmethod
    def fit(cls, windows, n_vars, window_len):
        w = np.asarray(windows, dtype=np.float64).reshape(-1, n_vars, window_len)
        mean = w.mean(axis=(0, 2))
        std = w.std(axis=(0, 2))
        if np.any(~np.isfinite(std)) or np.any(std <= 0):
            raise DataError(f"degenerate variable(s) with std {std.tolist()}")
        return cls(mean, std, window_len)

    @property
    def n_vars(self):
        return len(self.mean)

    def _expand(self, a):
        return np.repeat(np.asarray(a, dtype=np.float64), self.window_len)

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self._expand(self.mean)) / self._expand(self.std)

    def denormalize(self, z):
        return np.asarray(z, dtype=np.float64) * self._expand(self.std) + self._expand(self.mean)

    def mean_window(self):
        return self._expand(self.mean)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "window_len": self.window_len}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float), int(d["window_len"]))


def synthesize_source(kind, n_rows, seed=0):
    """Stand-in source table with the column layout of the public dataset for ``kind``.

    Hourly timestamps; seasonal plus AR(1) structure. Used when the real files are absent.
    """
    rng = np.random.default_rng(seed)
    hours = np.arange(n_rows)
    day = 2 * np.pi * hours / 24.0
    year = 2 * np.pi * hours / (24.0 * 365.25)

    def ar1(scale, phi=0.98):
        return lfilter([1.0], [1.0, -phi], rng.standard_normal(n_rows) * scale)

    dates = pd.date_range("2016-01-01", periods=n_rows, freq="h").strftime("%Y-%m-%d %H:%M:%S")
    key = kind.lower()
    if key == "rwth":
        # roughly the Jena climate statistics: T ~ 9.5 +- 8.4 C, rh ~ 76 +- 16 %
        seasonal = -9.0 * np.cos(year)
        diurnal = -5.0 * np.cos(day - 0.6) * (1.0 + 0.7 * np.sin(year - 1.2))
        weather = ar1(0.35)
        temp = 9.5 + seasonal + diurnal + weather
        rh = 76.0 - 1.6 * seasonal - 4.0 * diurnal - 2.0 * weather + ar1(1.5, 0.95)
        rh = np.clip(rh, 15.0, 100.0)
        return pd.DataFrame(
            {"date": dates, "p (mbar)": (1000.0 + ar1(0.3)).round(2), "T (degC)": temp.round(2), "rh (%)": rh.round(2)}
        )
    if key == "rett":
        load = 2.0 + 1.0 * np.sin(day) + ar1(0.08)
        oil = 15.0 + 6.0 * np.sin(year) + 0.5 * load + ar1(0.15)
        return pd.DataFrame({"date": dates, "MUFL": load.round(3), "OT": oil.round(3)})
    a = 1.0 + 0.5 * np.sin(day) + 0.1 * np.sin(year) + ar1(0.02)
    b = 0.8 + 0.4 * np.sin(day - 1.0) + ar1(0.02)
    return pd.DataFrame({"date": dates, "s0": a.round(4), "s1": b.round(4)})

