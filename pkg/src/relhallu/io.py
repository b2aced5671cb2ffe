"""File formats: windows CSV + metadata, model checkpoints, headed CSV output."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .datasets import Normalizer, RelationalDataset, relation_for
from .diffusion import DiffusionModel, make_linear_schedule
from .errors import DataError
from .nn import MlpNetwork

CHECKPOINT_MAGIC = b"RHDMCKPT"
CHECKPOINT_VERSION = 1


def atomic_write_bytes(path, data):
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows, config_hash=""):
    """CSV with a leading ``# config_hash=...`` comment line and a header row."""
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    atomic_write_bytes(path, buf.getvalue().encode())


def read_csv(path):
    """Return ``(header, rows)`` skipping ``#`` comment lines."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with path.open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows:
        raise DataError(f"{path}: no header row")
    return rows[0], rows[1:]


def config_hash(obj):
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def write_windows(path, dataset: RelationalDataset, split, config_hash_=""):
    """Canonical windows CSV plus ``<path>.meta.json``."""
    labels = split.labels(len(dataset))
    header = ["window_id", "split"] + [f"x{i}" for i in range(dataset.dim)]
    rows = ([i, labels[i], *dataset.windows[i]] for i in range(len(dataset)))
    write_csv(path, header, rows, config_hash_)
    meta = {
        "dataset": dataset.name,
        "relation": dataset.relation.name,
        "n_vars": dataset.n_vars,
        "window_len": dataset.window_len,
        "stride": dataset.stride,
        "n_windows": len(dataset),
        "dropped_rows": dataset.dropped_rows,
        "split": {k: list(v) for k, v in split.ranges().items()},
        "starts": dataset.starts.tolist(),
        "first_timestamps": None if dataset.timestamps is None else [str(t) for t in dataset.timestamps],
        "config_hash": config_hash_,
        **dataset.meta,
    }
    atomic_write_bytes(meta_path(path), json.dumps(meta, indent=2).encode())


def meta_path(path):
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


class WindowsFile:
    """Loaded windows CSV with split accessors."""

    def __init__(self, path):
        header, rows = read_csv(path)
        mp = meta_path(path)
        if not mp.exists():
            raise DataError(f"metadata file missing: {mp}")
        self.meta = json.loads(mp.read_text())
        dim = self.meta["n_vars"] * self.meta["window_len"]
        if header[:2] != ["window_id", "split"] or len(header) != dim + 2:
            raise DataError(f"{path}: unexpected header (need window_id, split, x0..x{dim - 1})")
        try:
            self.ids = np.array([int(r[0]) for r in rows])
            self.splits = np.array([r[1] for r in rows])
            self.windows = np.array([[float(v) for v in r[2:]] for r in rows]).reshape(len(rows), dim)
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}: malformed row ({exc})") from exc
        self.name = self.meta["dataset"]
        self.relation = relation_for(self.name)
        self.n_vars = self.meta["n_vars"]
        self.window_len = self.meta["window_len"]

    def split(self, name):
        return self.windows[self.splits == name], self.ids[self.splits == name]


def save_checkpoint(path, model: DiffusionModel, extra=None):
    net: MlpNetwork = model.network
    sched = model.schedule
    arrays = net.params()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "layer_widths": net.widths,
        "data_dim": net.data_dim,
        "time_dim": net.time_dim,
        "activations": net.activations,
        "schedule": {
            "T": sched.T,
            "beta_start": float(sched.betas[0]),
            "beta_end": float(sched.betas[-1]),
        },
        "normalizer": None if model.normalizer is None else model.normalizer.to_dict(),
        "arrays": [list(a.shape) for a in arrays],
        **{k: v for k, v in model.meta.items() if k != "hash"},
        **(extra or {}),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    data = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)) + hbytes + body
    atomic_write_bytes(path, data)
    return hashlib.sha256(data).hexdigest()[:16]


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", data, off)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    header = json.loads(data[off : off + hlen])
    off += hlen
    arrays = []
    for shape in header["arrays"]:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32))
        off += 4 * n
    if off != len(data):
        raise DataError(f"{path}: trailing or missing parameter bytes")
    net = MlpNetwork(
        header["data_dim"], header["time_dim"], arrays[0::2], arrays[1::2], header["activations"]
    )
    s = header["schedule"]
    norm = header.get("normalizer")
    model = DiffusionModel(
        net,
        make_linear_schedule(s["T"], s["beta_start"], s["beta_end"]),
        None if norm is None else Normalizer.from_dict(norm),
        header["data_dim"],
        trained=True,
        meta={k: header[k] for k in ("dataset", "seed") if k in header},
    )
    model.meta["hash"] = hashlib.sha256(data).hexdigest()[:16]
    return model, header
