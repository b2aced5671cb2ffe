"""Command-line entry point: ``relhallu <command> [flags]``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
import typing
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import RunConfig, load_config_file
from .datasets import (
    Normalizer,
    SplitSpec,
    build_relational,
    dataset_kind,
    load_source_csv,
    make_synthetic2d,
    relation_for,
    split_chrono,
    synthesize_source,
)
from .diffusion import (
    DiffusionModel,
    build_model,
    impute_many,
    make_linear_schedule,
    row_rngs,
    train_diffusion,
)
from .errors import ConfigError, DataError, RelhalluError
from .halluc import (
    IMPUTE_STREAM,
    CalibrationQuartiles,
    argmin_index,
    calibrate,
    ce_for,
    classify,
    delta_er,
    group_responses,
    impute_windows,
    ingest_external_responses,
    value_columns,
)
from .io import (
    WindowsFile,
    atomic_write_bytes,
    config_hash,
    load_checkpoint,
    read_csv,
    save_checkpoint,
    write_csv,
    write_windows,
)
from .metrics import SCORE_FIELDS, ScoredPair, combined_error_batch, cts_batch, prompt_error, relational_error
from .tasks import ALL_TASKS, TaskKind, assemble_prompt

log = logging.getLogger("relhallu")

SCORE_HEADER = ["window_id", "task", "model", *SCORE_FIELDS]


def _out(cfg, name):
    path = Path(cfg.output_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _hash(cfg):
    return config_hash(cfg.hash_payload())


def _evenly(n, k):
    """``k`` evenly spaced indices out of ``n`` (all of them when ``k`` is None or >= n)."""
    if k is None or k >= n:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, k).round().astype(int))


# --- commands -------------------------------------------------------------------


def cmd_synth_source(cfg, rows, out=None):
    """Write a stand-in source CSV shaped like the public file for ``cfg.dataset``."""
    frame = synthesize_source(cfg.dataset, rows, cfg.seed)
    path = Path(out) if out else _out(cfg, f"{cfg.dataset}_source.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(path, frame.to_csv(index=False).encode())
    return path


def cmd_build_dataset(cfg):
    if cfg.dataset.lower() == "synthetic2d":
        ds = make_synthetic2d(cfg.n_points, cfg.noise_std, cfg.seed)
        split = split_chrono(len(ds), tuple(cfg.split_ratio))
    else:
        kind = dataset_kind(cfg.dataset)
        raw = load_source_csv(
            cfg.source,
            cfg.columns or kind.columns,
            cfg.timestamp_col,
            tuple(cfg.scales) if cfg.scales else kind.scales,
        )
        ds = build_relational(raw, cfg.dataset, cfg.window_len, cfg.stride)
        overlap = ds.stride < ds.window_len
        if len(ds) < sum(cfg.split_ratio):
            log.warning("only %d windows; too few to split, all labelled 'none'", len(ds))
            split = SplitSpec((0, 0), (0, 0), (0, 0))
        else:
            split = split_chrono(
                len(ds),
                tuple(cfg.split_ratio),
                ds.starts if overlap else None,
                ds.window_len if overlap else None,
            )
    path = _out(cfg, "windows.csv")
    write_windows(path, ds, split, _hash(cfg))
    log.info("wrote %d windows to %s", len(ds), path)
    return path


def cmd_train(cfg, windows_path):
    wf = WindowsFile(windows_path)
    train_x, _ = wf.split("train")
    val_x, _ = wf.split("val")
    if len(train_x) == 0 or len(val_x) == 0:
        raise DataError(f"{windows_path}: needs both train and val windows to train")
    norm = Normalizer.fit(train_x, wf.n_vars, wf.window_len)
    tc = cfg.train_config()
    model = build_model(
        train_x.shape[1], tc, make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end), norm
    )
    model.meta = {"dataset": wf.name, "seed": cfg.seed, "config_hash": _hash(cfg)}
    ckpt = _out(cfg, "model.ckpt")
    last_saved = [-math.inf]

    def on_epoch(epoch, hist, best_net, improved):
        if improved and epoch - last_saved[0] >= cfg.save_interval:
            snap = DiffusionModel(best_net, model.schedule, norm, model.dim, True, model.meta)
            save_checkpoint(ckpt, snap)
            last_saved[0] = epoch

    hist = train_diffusion(model, norm.normalize(train_x), norm.normalize(val_x), tc, on_epoch)
    save_checkpoint(ckpt, model)
    write_csv(
        _out(cfg, "training_curve.csv"),
        ["epoch", "step", "train_loss", "val_loss", "lr"],
        hist.rows,
        _hash(cfg),
    )
    cfg.save(_out(cfg, "run_config.json"))
    log.info("best val loss %.6f at epoch %d", hist.best_val, hist.best_epoch)
    return ckpt, hist


def _load_model(path):
    model, header = load_checkpoint(path)
    return model


def cmd_impute(cfg, checkpoint, windows_path, tasks=ALL_TASKS, split="test", samples=1):
    """DM responses for windows of ``split``, written in the external-response schema."""
    model = _load_model(checkpoint)
    wf = WindowsFile(windows_path)
    windows, ids = wf.split(split)
    pick = _evenly(len(ids), cfg.max_eval_windows)
    windows, ids = windows[pick], ids[pick]
    rows = []
    for task in tasks:
        t_idx = ALL_TASKS.index(task)
        if samples == 1:
            out, _ = impute_windows(model, windows, task, cfg.seed, ids=ids)
            rows += [[wid, task.value, "dm", 0, *x] for wid, x in zip(ids, out)]
            continue
        for w, wid in zip(windows, ids):
            p = assemble_prompt(w, task, wf.n_vars, wf.window_len)
            rngs = [row_rngs(cfg.seed, IMPUTE_STREAM, t_idx, int(wid), j) for j in range(samples)]
            out = impute_many(model, [p] * samples, rngs)
            rows += [[wid, task.value, "dm", 0, *x] for x in out]
    path = _out(cfg, "responses.csv")
    write_csv(path, ["window_id", "task", "model", "sample_group", *value_columns(model.dim)], rows, _hash(cfg))
    return path


def _windows_by_id(wf):
    return {str(i): w for i, w in zip(wf.ids, wf.windows)}


def score_responses(cfg, model, report, wf=None):
    relation = relation_for(model.meta.get("dataset", wf.name if wf else ""))
    resp = report.responses
    if not resp:
        return []
    vals = np.array([r.values for r in resp])
    ce = ce_for(model, vals, cfg.seed, [(r.line,) for r in resp], draws=cfg.ce_draws)
    er = relational_error(vals, relation)
    cts_vals = None
    if cfg.trajectory_metrics:
        cts_vals = cts_batch(model, vals, [row_rngs(cfg.seed, ev.CTS_STREAM, r.line) for r in resp])
    by_id = _windows_by_id(wf) if wf is not None else {}
    n_vars = model.normalizer.n_vars
    pairs = []
    for k, r in enumerate(resp):
        extra = {}
        if r.window_id in by_id:
            p = assemble_prompt(model.normalize(by_id[r.window_id]), r.task, n_vars, model.dim // n_vars)
            if len(p.prompt_indices):
                extra["pe"] = prompt_error(model.normalize(r.values), p)
        if cts_vals is not None:
            extra["cts"] = float(cts_vals[k])
        pairs.append(ScoredPair(r.window_id, r.task, r.model, r.values, float(ce[k]), er=float(er[k]), **extra))
    return pairs


def cmd_score(cfg, checkpoint, responses, windows_path=None):
    model = _load_model(checkpoint)
    wf = WindowsFile(windows_path) if windows_path else None
    report = ingest_external_responses(responses, model.dim)
    pairs = score_responses(cfg, model, report, wf)
    path = _out(cfg, "scores.csv")
    write_csv(path, SCORE_HEADER, (p.row() for p in pairs), _hash(cfg))
    return path, pairs


def cmd_calibrate(cfg, checkpoint, windows_path):
    model = _load_model(checkpoint)
    wf = WindowsFile(windows_path)
    train_x, _ = wf.split("train")
    train_x = train_x[_evenly(len(train_x), cfg.max_calib_windows)]
    q, _ = calibrate(model, train_x, cfg.seed, dataset=wf.name, model_hash=model.meta.get("hash", ""), draws=cfg.ce_draws)
    path = _out(cfg, "calibration.json")
    atomic_write_bytes(path, q.to_json().encode())
    return path, q


def cmd_classify(cfg, calibration, scores_path):
    q = CalibrationQuartiles.from_json(Path(calibration).read_text())
    header, rows = read_csv(scores_path)
    if "ce" not in header:
        raise DataError(f"{scores_path}: no 'ce' column")
    k = header.index("ce")
    out_rows = []
    for r in rows:
        out_rows.append([*r, classify(float(r[k]), q).value])
    path = _out(cfg, "classified.csv")
    write_csv(path, [*header, "level"], out_rows, _hash(cfg))
    return path


def cmd_mitigate(cfg, checkpoint, responses=None, windows_path=None, tasks=ALL_TASKS):
    """Argmin-CE selection over response groups in a file, or over fresh DM samples."""
    model = _load_model(checkpoint)
    relation = relation_for(model.meta.get("dataset", ""))
    header = ["model", "window_id", "task", "sample_group", "n_samples", "selected", "ce_selected", "er_selected", "er_mean", "delta_er"]
    rows = []
    if responses is not None:
        report = ingest_external_responses(responses, model.dim)
        for (mname, wid, task, group), rs in group_responses(report.responses).items():
            vals = np.array([r.values for r in rs])
            ce = ce_for(model, vals, cfg.seed, [(r.line,) for r in rs], draws=cfg.ce_draws)
            er = relational_error(vals, relation)
            j = argmin_index(ce)
            rows.append([mname, wid, task, group, len(rs), j, ce[j], er[j], float(np.mean(er)), delta_er(er, j)])
    else:
        if windows_path is None:
            raise ConfigError("mitigate needs --responses or --windows")
        wf = WindowsFile(windows_path)
        windows, ids = wf.split("test")
        pick = _evenly(len(ids), cfg.mitigation_prompts)
        res = ev.dm_mitigation(
            model, windows[pick], ids[pick], relation, cfg.mitigation_samples, cfg.seed, tasks, draws=cfg.ce_draws
        )
        for task, deltas in res.items():
            for wid, d in zip(ids[pick], deltas):
                rows.append(["dm", wid, task, "", cfg.mitigation_samples, "", "", "", "", d])
    path = _out(cfg, "mitigation.csv")
    write_csv(path, header, rows, _hash(cfg))
    return path, rows


def cmd_benchmark(cfg, checkpoint, windows_path, calibration=None, external=()):
    model = _load_model(checkpoint)
    wf = WindowsFile(windows_path)
    relation = wf.relation
    test_x, test_ids = wf.split("test")
    pick = _evenly(len(test_ids), cfg.max_eval_windows)
    test_x, test_ids = test_x[pick], test_ids[pick]
    by_id = _windows_by_id(wf)
    h = _hash(cfg)

    models = [
        ev.baseline_responses(model.normalizer, test_ids),
        ev.dm_responses(model, test_x, test_ids, cfg.seed, capture=cfg.trajectory_metrics),
    ]
    reports = [ingest_external_responses(p, model.dim) for p in external]
    for rep in reports:
        models += ev.external_model_responses(rep)

    t1_rows, _ = ev.relational_table(models, relation)
    write_csv(
        _out(cfg, "table1.csv"),
        ["model", "task", "er_mean", "er_std", "ratio_to_baseline", "n"],
        t1_rows,
        h,
    )

    if calibration is not None:
        q = CalibrationQuartiles.from_json(Path(calibration).read_text())
    else:
        train_x, _ = wf.split("train")
        train_x = train_x[_evenly(len(train_x), cfg.max_calib_windows)]
        q, _ = calibrate(model, train_x, cfg.seed, dataset=wf.name, model_hash=model.meta.get("hash", ""), draws=cfg.ce_draws)
        atomic_write_bytes(_out(cfg, "calibration.json"), q.to_json().encode())

    scored = {}
    for mr in models:
        pairs = ev.score_model(
            model, mr, relation, cfg.seed, by_id, cfg.trajectory_metrics and mr.name == "dm", cfg.ce_draws
        )
        scored[mr.name] = pairs
        write_csv(_out(cfg, f"scatter_{mr.name}.csv"), SCORE_HEADER, (p.row() for p in pairs), h)

    mit = {"dm": {}}
    m_pick = _evenly(len(test_ids), cfg.mitigation_prompts)
    dm_mit = ev.dm_mitigation(
        model, test_x[m_pick], test_ids[m_pick], relation, cfg.mitigation_samples, cfg.seed, draws=cfg.ce_draws
    )
    mit["dm"] = dm_mit
    for rep in reports:
        for (mname, task), deltas in ev.external_mitigation(model, rep, relation, cfg.seed, cfg.ce_draws).items():
            mit.setdefault(mname, {})[task] = deltas

    t2_rows = []
    for mr in models:
        if mr.name == "baseline":
            continue
        ov, levels = ev.detection_overlap(scored[mr.name], q, cfg.n_bins)
        counts = [sum(1 for lv in levels if lv.value == name) for name in ("low", "medium", "high")]
        row = [mr.name, ov, *counts]
        for task in ALL_TASKS:
            d = mit.get(mr.name, {}).get(task.value, np.array([]))
            row += [ev.nanmean(d), ev.nanstd(d), int(np.isfinite(d).sum())]
        t2_rows.append(row)
    t2_header = ["model", "overlap_coefficient", "n_low", "n_medium", "n_high"]
    for task in ALL_TASKS:
        t2_header += [f"delta_er_{task.value}", f"delta_er_{task.value}_std", f"n_prompts_{task.value}"]
    write_csv(_out(cfg, "table2.csv"), t2_header, t2_rows, h)
    return {"table1": t1_rows, "table2": t2_rows, "quartiles": q, "scored": scored, "mitigation": mit}


def write_pgm(path, grid):
    """8-bit greyscale PGM, darker for lower values. ``grid[iy, ix]`` with iy=0 at the bottom."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = float(g.min()), float(g.max())
    scaled = np.zeros_like(g) if hi == lo else (g - lo) / (hi - lo)
    pix = np.flipud((scaled * 255).round().astype(np.uint8))
    ny, nx = pix.shape
    atomic_write_bytes(path, f"P5\n{nx} {ny}\n255\n".encode() + pix.tobytes())


def heatmap_grid(model, nx, ny, lo=-1.5, hi=1.5, seed=0, draws=0):
    if model.dim != 2:
        raise ConfigError(f"heatmap needs a 2-D model, checkpoint has dimension {model.dim}")
    xs = np.linspace(lo, hi, nx)
    ys = np.linspace(lo, hi, ny)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    rngs = [row_rngs(seed, 15, i) for i in range(len(pts))]
    ce = combined_error_batch(model, pts, rngs, draws).reshape(ny, nx)
    return xs, ys, ce


def cmd_heatmap(cfg, checkpoint, nx=61, ny=61, lo=-1.5, hi=1.5):
    model = _load_model(checkpoint)
    xs, ys, ce = heatmap_grid(model, nx, ny, lo, hi, cfg.seed, cfg.ce_draws)
    rows = [[ix, iy, xs[ix], ys[iy], ce[iy, ix]] for iy in range(ny) for ix in range(nx)]
    csv_path = _out(cfg, "heatmap.csv")
    write_csv(csv_path, ["ix", "iy", "x", "y", "ce"], rows, _hash(cfg))
    img_path = _out(cfg, "heatmap.pgm")
    write_pgm(img_path, ce)
    return csv_path, img_path, ce


# --- argument parsing -----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _scalar(x):
    for conv in (int, float):
        try:
            return conv(x)
        except ValueError:
            pass
    return x


def _field_parser(tp):
    text = str(tp)
    if "list" in text:
        return lambda s: [_scalar(x.strip()) for x in s.split(",") if x.strip()]
    if "int" in text:
        return int
    if "float" in text:
        return float
    return str


def add_config_flags(p):
    p.add_argument("--config", help="JSON or YAML RunConfig file; explicit flags override it")
    hints = typing.get_type_hints(RunConfig)
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if hints[f.name] is bool:
            p.add_argument(flag, dest=f"cfg_{f.name}", action="store_const", const=True, default=None)
        else:
            p.add_argument(flag, dest=f"cfg_{f.name}", type=_field_parser(hints[f.name]), default=None)


def resolve_config(args):
    data = load_config_file(args.config) if getattr(args, "config", None) else {}
    for key, val in vars(args).items():
        if key.startswith("cfg_") and val is not None:
            data[key[4:]] = val
    return RunConfig.from_dict(data)


def build_parser():
    parser = _Parser(prog="relhallu", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        add_config_flags(p)
        return p

    p = cmd("synth-source", "write a stand-in source CSV for a dataset kind")
    p.add_argument("--rows", type=int, default=20000)
    p.add_argument("--out")

    cmd("build-dataset", "build the canonical windows file from a source CSV")

    p = cmd("train", "train the diffusion model")
    p.add_argument("--windows", required=True)

    p = cmd("impute", "answer task prompts with the diffusion model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--windows", required=True)
    p.add_argument("--task", action="append", choices=["oc", "uc", "fc"])
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--samples", type=int, default=1)

    p = cmd("score", "compute CE (and friends) for a response file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--responses", required=True)
    p.add_argument("--windows")

    p = cmd("calibrate", "CE quartiles over training prompts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--windows", required=True)

    p = cmd("classify", "assign low/medium/high levels to scored pairs")
    p.add_argument("--calibration", required=True)
    p.add_argument("--scores", required=True)

    p = cmd("mitigate", "argmin-CE selection over sampled responses")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--responses")
    p.add_argument("--windows")
    p.add_argument("--task", action="append", choices=["oc", "uc", "fc"])

    p = cmd("benchmark", "relational-error and detection/mitigation tables")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--windows", required=True)
    p.add_argument("--calibration")
    p.add_argument("--external", action="append", default=[])

    p = cmd("heatmap", "CE over a 2-D grid for a 2-D model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--nx", type=int, default=61)
    p.add_argument("--ny", type=int, default=61)
    p.add_argument("--lo", type=float, default=-1.5)
    p.add_argument("--hi", type=float, default=1.5)
    return parser


def _tasks(args):
    return tuple(TaskKind.parse(t) for t in args.task) if args.task else ALL_TASKS


def run(args):
    cfg = resolve_config(args)
    c = args.command
    if c == "synth-source":
        print(cmd_synth_source(cfg, args.rows, args.out))
    elif c == "build-dataset":
        print(cmd_build_dataset(cfg))
    elif c == "train":
        ckpt, hist = cmd_train(cfg, args.windows)
        print(ckpt)
    elif c == "impute":
        print(cmd_impute(cfg, args.checkpoint, args.windows, _tasks(args), args.split, args.samples))
    elif c == "score":
        print(cmd_score(cfg, args.checkpoint, args.responses, args.windows)[0])
    elif c == "calibrate":
        path, q = cmd_calibrate(cfg, args.checkpoint, args.windows)
        print(path)
    elif c == "classify":
        print(cmd_classify(cfg, args.calibration, args.scores))
    elif c == "mitigate":
        print(cmd_mitigate(cfg, args.checkpoint, args.responses, args.windows, _tasks(args))[0])
    elif c == "benchmark":
        cmd_benchmark(cfg, args.checkpoint, args.windows, args.calibration, args.external)
        for name in ("table1.csv", "table2.csv"):
            print(Path(cfg.output_dir) / name)
    elif c == "heatmap":
        csv_path, img_path, _ = cmd_heatmap(cfg, args.checkpoint, args.nx, args.ny, args.lo, args.hi)
        print(csv_path)
        print(img_path)
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return run(args)
    except RelhalluError as exc:
        print(f"relhallu: {exc}", file=sys.stderr)
        return exc.exit_code
    except (json.JSONDecodeError, OSError) as exc:
        print(f"relhallu: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
