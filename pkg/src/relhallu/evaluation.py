"""Benchmark protocols: relational error per model/task, detection overlap, mitigation gain."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import impute_many, row_rngs
from .halluc import (
    CE_STREAM,
    HallucinationLevel,
    argmin_index,
    baseline_respond,
    ce_for,
    classify,
    delta_er,
    group_responses,
    impute_windows,
)
from .metrics import (
    ScoredPair,
    TrajectoryRecord,
    combined_error_batch,
    cts_batch,
    overlap_coefficient,
    prompt_error,
    pts,
    relational_error,
    rts,
    trajectory_variance,
)
from .tasks import ALL_TASKS, TaskKind, assemble_prompt

MITIGATE_STREAM = 13
CTS_STREAM = 14


@dataclass
class ModelResponses:
    """Responses of one model on a set of test windows, per task."""

    name: str
    responses: dict = field(default_factory=dict)  # task -> (n, d)
    ids: dict = field(default_factory=dict)  # task -> window ids
    trajectories: dict = field(default_factory=dict)  # task -> (T, n, d), DM only


def dm_responses(model, windows, ids, seed, tasks=ALL_TASKS, capture=False):
    out = ModelResponses("dm")
    for task in tasks:
        res = impute_windows(model, windows, task, seed, ids=ids, capture=capture)
        out.responses[task.value] = res[0]
        out.ids[task.value] = np.asarray(ids)
        if capture:
            out.trajectories[task.value] = res[2]
    return out


def baseline_responses(normalizer, ids, tasks=ALL_TASKS):
    out = ModelResponses("baseline")
    mean = baseline_respond(normalizer)
    for task in tasks:
        out.responses[task.value] = np.tile(mean, (len(ids), 1))
        out.ids[task.value] = np.asarray(ids)
    return out


def external_model_responses(report):
    """Split ingested rows into one ModelResponses per model tag (first sample of each group)."""
    by_model = {}
    for (model, wid, task, _group), rows in group_responses(report.responses).items():
        mr = by_model.setdefault(model, ModelResponses(model, {}, {}))
        mr.responses.setdefault(task, []).append(rows[0].values)
        mr.ids.setdefault(task, []).append(wid)
    for mr in by_model.values():
        for task in list(mr.responses):
            mr.responses[task] = np.array(mr.responses[task])
            mr.ids[task] = np.array(mr.ids[task])
    return list(by_model.values())


def relational_table(models, relation):
    """Rows ``(model, task, mean, std, ratio_to_baseline, n)``."""
    er = {
        m.name: {t: relational_error(r, relation) for t, r in m.responses.items()} for m in models
    }
    base = er.get("baseline", {})
    rows = []
    for m in models:
        for task in (t.value for t in ALL_TASKS):
            if task not in er[m.name]:
                continue
            vals = er[m.name][task]
            mean = float(np.mean(vals))
            ratio = math.nan
            if task in base and np.mean(base[task]) > 0:
                ratio = mean / float(np.mean(base[task]))
            rows.append((m.name, task, mean, float(np.std(vals)), ratio, len(vals)))
    return rows, er


def score_model(model, mr, relation, seed, windows_by_id=None, trajectory_metrics=False, draws=0):
    """ScoredPairs for every response of ``mr``.

    CE, PE and trajectory metrics are in the diffusion model's normalized units; E_r in
    original units. PE needs the true prompt, looked up in ``windows_by_id``.
    """
    pairs = []
    for t_idx, task in enumerate(t.value for t in ALL_TASKS):
        if task not in mr.responses:
            continue
        resp = mr.responses[task]
        ids = mr.ids[task]
        ce = ce_for(model, resp, seed, [(t_idx, _id_key(i)) for i in ids], draws=draws)
        er = relational_error(resp, relation)
        z = model.normalize(resp)
        traj = mr.trajectories.get(task)
        cts_vals = None
        if trajectory_metrics:
            rngs = [row_rngs(seed, CTS_STREAM, t_idx, _id_key(i)) for i in ids]
            cts_vals = cts_batch(model, resp, rngs)
        n_vars = model.normalizer.n_vars
        L = resp.shape[1] // n_vars
        for k, wid in enumerate(ids):
            extra = {}
            if windows_by_id is not None and str(wid) in windows_by_id:
                true_w = windows_by_id[str(wid)]
                prompt_z = assemble_prompt(model.normalize(true_w), task, n_vars, L)
                if len(prompt_z.prompt_indices):
                    extra["pe"] = prompt_error(z[k], prompt_z)
                if traj is not None:
                    rec = TrajectoryRecord(traj[:, k, :])
                    extra["tv"] = trajectory_variance(rec)
                    if len(prompt_z.response_indices):
                        extra["rts"] = rts(rec, prompt_z.response_indices)
                    if len(prompt_z.prompt_indices):
                        extra["pts"] = pts(rec, prompt_z)
            if cts_vals is not None:
                extra["cts"] = float(cts_vals[k])
            pairs.append(
                ScoredPair(str(wid), task, mr.name, resp[k], float(ce[k]), er=float(er[k]), **extra)
            )
    return pairs


def _id_key(wid):
    """Integer seed key for a window id (numeric ids map to themselves)."""
    try:
        return int(wid)
    except (TypeError, ValueError):
        return int.from_bytes(str(wid).encode()[:8].ljust(8, b"\0"), "little")


def detection_overlap(pairs, quartiles, n_bins=50):
    """Overlap coefficient between E_r of pairs classified Low and High. NaN if a class is empty."""
    levels = [classify(p.ce, quartiles) for p in pairs]
    low = [p.er for p, lv in zip(pairs, levels) if lv is HallucinationLevel.LOW]
    high = [p.er for p, lv in zip(pairs, levels) if lv is HallucinationLevel.HIGH]
    if not low or not high:
        return math.nan, levels
    return overlap_coefficient(low, high, n_bins), levels


def dm_mitigation(model, windows, ids, relation, n_samples, seed, tasks=ALL_TASKS, batch=256, draws=0):
    """Delta-E_r for each prompt and task; samples are seeded per (task, window, sample)."""
    n_vars = model.normalizer.n_vars
    L = windows.shape[1] // n_vars
    out = {}
    for task in tasks:
        t_idx = ALL_TASKS.index(task)
        prompts, rngs, ce_rngs = [], [], []
        for w, wid in zip(windows, ids):
            p = assemble_prompt(w, task, n_vars, L)
            for j in range(n_samples):
                prompts.append(p)
                rngs.append(row_rngs(seed, MITIGATE_STREAM, t_idx, _id_key(wid), j))
                ce_rngs.append(row_rngs(seed, CE_STREAM + 100, t_idx, _id_key(wid), j))
        samples = np.concatenate(
            [impute_many(model, prompts[a : a + batch], rngs[a : a + batch]) for a in range(0, len(prompts), batch)]
        )
        ce = combined_error_batch(model, samples, ce_rngs, draws).reshape(len(ids), n_samples)
        er = relational_error(samples, relation).reshape(len(ids), n_samples)
        deltas = []
        for k in range(len(ids)):
            deltas.append(delta_er(er[k], argmin_index(ce[k])))
        out[task.value] = np.array(deltas)
    return out


def external_mitigation(model, report, relation, seed, draws=0):
    """Delta-E_r per (model, task) over externally supplied sample groups (size >= 2)."""
    out = {}
    for (mname, wid, task, group), rows in group_responses(report.responses).items():
        if len(rows) < 2:
            continue
        vals = np.array([r.values for r in rows])
        ce = ce_for(model, vals, seed, [(r.line,) for r in rows], draws=draws)
        er = relational_error(vals, relation)
        out.setdefault((mname, task), []).append(delta_er(er, argmin_index(ce)))
    return {k: np.array(v) for k, v in out.items()}


def nanmean(a):
    a = np.asarray(a, dtype=np.float64)
    a = a[np.isfinite(a)]
    return float(a.mean()) if a.size else math.nan


def nanstd(a):
    a = np.asarray(a, dtype=np.float64)
    a = a[np.isfinite(a)]
    return float(a.std()) if a.size else math.nan
