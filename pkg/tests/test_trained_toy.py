"""Properties of a DM trained on the synthetic sin manifold (shares the toy model)."""

import numpy as np
import pytest

from relhallu import cli
from relhallu.datasets import RELATIONS
from relhallu.diffusion import PromptSpec, impute_many, row_rngs
from relhallu.halluc import mitigate

pytestmark = pytest.mark.slow


def test_repaint_lands_near_curve(toy_model):
    model, _ = toy_model
    xs = np.random.default_rng(11).uniform(-0.9, 0.9, 100)
    prompts = [PromptSpec(2, [0], [x]) for x in xs]
    out = impute_many(model, prompts, row_rngs(0, 40, n=100))
    assert np.array_equal(out[:, 0], xs)
    dist = np.abs(out[:, 1] - np.sin(2 * np.pi * xs))
    assert np.mean(dist <= 3 * 0.05) >= 0.9


def test_heatmap_minimum_follows_curve(toy_model):
    model, _ = toy_model
    xs, ys, ce = cli.heatmap_grid(model, 61, 61)
    cols = np.flatnonzero(np.abs(xs) <= 1.0)  # the data only cover x in [-1, 1]
    step = ys[1] - ys[0]
    hits = 0
    for ix in cols:
        true_iy = np.argmin(np.abs(ys - np.sin(2 * np.pi * xs[ix])))
        hits += abs(int(np.argmin(ce[:, ix])) - int(true_iy)) <= 2
    assert hits / len(cols) >= 0.8, (hits, len(cols), step)


def test_mitigation_prefers_on_manifold_samples(toy_model):
    model, _ = toy_model
    deltas = []
    for k, x in enumerate(np.linspace(-0.8, 0.8, 20)):
        res = mitigate(model, PromptSpec(2, [0], [x]), 10, row_rngs(0, 41, k), relation=RELATIONS["sine"])
        deltas.append(res.delta_er)
    assert np.nanmean(deltas) < 1
