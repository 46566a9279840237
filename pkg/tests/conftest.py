"""Shared fixtures.

The default-scene post-training sweep (5 seeds) backs several acceptance
criteria; it is computed once per session and cached.
"""

import time

import numpy as np
import pytest

from kappa_sphere import scores as sc
from kappa_sphere.pipeline import fit_head, scene_query_evaluation
from kappa_sphere.synth import SceneConfig, generate_scene

SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="session")
def default_scene_sweep():
    """Post-train and evaluate the default scene for seeds 0..4.

    Returns a list of dicts with the per-seed resultant/L2 ECE@1,
    Spearman correlation, and the fitted artifacts.
    """
    rows = []
    for seed in SEEDS:
        start = time.perf_counter()
        dataset = generate_scene(SceneConfig(seed=seed))
        head, history = fit_head(dataset)
        ev = scene_query_evaluation(dataset, head, ks=(1,))
        elapsed = time.perf_counter() - start
        rows.append({
            "elapsed": elapsed,
            "seed": seed,
            "dataset": dataset,
            "head": head,
            "history": history,
            "evaluation": ev,
            "resultant_ece1": ev.reports[(sc.METHOD_RESULTANT, 1)].ece,
            "l2_ece1": ev.reports[(sc.METHOD_L2, 1)].ece,
            "spearman": ev.spearman_kappa,
        })
    return rows


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
