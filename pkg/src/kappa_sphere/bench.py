"""Latency benchmark: descriptor path vs descriptor + kappa path.

The descriptor path mirrors a retrieval aggregation stack (per-position
L2 normalization, GeM pooling, linear projection to the descriptor).
The kappa path adds the concentration head on the already-pooled
vector, which is how the head is deployed: aggregation work is shared,
the head only appends two small linear maps and a softplus.

Protocol: fixed number of warmup runs, then timed runs, reporting the
mean wall-clock latency of each path and the relative overhead.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .head import HeadParams, HeadVariant, softplus

WARMUP_RUNS = 20
TIMED_RUNS = 200

# realistic backbone output: 512 channels on a 7x7 grid, 512-d descriptor
DEFAULT_CHANNELS = 512
DEFAULT_GRID = 7
DEFAULT_DESCRIPTOR_DIM = 512
DEFAULT_HIDDEN = 64


@dataclass
class BenchResult:
    descriptor_ms: float
    combined_ms: float
    overhead: float            # (combined - descriptor) / descriptor
    channels: int
    grid: int
    descriptor_dim: int
    warmup_runs: int
    timed_runs: int

    def to_dict(self) -> dict:
        return {
            "descriptor_ms": self.descriptor_ms,
            "combined_ms": self.combined_ms,
            "overhead": self.overhead,
            "channels": self.channels,
            "grid": self.grid,
            "descriptor_dim": self.descriptor_dim,
            "warmup_runs": self.warmup_runs,
            "timed_runs": self.timed_runs,
        }


def _aggregate(fm, gem_p, proj):
    """Shared aggregation: normalize positions, GeM pool, project."""
    norms = np.linalg.norm(fm, axis=0, keepdims=True)
    u = fm / np.maximum(norms, 1e-12)
    s = np.maximum(u, 0.0)
    g = np.mean(s ** gem_p, axis=(1, 2)) ** (1.0 / gem_p)
    z = proj @ g
    z /= np.linalg.norm(z)
    return z, g


def _kappa_from_pooled(g, head: HeadParams) -> float:
    hid = head.proj_w @ g
    return float(softplus(hid @ head.kappa_w + head.kappa_b))


def run_bench(channels: int = DEFAULT_CHANNELS, grid: int = DEFAULT_GRID,
              descriptor_dim: int = DEFAULT_DESCRIPTOR_DIM,
              hidden: int = DEFAULT_HIDDEN, seed: int = 0,
              warmup_runs: int = WARMUP_RUNS,
              timed_runs: int = TIMED_RUNS) -> BenchResult:
    """Time the descriptor path and the descriptor + kappa path."""
    rng = np.random.default_rng(seed)
    fm = rng.standard_normal((channels, grid, grid))
    proj = rng.standard_normal((descriptor_dim, channels)) / np.sqrt(channels)
    head = HeadParams(
        gem_p=3.0,
        proj_w=rng.standard_normal((hidden, channels)) / np.sqrt(channels),
        kappa_w=rng.standard_normal(hidden) / np.sqrt(hidden),
        kappa_b=0.0,
        variant=HeadVariant.AGGREGATION,
    )

    def descriptor_path():
        _aggregate(fm, head.gem_p, proj)

    def combined_path():
        _, g = _aggregate(fm, head.gem_p, proj)
        _kappa_from_pooled(g, head)

    timings = []
    for fn in (descriptor_path, combined_path):
        for _ in range(warmup_runs):
            fn()
        start = time.perf_counter()
        for _ in range(timed_runs):
            fn()
        timings.append((time.perf_counter() - start) / timed_runs * 1e3)

    desc_ms, comb_ms = timings
    return BenchResult(
        descriptor_ms=desc_ms, combined_ms=comb_ms,
        overhead=(comb_ms - desc_ms) / desc_ms,
        channels=channels, grid=grid, descriptor_dim=descriptor_dim,
        warmup_runs=warmup_runs, timed_runs=timed_runs,
    )
