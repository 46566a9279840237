"""Rank-based calibration of uncertainty scores (ECE@K).

Protocol: percentile-clamp the scores, partition them into M bins
(equal-width over the clamped range by default, or near-equal-count
quantile bins), anchor each bin to an expected success level
C(B_i) = (M - i) / (M - 1), and accumulate the mass-weighted absolute
gap between observed per-bin recall and the anchor.

Percentile convention (used identically by the fast path and the
brute-force oracle): inclusive order statistics -- the high bound is the
sorted value at index floor((n - 1) * p / 100), the low bound at
ceil((n - 1) * p / 100).  Linear interpolation would place the bound
between two order statistics, and re-clamping would then pull the bound
inward; taking the order statistic on the retained side makes clamping
exactly idempotent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

CLAMP_LOW_PCT = 1.0
CLAMP_HIGH_PCT = 99.0


class BinStrategy(str, Enum):
    EQUAL_WIDTH = "equal_width"
    QUANTILE = "quantile"


class ClampMode(str, Enum):
    TWO_SIDED = "two_sided"
    ONE_SIDED_HIGH = "one_sided_high"
    NONE = "none"


@dataclass
class BinningConfig:
    num_bins: int = 10
    strategy: BinStrategy = BinStrategy.EQUAL_WIDTH
    clamp: ClampMode = ClampMode.TWO_SIDED

    def __post_init__(self):
        if self.num_bins < 2:
            raise ValueError("need at least 2 bins")


def _percentile_high(sorted_vals: np.ndarray, pct: float) -> float:
    """High-tail order statistic: sorted value at floor((n-1) * p / 100)."""
    n = len(sorted_vals)
    return float(sorted_vals[int(math.floor((n - 1) * pct / 100.0))])


def _percentile_low(sorted_vals: np.ndarray, pct: float) -> float:
    """Low-tail order statistic: sorted value at ceil((n-1) * p / 100)."""
    n = len(sorted_vals)
    return float(sorted_vals[int(math.ceil((n - 1) * pct / 100.0))])


def clamp_values(values, config: BinningConfig):
    """Percentile-clamp scores; returns (clamped array, (low, high) bounds).

    Bounds are None where the mode leaves that tail open.  Idempotent:
    clamping already-clamped values is a no-op.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values to clamp")
    if config.clamp is ClampMode.NONE:
        return v.copy(), (None, None)
    s = np.sort(v)
    high = _percentile_high(s, CLAMP_HIGH_PCT)
    low = None
    out = np.minimum(v, high)
    if config.clamp is ClampMode.TWO_SIDED:
        low = _percentile_low(s, CLAMP_LOW_PCT)
        out = np.maximum(out, low)
    return out, (low, high)


def bin_assign(values, config: BinningConfig) -> np.ndarray:
    """Assign each value a bin index 1..M (1 = most certain / lowest score).

    Equal-width: M equal intervals over [min, max] of the values; a value
    on an interior edge goes to the upper bin; all-equal values land in
    bin 1.  Quantile: stable sort, then M contiguous groups with sizes as
    equal as possible (earlier groups take the remainder).
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values to bin")
    m = config.num_bins
    if config.strategy is BinStrategy.QUANTILE:
        order = np.argsort(v, kind="stable")
        bins = np.empty(len(v), dtype=np.int64)
        n = len(v)
        base, extra = divmod(n, m)
        start = 0
        for i in range(m):
            size = base + (1 if i < extra else 0)
            bins[order[start:start + size]] = i + 1
            start += size
        return bins
    lo = float(v.min())
    hi = float(v.max())
    if hi == lo:
        return np.ones(len(v), dtype=np.int64)
    edges = lo + (hi - lo) * (np.arange(1, m) / m)
    return np.searchsorted(edges, v, side="right").astype(np.int64) + 1


def expected_level(i: int, m: int) -> float:
    """Rank-anchored expectation C(B_i) = (M - i)/(M - 1); C(1)=1, C(M)=0."""
    if m < 2:
        raise ValueError("need at least 2 bins")
    if not 1 <= i <= m:
        raise ValueError(f"bin index {i} out of range 1..{m}")
    return (m - i) / (m - 1)


@dataclass
class CalibrationReport:
    method: str
    k: int
    num_bins: int
    strategy: BinStrategy
    clamp: ClampMode
    clamp_bounds: tuple
    bin_counts: list
    bin_observed: list       # None for empty bins
    bin_expected: list
    ece: float
    total: int
    level: str = "query"     # "query" or "match"

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "k": self.k,
            "level": self.level,
            "num_bins": self.num_bins,
            "strategy": self.strategy.value,
            "clamp": self.clamp.value,
            "clamp_bounds": list(self.clamp_bounds),
            "bin_counts": self.bin_counts,
            "bin_observed": self.bin_observed,
            "bin_expected": self.bin_expected,
            "ece": self.ece,
            "total": self.total,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def csv_rows(self):
        """One row per bin: (bin, count, observed, expected)."""
        for i in range(self.num_bins):
            yield (i + 1, self.bin_counts[i], self.bin_observed[i],
                   self.bin_expected[i])


def _ece_core(scores, flags, config: BinningConfig):
    """Shared fast path: clamp, bin, aggregate. Returns report pieces."""
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags, dtype=np.float64)
    if scores.shape != flags.shape:
        raise ValueError("scores and success flags length mismatch")
    clamped, bounds = clamp_values(scores, config)
    bins = bin_assign(clamped, config)
    m = config.num_bins
    n = len(scores)
    counts, observed, expected = [], [], []
    ece = 0.0
    for i in range(1, m + 1):
        mask = bins == i
        cnt = int(mask.sum())
        exp = expected_level(i, m)
        counts.append(cnt)
        expected.append(exp)
        if cnt == 0:
            observed.append(None)
            continue
        obs = float(flags[mask].mean())
        observed.append(obs)
        ece += (cnt / n) * abs(obs - exp)
    return bounds, counts, observed, expected, ece, n


def ece_at_k(scored_queries, successes, config: BinningConfig,
             k: int = 1, method: str = "") -> CalibrationReport:
    """Query-level ECE@K from per-query scores and success-at-K flags."""
    scores = np.asarray([getattr(s, "score", s) for s in scored_queries],
                        dtype=np.float64)
    bounds, counts, observed, expected, ece, n = _ece_core(scores, successes, config)
    return CalibrationReport(
        method=method, k=k, num_bins=config.num_bins, strategy=config.strategy,
        clamp=config.clamp, clamp_bounds=bounds, bin_counts=counts,
        bin_observed=observed, bin_expected=expected, ece=ece, total=n,
        level="query",
    )


def match_ece_at_k(scored_pairs, k: int, n_queries: int,
                   config: BinningConfig, method: str = "") -> CalibrationReport:
    """Match-level ECE@K over the T = K * N retrieved pairs.

    Each pair is binned by its match uncertainty; per-bin accuracy is the
    fraction of ground-truth-positive pairs.
    """
    t = k * n_queries
    if len(scored_pairs) != t:
        raise ValueError(f"expected {t} = K*N pairs, got {len(scored_pairs)}")
    scores = np.asarray([p.score for p in scored_pairs], dtype=np.float64)
    flags = np.asarray([p.is_positive for p in scored_pairs], dtype=np.float64)
    bounds, counts, observed, expected, ece, _ = _ece_core(scores, flags, config)
    return CalibrationReport(
        method=method, k=k, num_bins=config.num_bins, strategy=config.strategy,
        clamp=config.clamp, clamp_bounds=bounds, bin_counts=counts,
        bin_observed=observed, bin_expected=expected, ece=ece, total=t,
        level="match",
    )


def ece_bruteforce_oracle(scores, flags, config: BinningConfig) -> float:
    """Independent naive re-computation of the ECE value: pure-Python
    sorting, clamping, partitioning, and per-bin recounting.  Shares no
    code with the fast path; used for exact-equality testing.
    """
    vals = [float(x) for x in np.asarray(scores, dtype=np.float64)]
    succ = [float(x) for x in np.asarray(flags, dtype=np.float64)]
    if len(vals) != len(succ) or not vals:
        raise ValueError("bad inputs")
    n = len(vals)
    m = config.num_bins

    # clamping (same inclusive order-statistic convention as the fast path)
    if config.clamp is not ClampMode.NONE:
        svals = sorted(vals)
        hi_b = svals[int(math.floor((n - 1) * 99.0 / 100.0))]
        vals = [min(x, hi_b) for x in vals]
        if config.clamp is ClampMode.TWO_SIDED:
            lo_b = svals[int(math.ceil((n - 1) * 1.0 / 100.0))]
            vals = [max(x, lo_b) for x in vals]

    # partitioning
    assignment = [0] * n
    if config.strategy is BinStrategy.QUANTILE:
        order = sorted(range(n), key=lambda idx: vals[idx])
        pos = 0
        for i in range(m):
            size = n // m + (1 if i < n % m else 0)
            for j in order[pos:pos + size]:
                assignment[j] = i + 1
            pos += size
    else:
        lo = min(vals)
        hi = max(vals)
        if hi == lo:
            assignment = [1] * n
        else:
            for j, x in enumerate(vals):
                b = m
                for i in range(1, m):
                    if x < lo + (hi - lo) * (i / m):
                        b = i
                        break
                assignment[j] = b

    # per-bin recount
    ece = 0.0
    for i in range(1, m + 1):
        members = [j for j in range(n) if assignment[j] == i]
        if not members:
            continue
        acc = sum(succ[j] for j in members) / len(members)
        expected = (m - i) / (m - 1)
        ece += (len(members) / n) * abs(acc - expected)
    return ece


def reliability_svg(report: CalibrationReport, width: int = 420,
                    height: int = 420) -> str:
    """Minimal deterministic SVG: observed recall vs expected level per bin,
    with the identity diagonal."""
    pad = 40
    span = min(width, height) - 2 * pad

    def sx(x):
        return pad + x * span

    def sy(y):
        return height - pad - y * span

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect x="{pad}" y="{height - pad - span}" width="{span}" height="{span}" '
        'fill="none" stroke="#888"/>',
        f'<line x1="{sx(0)}" y1="{sy(0)}" x2="{sx(1)}" y2="{sy(1)}" '
        'stroke="#bbb" stroke-dasharray="4 3"/>',
    ]
    pts = []
    for i in range(report.num_bins):
        obs = report.bin_observed[i]
        if obs is None:
            continue
        exp = report.bin_expected[i]
        pts.append((sx(exp), sy(obs)))
        parts.append(f'<circle cx="{sx(exp):.2f}" cy="{sy(obs):.2f}" r="4" '
                     'fill="#1f77b4"/>')
    if len(pts) > 1:
        path = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        parts.append(f'<polyline points="{path}" fill="none" stroke="#1f77b4"/>')
    parts.append(
        f'<text x="{pad}" y="{pad - 12}" font-size="13" font-family="sans-serif">'
        f'{report.method} ECE@{report.k} = {report.ece:.4f}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
