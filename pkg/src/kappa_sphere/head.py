"""The concentration head: a lightweight regressor from a feature map to
a strictly positive scalar kappa.

Two variants:

* ``AGGREGATION`` mirrors a retrieval aggregation stack: per-position L2
  channel normalization -> GeM pooling over space -> flatten -> linear
  projection -> linear-to-scalar -> softplus.
* ``LINEAR_ONLY`` is the ablation: flatten -> linear-to-scalar -> softplus.

Forward and backward are hand-written numpy; every gradient is checked
against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

_NORM_EPS = 1e-12


class HeadVariant(str, Enum):
    AGGREGATION = "aggregation"
    LINEAR_ONLY = "linear_only"


def check_feature_map(fm) -> np.ndarray:
    fm = np.asarray(fm, dtype=np.float64)
    if fm.ndim != 3 or fm.shape[0] < 1 or fm.shape[1] * fm.shape[2] < 1:
        raise ValueError(f"feature map must have shape (c, h, w), got {fm.shape}")
    if not np.all(np.isfinite(fm)):
        raise ValueError("feature map contains non-finite entries")
    return fm


@dataclass
class HeadParams:
    """Parameters of the kappa regressor."""

    gem_p: float
    proj_w: np.ndarray | None   # (hidden, channels); unused by LINEAR_ONLY
    kappa_w: np.ndarray         # (hidden,) or (c*h*w,) for LINEAR_ONLY
    kappa_b: float
    variant: HeadVariant = HeadVariant.AGGREGATION
    train_gem_p: bool = False   # GeM exponent is fixed by default

    def __post_init__(self):
        if self.gem_p < 1.0 or not np.isfinite(self.gem_p):
            raise ValueError(f"gem_p must be finite and >= 1, got {self.gem_p}")
        self.kappa_w = np.asarray(self.kappa_w, dtype=np.float64)
        if self.proj_w is not None:
            self.proj_w = np.asarray(self.proj_w, dtype=np.float64)

    def copy(self) -> "HeadParams":
        return HeadParams(
            gem_p=float(self.gem_p),
            proj_w=None if self.proj_w is None else self.proj_w.copy(),
            kappa_w=self.kappa_w.copy(),
            kappa_b=float(self.kappa_b),
            variant=self.variant,
            train_gem_p=self.train_gem_p,
        )


@dataclass
class HeadGrads:
    gem_p: float
    proj_w: np.ndarray | None
    kappa_w: np.ndarray
    kappa_b: float


def init_head(
    feature_shape,
    hidden: int = 64,
    variant: HeadVariant = HeadVariant.AGGREGATION,
    gem_p: float = 3.0,
    rng=None,
) -> HeadParams:
    """Small random initialization scaled by fan-in."""
    rng = np.random.default_rng(rng)
    c, h, w = feature_shape
    if variant is HeadVariant.AGGREGATION:
        proj_w = rng.standard_normal((hidden, c)) / np.sqrt(c)
        kappa_w = rng.standard_normal(hidden) / np.sqrt(hidden)
    else:
        proj_w = None
        kappa_w = rng.standard_normal(c * h * w) / np.sqrt(c * h * w)
    return HeadParams(gem_p=gem_p, proj_w=proj_w, kappa_w=kappa_w, kappa_b=0.0,
                      variant=variant)


def softplus(x):
    """Overflow-safe ln(1 + e^x)."""
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gem_pool(fm, p: float) -> np.ndarray:
    """Generalized-mean pooling per channel: (mean over space of max(x,0)^p)^(1/p).

    p=1 is average pooling of the clipped map; p -> inf approaches max.
    """
    fm = check_feature_map(fm)
    if not np.isfinite(p) or p < 1.0:
        raise ValueError(f"p must be finite and >= 1, got {p}")
    clipped = np.maximum(fm, 0.0)
    return np.mean(clipped ** p, axis=(1, 2)) ** (1.0 / p)


def _normalize_positions(fm_batch):
    """L2-normalize the channel vector at every spatial position; batched."""
    norms = np.linalg.norm(fm_batch, axis=1, keepdims=True)
    return fm_batch / np.maximum(norms, _NORM_EPS)


def forward_batch(fms, params: HeadParams):
    """Forward pass for a (n, c, h, w) batch. Returns (kappas, cache)."""
    fms = np.asarray(fms, dtype=np.float64)
    if fms.ndim != 4:
        raise ValueError(f"expected (n, c, h, w) batch, got shape {fms.shape}")
    n = fms.shape[0]
    cache = {"fms": fms}
    if params.variant is HeadVariant.LINEAR_ONLY:
        flat = fms.reshape(n, -1)
        if flat.shape[1] != params.kappa_w.shape[0]:
            raise ValueError(
                f"feature size {flat.shape[1]} does not match head "
                f"weights {params.kappa_w.shape[0]}"
            )
        pre = flat @ params.kappa_w + params.kappa_b
        cache.update(flat=flat, pre=pre)
        return softplus(pre), cache

    if params.proj_w is None:
        raise ValueError("aggregation variant requires proj_w")
    if fms.shape[1] != params.proj_w.shape[1]:
        raise ValueError(
            f"channel count {fms.shape[1]} does not match proj_w {params.proj_w.shape}"
        )
    u = _normalize_positions(fms)                      # (n, c, h, w)
    s = np.maximum(u, 0.0)
    p = params.gem_p
    mean_sp = np.mean(s ** p, axis=(2, 3))             # (n, c)
    g = mean_sp ** (1.0 / p)                           # pooled, (n, c)
    hid = g @ params.proj_w.T                          # (n, hidden)
    pre = hid @ params.kappa_w + params.kappa_b        # (n,)
    cache.update(u=u, s=s, mean_sp=mean_sp, g=g, hid=hid, pre=pre)
    return softplus(pre), cache


def backward_batch(cache, params: HeadParams, upstream) -> HeadGrads:
    """Parameter gradients for a batch; `upstream` is dL/dkappa per sample.

    Gradients are summed over the batch (pass upstream/n for a mean loss).
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    d_pre = upstream * _sigmoid(cache["pre"])          # (n,)

    if params.variant is HeadVariant.LINEAR_ONLY:
        return HeadGrads(
            gem_p=0.0,
            proj_w=None,
            kappa_w=cache["flat"].T @ d_pre,
            kappa_b=float(d_pre.sum()),
        )

    g, hid, s, mean_sp = cache["g"], cache["hid"], cache["s"], cache["mean_sp"]
    p = params.gem_p
    hw = s.shape[2] * s.shape[3]

    d_kappa_w = hid.T @ d_pre
    d_kappa_b = float(d_pre.sum())
    d_hid = np.outer(d_pre, params.kappa_w)            # (n, hidden)
    d_proj_w = d_hid.T @ g                             # (hidden, c)
    d_g = d_hid @ params.proj_w                        # (n, c)

    d_gem_p = 0.0
    if params.train_gem_p:
        # g = M^{1/p}, M = mean s^p:  dg/dp = g(-ln M / p^2 + (mean s^p ln s)/(p M))
        with np.errstate(divide="ignore", invalid="ignore"):
            log_m = np.where(mean_sp > 0.0, np.log(np.maximum(mean_sp, 1e-300)), 0.0)
            s_log = np.where(s > 0.0, (s ** p) * np.log(np.maximum(s, 1e-300)), 0.0)
        mean_slog = s_log.mean(axis=(2, 3))
        dg_dp = np.where(
            mean_sp > 0.0,
            g * (-log_m / p**2 + mean_slog / (p * np.maximum(mean_sp, 1e-300))),
            0.0,
        )
        d_gem_p = float(np.sum(d_g * dg_dp))

    return HeadGrads(gem_p=d_gem_p, proj_w=d_proj_w, kappa_w=d_kappa_w,
                     kappa_b=d_kappa_b)


def head_forward(fm, params: HeadParams) -> float:
    """Single feature map -> kappa > 0."""
    fm = check_feature_map(fm)
    kappas, _ = forward_batch(fm[None], params)
    return float(kappas[0])


def head_backward(fm, params: HeadParams, upstream: float) -> HeadGrads:
    """Parameter gradients of upstream * d kappa / d params for one map."""
    fm = check_feature_map(fm)
    _, cache = forward_batch(fm[None], params)
    return backward_batch(cache, params, np.array([float(upstream)]))
