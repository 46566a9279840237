"""Core von Mises-Fisher machinery on the unit hypersphere S^{d-1}.

Provides the numerically stable log-partition surrogate (integral of the
Amos upper bound on the Bessel ratio), the vMF negative log-likelihood and
its analytic gradients, the exact log-density (small-d oracle path),
Wood-style rejection sampling, the Banerjee concentration estimator, and
the resultant-vector fusion primitive shared by the query- and match-level
uncertainty scores.

All losses are defined up to an additive constant: only differences and
gradients are meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .bessel import log_bessel_exact

UNIT_NORM_TOL = 1e-9
DEFAULT_UNCERTAINTY_CAP = 1e12
RESULTANT_EPS = 1e-12


class DegenerateConcentrationError(ValueError):
    """All samples coincide; the MLE concentration diverges."""


def check_unit(values, tol=UNIT_NORM_TOL, name="vector"):
    """Validate a unit descriptor and return it as a float64 array."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] < 2:
        raise ValueError(f"{name} must be a 1-D vector with d >= 2, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    norm = np.linalg.norm(v)
    if abs(norm - 1.0) > tol:
        raise ValueError(f"{name} is not unit-norm: |norm - 1| = {abs(norm - 1.0):.3e}")
    return v


@dataclass(frozen=True)
class BesselOrder:
    """Bessel order bookkeeping for dimension d: v = d/2 - 1, v_tilde = (d-1)/2."""

    d: int

    def __post_init__(self):
        if self.d < 2:
            raise ValueError(f"dimension must be >= 2, got {self.d}")

    @property
    def v(self) -> float:
        return self.d / 2.0 - 1.0

    @property
    def v_tilde(self) -> float:
        return (self.d - 1) / 2.0


@dataclass(frozen=True)
class VmfParams:
    """A vMF distribution: unit mean direction mu and concentration kappa >= 0."""

    mu: np.ndarray
    kappa: float

    def __post_init__(self):
        object.__setattr__(self, "mu", check_unit(self.mu, name="mu"))
        k = float(self.kappa)
        if not math.isfinite(k) or k < 0.0:
            raise ValueError(f"kappa must be finite and >= 0, got {self.kappa}")
        object.__setattr__(self, "kappa", k)

    @property
    def d(self) -> int:
        return self.mu.shape[0]


def _check_kappa(kappa) -> float:
    k = float(kappa)
    if not math.isfinite(k) or k < 0.0:
        raise ValueError(f"kappa must be finite and >= 0, got {kappa}")
    return k


def stable_log_partition(kappa, order: BesselOrder) -> float:
    """Stable log-partition surrogate A(kappa).

    A(k) = sqrt(k^2 + vt^2) - vt * log(vt + sqrt(k^2 + vt^2)), vt = (d-1)/2.

    This is the antiderivative of the Amos upper bound on the Bessel ratio
    I_{v+1}/I_v, replacing log I_v(k) - v log k up to a constant.  Finite
    for all kappa >= 0 at any dimension; no Bessel evaluation involved.
    """
    k = _check_kappa(kappa)
    vt = order.v_tilde
    root = math.hypot(k, vt)
    return root - vt * math.log(vt + root)


def stable_log_partition_grad(kappa, order: BesselOrder) -> float:
    """dA/dkappa = kappa / (vt + sqrt(kappa^2 + vt^2)), the Amos upper bound.

    Lies in [0, 1); upper-bounds the exact ratio I_{v+1}(kappa)/I_v(kappa).
    """
    k = _check_kappa(kappa)
    vt = order.v_tilde
    return k / (vt + math.hypot(k, vt))


def vmf_nll(z, mu, kappa, order: BesselOrder) -> float:
    """Stable vMF negative log-likelihood, up to an additive constant.

    L = A(kappa) - kappa * mu.z
    """
    z = check_unit(z, name="z")
    mu = check_unit(mu, name="mu")
    if z.shape != mu.shape or z.shape[0] != order.d:
        raise ValueError(
            f"dimension mismatch: z {z.shape}, mu {mu.shape}, order d={order.d}"
        )
    k = _check_kappa(kappa)
    return stable_log_partition(k, order) - k * float(mu @ z)


def vmf_nll_grad_kappa(z, mu, kappa, order: BesselOrder) -> float:
    """dL/dkappa = A'(kappa) - mu.z; zero where the Amos ratio equals mu.z."""
    z = check_unit(z, name="z")
    mu = check_unit(mu, name="mu")
    if z.shape != mu.shape or z.shape[0] != order.d:
        raise ValueError(
            f"dimension mismatch: z {z.shape}, mu {mu.shape}, order d={order.d}"
        )
    k = _check_kappa(kappa)
    return stable_log_partition_grad(k, order) - float(mu @ z)


class DescriptorGrad(NamedTuple):
    """Gradient of the vMF NLL w.r.t. the descriptor z."""

    raw: np.ndarray       # -kappa * mu, the ambient-space gradient
    tangent: np.ndarray   # (I - z z^T) applied to raw; orthogonal to z


def vmf_nll_grad_z(z, mu, kappa) -> DescriptorGrad:
    """Gradient of L w.r.t. z, raw and projected onto the tangent space at z."""
    z = check_unit(z, name="z")
    mu = check_unit(mu, name="mu")
    if z.shape != mu.shape:
        raise ValueError(f"dimension mismatch: z {z.shape}, mu {mu.shape}")
    k = _check_kappa(kappa)
    raw = -k * mu
    tangent = raw - z * float(z @ raw)
    return DescriptorGrad(raw=raw, tangent=tangent)


# Exact-density oracle path: validated only for small d and moderate kappa.
_LOG_DENSITY_MAX_D = 64
_LOG_DENSITY_MAX_KAPPA = 1e4


def log_density(z, params: VmfParams, order: BesselOrder) -> float:
    """Exact vMF log-density log C_d(kappa) + kappa * mu.z.

    Uses the exact log-Bessel oracle, so it is restricted to d <= 64 and
    kappa <= 1e4.  The production loss path never calls this.
    """
    z = check_unit(z, name="z")
    if z.shape[0] != order.d or params.d != order.d:
        raise ValueError("dimension mismatch between z, params and order")
    d, k = order.d, params.kappa
    if d > _LOG_DENSITY_MAX_D:
        raise ValueError(f"log_density validated only for d <= {_LOG_DENSITY_MAX_D}")
    if k > _LOG_DENSITY_MAX_KAPPA:
        raise ValueError(f"log_density validated only for kappa <= {_LOG_DENSITY_MAX_KAPPA}")
    if k == 0.0:
        # Uniform on the sphere: log(Gamma(d/2) / (2 pi^{d/2})).
        log_area = math.log(2.0) + (d / 2.0) * math.log(math.pi) - math.lgamma(d / 2.0)
        return -log_area
    v = order.v
    log_c = v * math.log(k) - (d / 2.0) * math.log(2.0 * math.pi) - log_bessel_exact(v, k)
    return log_c + k * float(params.mu @ z)


def sample_vmf(params: VmfParams, count: int, rng_seed) -> np.ndarray:
    """Draw `count` vMF samples, returned as a (count, d) array of unit rows.

    Wood-style scheme: the mu-component w is drawn by beta rejection
    sampling, the tangent component uniformly on the orthogonal sphere.
    Deterministic for a fixed (seed, params, count).
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(rng_seed)
    d, k, mu = params.d, params.kappa, params.mu

    if k == 0.0:
        x = rng.standard_normal((count, d))
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    w = np.empty(count)
    dim = d - 1
    b = dim / (math.sqrt(4.0 * k * k + dim * dim) + 2.0 * k)
    x0 = (1.0 - b) / (1.0 + b)
    c = k * x0 + dim * math.log(1.0 - x0 * x0)
    for i in range(count):
        while True:
            zb = rng.beta(dim / 2.0, dim / 2.0)
            wi = (1.0 - (1.0 + b) * zb) / (1.0 - (1.0 - b) * zb)
            u = rng.uniform()
            if k * wi + dim * math.log(1.0 - x0 * wi) - c >= math.log(u):
                w[i] = wi
                break

    # Uniform directions in the hyperplane orthogonal to mu.
    v = rng.standard_normal((count, d))
    v -= np.outer(v @ mu, mu)
    v /= np.linalg.norm(v, axis=1, keepdims=True)

    samples = v * np.sqrt(np.maximum(1.0 - w * w, 0.0))[:, None] + np.outer(w, mu)
    return samples / np.linalg.norm(samples, axis=1, keepdims=True)


def mle_kappa(samples) -> float:
    """Banerjee closed-form concentration estimate from unit samples.

    kappa_hat = R(d - R^2) / (1 - R^2), R the norm of the sample mean.
    """
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 2:
        raise ValueError("need at least 2 samples of equal dimension")
    d = s.shape[1]
    r_bar = float(np.linalg.norm(s.mean(axis=0)))
    if r_bar >= 1.0 - 1e-12:
        raise DegenerateConcentrationError(
            "all samples (numerically) identical; kappa estimate diverges"
        )
    return r_bar * (d - r_bar * r_bar) / (1.0 - r_bar * r_bar)


class ResultantUncertainty(NamedTuple):
    value: float
    degenerate: bool


def resultant_uncertainty(
    kappa_a,
    kappa_b,
    cos_ab,
    cap: float = DEFAULT_UNCERTAINTY_CAP,
) -> ResultantUncertainty:
    """Inverse magnitude of the resultant of two kappa-scaled directions.

    U = 1 / sqrt(ka^2 + kb^2 + 2 ka kb cos_ab).  The cosine is clamped to
    [-1, 1] before use.  When the resultant magnitude underflows (exact
    cancellation) the configured cap is returned with a degenerate flag,
    keeping downstream reports finite and serializable.
    """
    ka = _check_kappa(kappa_a)
    kb = _check_kappa(kappa_b)
    c = float(cos_ab)
    if not math.isfinite(c):
        raise ValueError(f"cos_ab must be finite, got {cos_ab}")
    c = min(1.0, max(-1.0, c))
    mag_sq = ka * ka + kb * kb + 2.0 * ka * kb * c
    mag = math.sqrt(max(mag_sq, 0.0))
    if mag < RESULTANT_EPS:
        return ResultantUncertainty(value=cap, degenerate=True)
    return ResultantUncertainty(value=1.0 / mag, degenerate=False)
