"""Optimization: margin-based classification loss, the Gaussian-NLL
ablation, Adam, gradient verification, and the two training loops
(post-training of the kappa head against a frozen embedding space, and
joint training of encoder + prototypes + head).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .anchors import PrototypeSet, batch_centroid_anchor
from .head import HeadGrads, HeadParams, backward_batch, forward_batch
from .vmf import BesselOrder, stable_log_partition, stable_log_partition_grad


class TrainMode(str, Enum):
    POST_TRAINING = "post_training"
    JOINT_TRAINING = "joint_training"
    GNLL_VARIANT = "gnll_variant"


class AnchorMode(str, Enum):
    CLASS_PROTOTYPE = "class_prototype"
    BATCH_CENTROID = "batch_centroid"


@dataclass
class TrainConfig:
    mode: TrainMode = TrainMode.POST_TRAINING
    lam: float = 0.01          # weight of the vMF term in the joint objective
    lr: float = 1e-3
    batch_size: int = 32
    patience: int = 15
    max_epochs: int = 200
    warmup: int = 10           # epochs excluded from checkpoint selection
    seed: int = 0
    anchor_mode: AnchorMode = AnchorMode.CLASS_PROTOTYPE
    include_self_in_centroid: bool = False

    def __post_init__(self):
        if self.lam < 0 or self.lr <= 0 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("invalid training configuration")
        if self.warmup < 0:
            raise ValueError("warmup must be non-negative")


@dataclass
class LmclConfig:
    """Large-margin cosine loss hyperparameters (scaled cosine softmax)."""

    scale: float = 30.0
    margin: float = 0.35

    def __post_init__(self):
        if self.scale <= 0 or not 0 <= self.margin < 1:
            raise ValueError("require scale > 0 and 0 <= margin < 1")


@dataclass
class LinearEncoder:
    """Desk-scale stand-in for a backbone: x -> L2-normalized W x."""

    weights: np.ndarray  # (d, m)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("encoder weights must be a (d, m) matrix")

    def encode(self, raw) -> np.ndarray:
        """Encode an (n, m) batch to unit descriptors (n, d)."""
        raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
        z = raw @ self.weights.T
        return z / np.linalg.norm(z, axis=1, keepdims=True)

    def copy(self) -> "LinearEncoder":
        return LinearEncoder(self.weights.copy())


# --- losses -----------------------------------------------------------------


def lmcl_loss(embedding, prototypes: PrototypeSet, label: int, cfg: LmclConfig):
    """Large-margin cosine loss for one sample.

    Cross-entropy over s * (cos_j - m * [j == label]).  Returns
    (loss, grad wrt embedding, grad wrt prototype matrix).
    """
    z = np.asarray(embedding, dtype=np.float64)
    label = int(label)
    if not 0 <= label < prototypes.num_classes:
        raise KeyError(f"label {label} out of range")
    w = prototypes.weights
    cos = w @ z
    logits = cfg.scale * cos
    logits[label] -= cfg.scale * cfg.margin
    # stable log-softmax
    shifted = logits - logits.max()
    log_norm = math.log(np.exp(shifted).sum())
    loss = float(log_norm - shifted[label])
    probs = np.exp(shifted - log_norm)
    d_logits = probs.copy()
    d_logits[label] -= 1.0
    d_cos = cfg.scale * d_logits
    grad_z = w.T @ d_cos
    grad_w = np.outer(d_cos, z)
    return loss, grad_z, grad_w


def gnll_loss(z, mu, sigma_sq: float, d: int):
    """Isotropic Gaussian NLL between descriptor and anchor in ambient space.

    loss = |z - mu|^2 / (2 s2) + (d/2) ln s2.  Returns
    (loss, grad wrt z, grad wrt sigma_sq); the sigma_sq gradient is zero
    exactly at s2 = |z - mu|^2 / d.
    """
    s2 = float(sigma_sq)
    if not (s2 > 0.0) or not math.isfinite(s2):
        raise ValueError(f"sigma_sq must be positive and finite, got {sigma_sq}")
    z = np.asarray(z, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    diff = z - mu
    sq = float(diff @ diff)
    loss = sq / (2.0 * s2) + 0.5 * d * math.log(s2)
    grad_z = diff / s2
    grad_s2 = -sq / (2.0 * s2 * s2) + 0.5 * d / s2
    return loss, grad_z, grad_s2


# --- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update, in place on the `params` dict of float64 arrays."""
    state.t += 1
    t = state.t
    for key, g in grads.items():
        p = params[key]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {key!r}")
        if key not in state.m:
            state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        state.m[key] = beta1 * state.m[key] + (1 - beta1) * g
        state.v[key] = beta2 * state.v[key] + (1 - beta2) * g * g
        m_hat = state.m[key] / (1 - beta1 ** t)
        v_hat = state.v[key] / (1 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


# --- gradient verification ---------------------------------------------------


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    per_param: dict
    tolerance: float
    passed: bool


def finite_diff_check(loss_and_grad, params: dict, tolerance: float = 1e-4) -> FiniteDiffReport:
    """Check analytic gradients against central finite differences.

    `loss_and_grad(params) -> (loss, grads_dict)`.  Steps are
    h = 1e-5 * max(1, |x|) per coordinate.
    """
    _, analytic = loss_and_grad(params)
    per_param = {}
    worst = 0.0
    for key in analytic:
        p = params[key]
        a = np.asarray(analytic[key], dtype=np.float64)
        fd = np.zeros_like(a)
        flat_p = p.reshape(-1)
        flat_fd = fd.reshape(-1)
        for i in range(flat_p.size):
            x0 = flat_p[i]
            h = 1e-5 * max(1.0, abs(x0))
            flat_p[i] = x0 + h
            lp, _ = loss_and_grad(params)
            flat_p[i] = x0 - h
            lm, _ = loss_and_grad(params)
            flat_p[i] = x0
            flat_fd[i] = (lp - lm) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-6)
        err = float(np.max(np.abs(a - fd) / denom)) if a.size else 0.0
        per_param[key] = err
        worst = max(worst, err)
    return FiniteDiffReport(max_rel_err=worst, per_param=per_param,
                            tolerance=tolerance, passed=worst <= tolerance)


# --- training loops ----------------------------------------------------------


@dataclass
class TrainData:
    """Per-sample training inputs.

    descriptors are the frozen embeddings (post-training); raw features
    feed the encoder in joint mode; feature maps feed the kappa head.
    """

    features: np.ndarray           # (n, c, h, w)
    labels: np.ndarray             # (n,) int
    descriptors: np.ndarray | None = None  # (n, d) unit rows
    raw: np.ndarray | None = None          # (n, m)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.features):
            raise ValueError("features and labels length mismatch")
        if len(self.labels) == 0:
            raise ValueError("empty dataset")

    def __len__(self):
        return len(self.labels)


def _head_params_dict(head: HeadParams) -> dict:
    params = {"kappa_w": head.kappa_w, "kappa_b": np.array([head.kappa_b])}
    if head.proj_w is not None:
        params["proj_w"] = head.proj_w
    if head.train_gem_p:
        params["gem_p"] = np.array([head.gem_p])
    return params


def _apply_head_dict(head: HeadParams, params: dict) -> None:
    head.kappa_w = params["kappa_w"]
    head.kappa_b = float(params["kappa_b"][0])
    if "proj_w" in params:
        head.proj_w = params["proj_w"]
    if "gem_p" in params:
        head.gem_p = max(float(params["gem_p"][0]), 1.0)


def _head_grads_dict(grads: HeadGrads, head: HeadParams) -> dict:
    out = {"kappa_w": grads.kappa_w, "kappa_b": np.array([grads.kappa_b])}
    if head.proj_w is not None:
        out["proj_w"] = grads.proj_w
    if head.train_gem_p:
        out["gem_p"] = np.array([grads.gem_p])
    return out


def _resolve_anchors(cfg: TrainConfig, prototypes: PrototypeSet,
                     descriptors: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Anchor direction per sample of a batch, as an (B, d) array."""
    if cfg.anchor_mode is AnchorMode.CLASS_PROTOTYPE:
        if labels.max() >= prototypes.num_classes or labels.min() < 0:
            raise KeyError("unresolvable anchor label in batch")
        return prototypes.weights[labels]
    anchors = np.empty_like(descriptors)
    for i, lab in enumerate(labels):
        mask = labels == lab
        if not cfg.include_self_in_centroid:
            mask = mask.copy()
            mask[i] = False
        if not mask.any():
            raise ValueError(
                f"sample {i} (class {lab}) has no positives in its batch; "
                "batch-centroid anchoring needs class-grouped batches"
            )
        anchors[i] = batch_centroid_anchor(descriptors[mask])
    return anchors


def _vmf_batch_loss_and_kappa_grad(z, anchors, kappas, order: BesselOrder):
    """Mean stable vMF NLL over a batch and dL/dkappa per sample."""
    dots = np.einsum("ij,ij->i", anchors, z)
    n = len(kappas)
    loss = float(np.mean([stable_log_partition(k, order) for k in kappas]) -
                 np.mean(kappas * dots))
    grad = np.array([stable_log_partition_grad(k, order) for k in kappas]) - dots
    return loss, grad / n, dots


def _gnll_batch_loss_and_grad(z, anchors, sigma_sq, d):
    diff = z - anchors
    sq = np.einsum("ij,ij->i", diff, diff)
    n = len(sigma_sq)
    loss = float(np.mean(sq / (2.0 * sigma_sq) + 0.5 * d * np.log(sigma_sq)))
    grad = (-sq / (2.0 * sigma_sq**2) + 0.5 * d / sigma_sq) / n
    return loss, grad


def train_post(data: TrainData, prototypes: PrototypeSet, head: HeadParams,
               cfg: TrainConfig, eval_hook=None):
    """Train only the kappa head against frozen descriptors and prototypes.

    The loss is the stable vMF NLL (or the Gaussian NLL under
    GNLL_VARIANT, in which case the head output is read as sigma^2).
    Early stopping tracks the eval_hook metric (lower is better,
    e.g. validation ECE@1) with the configured patience; the first
    cfg.warmup epochs are excluded from checkpoint selection (the
    untrained head can hit spurious calibration minima before it has
    learned any ordering).  The best checkpoint is returned.
    Returns (trained head, history rows).
    """
    if data.descriptors is None:
        raise ValueError("post-training requires precomputed descriptors")
    if cfg.mode is TrainMode.JOINT_TRAINING:
        raise ValueError("use train_joint for joint mode")
    d = data.descriptors.shape[1]
    order = BesselOrder(d)
    rng = np.random.default_rng(cfg.seed)
    head = head.copy()
    params = _head_params_dict(head)
    state = AdamState()
    history = []
    best_metric = math.inf
    best_params = {k: v.copy() for k, v in params.items()}
    stale = 0

    n = len(data)
    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            z = data.descriptors[idx]
            labels = data.labels[idx]
            anchors = _resolve_anchors(cfg, prototypes, z, labels)
            out, cache = forward_batch(data.features[idx], head)
            if cfg.mode is TrainMode.GNLL_VARIANT:
                loss, up = _gnll_batch_loss_and_grad(z, anchors, out, d)
            else:
                loss, up, _ = _vmf_batch_loss_and_kappa_grad(z, anchors, out, order)
            grads = _head_grads_dict(backward_batch(cache, head, up), head)
            adam_step(params, grads, state, cfg.lr)
            _apply_head_dict(head, params)
            epoch_loss += loss * len(idx)
        epoch_loss /= n

        metric = float(eval_hook(head)) if eval_hook is not None else math.nan
        history.append({"epoch": epoch, "loss": epoch_loss, "metric": metric,
                        "phase": 1})
        if eval_hook is not None and epoch >= cfg.warmup:
            if metric < best_metric - 1e-12:
                best_metric = metric
                best_params = {k: v.copy() for k, v in params.items()}
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break

    if eval_hook is not None:
        _apply_head_dict(head, best_params)
    return head, history


def train_joint(data: TrainData, encoder: LinearEncoder, prototypes: PrototypeSet,
                head: HeadParams | None, cfg: TrainConfig, lmcl: LmclConfig,
                eval_hook=None):
    """Jointly train encoder, prototypes, and (optionally) the kappa head.

    Objective: L_cls + lam * L_vMF per batch.  With lam == 0 (or head is
    None) the vMF term is skipped entirely, so the encoder/prototype
    trajectory is bit-identical to classification-only training.

    Phased early stopping: phase 1 tracks Recall@1 until patience is
    exhausted, phase 2 continues while tracking ECE@1 with refreshed
    patience.  `eval_hook(encoder, prototypes, head) -> (recall1, ece1)`.
    Returns (encoder, prototypes, head, history).
    """
    if data.raw is None:
        raise ValueError("joint training requires raw features")
    use_vmf = cfg.lam > 0.0 and head is not None
    d = encoder.weights.shape[0]
    order = BesselOrder(d)
    rng = np.random.default_rng(cfg.seed)
    encoder = encoder.copy()
    prototypes = PrototypeSet(prototypes.weights.copy())
    head = head.copy() if head is not None else None

    params = {"encoder": encoder.weights, "prototypes": prototypes.weights}
    if use_vmf:
        params.update(_head_params_dict(head))
    state = AdamState()
    history = []
    phase = 1
    best_recall = -math.inf
    best_ece = math.inf
    best_params = {k: v.copy() for k, v in params.items()}
    stale = 0

    n = len(data)
    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x = data.raw[idx]
            labels = data.labels[idx]
            b = len(idx)

            zraw = x @ encoder.weights.T
            norms = np.linalg.norm(zraw, axis=1, keepdims=True)
            z = zraw / norms

            # classification term (batched LMCL, mean over batch)
            cos = z @ prototypes.weights.T
            logits = lmcl.scale * cos
            logits[np.arange(b), labels] -= lmcl.scale * lmcl.margin
            shifted = logits - logits.max(axis=1, keepdims=True)
            log_norm = np.log(np.exp(shifted).sum(axis=1))
            loss_cls = float(np.mean(log_norm - shifted[np.arange(b), labels]))
            probs = np.exp(shifted - log_norm[:, None])
            d_logits = probs
            d_logits[np.arange(b), labels] -= 1.0
            d_cos = lmcl.scale * d_logits / b
            d_z = d_cos @ prototypes.weights
            d_proto = d_cos.T @ z
            loss = loss_cls

            grads = {}
            if use_vmf:
                anchors = _resolve_anchors(cfg, prototypes, z, labels)
                kappas, cache = forward_batch(data.features[idx], head)
                loss_vmf, up, _ = _vmf_batch_loss_and_kappa_grad(z, anchors, kappas, order)
                loss = loss + cfg.lam * loss_vmf
                grads.update(_head_grads_dict(
                    backward_batch(cache, head, cfg.lam * up), head))
                if cfg.anchor_mode is AnchorMode.CLASS_PROTOTYPE:
                    d_z = d_z + (-cfg.lam / b) * kappas[:, None] * anchors
                    np.add.at(d_proto, labels, (-cfg.lam / b) * kappas[:, None] * z)
                else:
                    # centroid anchors are treated as constants w.r.t. z
                    d_z = d_z + (-cfg.lam / b) * kappas[:, None] * anchors

            # through the L2 normalization of the encoder output
            d_zraw = (d_z - z * np.einsum("ij,ij->i", z, d_z)[:, None]) / norms
            grads["encoder"] = d_zraw.T @ x
            grads["prototypes"] = d_proto

            adam_step(params, grads, state, cfg.lr)
            prototypes.renormalize()
            if use_vmf:
                _apply_head_dict(head, params)
            epoch_loss += loss * b
        epoch_loss /= n

        recall1, ece1 = (math.nan, math.nan)
        if eval_hook is not None:
            recall1, ece1 = eval_hook(encoder, prototypes, head)
        history.append({"epoch": epoch, "loss": epoch_loss, "recall1": recall1,
                        "ece1": ece1, "phase": phase})

        if eval_hook is None or epoch < cfg.warmup:
            continue
        if phase == 1:
            if recall1 > best_recall + 1e-12:
                best_recall = recall1
                best_params = {k: v.copy() for k, v in params.items()}
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    phase = 2
                    stale = 0
                    best_ece = math.inf
        else:
            if ece1 < best_ece - 1e-12:
                best_ece = ece1
                best_params = {k: v.copy() for k, v in params.items()}
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break

    if eval_hook is not None:
        encoder.weights = best_params["encoder"]
        prototypes.weights = best_params["prototypes"]
        prototypes.renormalize()
        if use_vmf:
            _apply_head_dict(head, {k: best_params[k] for k in _head_params_dict(head)})
    return encoder, prototypes, head, history
