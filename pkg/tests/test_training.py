"""Losses, Adam, gradient checking, and the training loops."""

import math

import numpy as np
import pytest

from kappa_sphere.anchors import PrototypeSet
from kappa_sphere.head import HeadVariant, init_head
from kappa_sphere.training import (AdamState, AnchorMode, LinearEncoder,
                                   LmclConfig, TrainConfig, TrainData,
                                   TrainMode, adam_step, finite_diff_check,
                                   gnll_loss, lmcl_loss, train_joint,
                                   train_post)


def unit_rows(rng, n, d):
    w = rng.standard_normal((n, d))
    return w / np.linalg.norm(w, axis=1, keepdims=True)


class TestLmcl:
    def test_gradients_finite_diff(self, rng):
        # Moderate scale keeps finite-difference truncation error (which
        # grows like scale^3) well below the 1e-4 tolerance.
        d, c = 10, 6
        protos = PrototypeSet(unit_rows(rng, c, d))
        z0 = unit_rows(rng, 1, d)[0]
        cfg = LmclConfig(scale=8.0, margin=0.2)

        def loss_and_grad(params):
            # Note: z and the prototype rows are treated as free ambient
            # vectors here; the loss itself is defined off the sphere too.
            p = PrototypeSet.__new__(PrototypeSet)
            p.weights = params["w"]
            loss, gz, gw = lmcl_loss(params["z"], p, 2, cfg)
            return loss, {"z": gz, "w": gw}

        report = finite_diff_check(
            loss_and_grad, {"z": z0.copy(), "w": protos.weights.copy()})
        assert report.passed, report.per_param

    def test_margin_penalizes_true_class(self, rng):
        d, c = 8, 5
        protos = PrototypeSet(unit_rows(rng, c, d))
        z = protos.weights[1].copy()
        with_margin, _, _ = lmcl_loss(z, protos, 1, LmclConfig(30.0, 0.35))
        without, _, _ = lmcl_loss(z, protos, 1, LmclConfig(30.0, 0.0))
        assert with_margin > without

    def test_shift_invariance_of_softmax(self, rng):
        # The implementation must match the naive formula computed in
        # extended precision even when logits are large.
        d, c = 6, 4
        protos = PrototypeSet(unit_rows(rng, c, d))
        z = unit_rows(rng, 1, d)[0]
        cfg = LmclConfig(scale=300.0, margin=0.35)
        loss, _, _ = lmcl_loss(z, protos, 0, cfg)
        logits = cfg.scale * (protos.weights @ z)
        logits[0] -= cfg.scale * cfg.margin
        big = np.array(logits, dtype=np.longdouble)
        expected = float(np.log(np.exp(big).sum()) - big[0])
        assert math.isfinite(loss)
        assert loss == pytest.approx(expected, rel=1e-10)

    def test_label_out_of_range(self, rng):
        protos = PrototypeSet(unit_rows(rng, 3, 5))
        z = unit_rows(rng, 1, 5)[0]
        with pytest.raises(KeyError):
            lmcl_loss(z, protos, 3, LmclConfig())


class TestGnll:
    def test_stationary_at_mean_square_error(self, rng):
        d = 12
        z = rng.standard_normal(d)
        mu = rng.standard_normal(d)
        s2_star = float(np.sum((z - mu) ** 2)) / d
        _, _, grad_s2 = gnll_loss(z, mu, s2_star, d)
        assert grad_s2 == pytest.approx(0.0, abs=1e-12)
        # and it is a minimum: gradient negative below, positive above
        _, _, below = gnll_loss(z, mu, 0.5 * s2_star, d)
        _, _, above = gnll_loss(z, mu, 2.0 * s2_star, d)
        assert below < 0.0 < above

    def test_gradients_finite_diff(self, rng):
        d = 7
        z0 = rng.standard_normal(d)
        mu = rng.standard_normal(d)

        def loss_and_grad(params):
            loss, gz, gs2 = gnll_loss(params["z"], mu,
                                      float(params["s2"][0]), d)
            return loss, {"z": gz, "s2": np.array([gs2])}

        report = finite_diff_check(
            loss_and_grad, {"z": z0.copy(), "s2": np.array([1.7])})
        assert report.passed, report.per_param

    def test_rejects_nonpositive_sigma(self, rng):
        z = rng.standard_normal(4)
        for bad in (0.0, -1.0, math.inf):
            with pytest.raises(ValueError):
                gnll_loss(z, z, bad, 4)


class TestAdam:
    def test_first_step_matches_hand_computation(self):
        # With fresh state the bias-corrected first step is
        # lr * g / (|g| + eps) elementwise.
        params = {"w": np.array([1.0, -2.0, 0.5])}
        g = np.array([0.3, -0.1, 2.0])
        state = AdamState()
        adam_step(params, {"w": g.copy()}, state, lr=0.01)
        expected = np.array([1.0, -2.0, 0.5]) - 0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(params["w"], expected, rtol=1e-12)
        assert state.t == 1

    def test_second_step_matches_reference(self):
        beta1, beta2, eps, lr = 0.9, 0.999, 1e-8, 0.05
        params = {"w": np.array([0.7])}
        state = AdamState()
        ref = 0.7
        m = v = 0.0
        for t, g in enumerate([0.4, -1.1], start=1):
            adam_step(params, {"w": np.array([g])}, state, lr)
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            ref -= lr * (m / (1 - beta1**t)) / (math.sqrt(v / (1 - beta2**t)) + eps)
        assert params["w"][0] == pytest.approx(ref, rel=1e-12)

    def test_in_place_update(self):
        w = np.array([1.0, 2.0])
        adam_step({"w": w}, {"w": np.array([1.0, 1.0])}, AdamState(), lr=0.1)
        assert not np.array_equal(w, [1.0, 2.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState(), 0.1)


class TestFiniteDiffCheck:
    def test_accepts_correct_gradient(self):
        def quad(params):
            x = params["x"]
            return float(0.5 * x @ x), {"x": x.copy()}

        report = finite_diff_check(quad, {"x": np.array([0.3, -1.2, 4.0])})
        assert report.passed
        assert report.max_rel_err <= 1e-6

    def test_rejects_wrong_gradient(self):
        def quad(params):
            x = params["x"]
            return float(0.5 * x @ x), {"x": 1.1 * x}

        report = finite_diff_check(quad, {"x": np.array([1.0, 2.0])})
        assert not report.passed
        assert report.max_rel_err > 0.05

    def test_params_restored(self):
        x = np.array([0.5, 1.5])

        def quad(params):
            return float(params["x"] @ params["x"]), {"x": 2 * params["x"]}

        finite_diff_check(quad, {"x": x})
        np.testing.assert_array_equal(x, [0.5, 1.5])


def tiny_data(rng, n=24, c=3, h=2, w=2, d=6, num_classes=4, raw_dim=5):
    labels = np.arange(n) % num_classes
    features = rng.standard_normal((n, c, h, w))
    descriptors = unit_rows(rng, n, d)
    raw = rng.standard_normal((n, raw_dim))
    protos = PrototypeSet(unit_rows(rng, num_classes, d))
    return (TrainData(features=features, labels=labels,
                      descriptors=descriptors, raw=raw), protos)


class TestTrainPost:
    def test_descriptors_untouched(self, rng):
        data, protos = tiny_data(rng)
        before = data.descriptors.copy()
        head = init_head((3, 2, 2), hidden=4, rng=rng)
        cfg = TrainConfig(max_epochs=3, warmup=0)
        train_post(data, protos, head, cfg)
        np.testing.assert_array_equal(data.descriptors, before)

    def test_loss_decreases(self, rng):
        data, protos = tiny_data(rng, n=48)
        head = init_head((3, 2, 2), hidden=4, rng=rng)
        cfg = TrainConfig(max_epochs=40, lr=0.05, warmup=0)
        _, history = train_post(data, protos, head, cfg)
        assert history[-1]["loss"] < history[0]["loss"]

    def test_returns_copy_not_input_head(self, rng):
        data, protos = tiny_data(rng)
        head = init_head((3, 2, 2), hidden=4, rng=rng)
        before = head.kappa_w.copy()
        trained, _ = train_post(data, protos, head,
                                TrainConfig(max_epochs=2, warmup=0))
        np.testing.assert_array_equal(head.kappa_w, before)
        assert trained is not head

    def test_deterministic(self, rng):
        data, protos = tiny_data(rng)
        head = init_head((3, 2, 2), hidden=4, rng=np.random.default_rng(0))
        cfg = TrainConfig(max_epochs=5, seed=7, warmup=0)
        a, _ = train_post(data, protos, head, cfg)
        b, _ = train_post(data, protos, head, cfg)
        np.testing.assert_array_equal(a.kappa_w, b.kappa_w)
        assert a.kappa_b == b.kappa_b

    def test_warmup_excluded_from_checkpointing(self, rng):
        # A hook that is best at epoch 0 and worst afterwards: with
        # warmup=2 the selected checkpoint must come from epoch >= 2.
        data, protos = tiny_data(rng)
        head = init_head((3, 2, 2), hidden=4, rng=rng)
        metrics = iter([0.01, 0.5, 0.3, 0.4, 0.45, 0.5, 0.55])
        seen = []

        def hook(h):
            m = next(metrics)
            seen.append((m, float(h.kappa_b)))
            return m

        cfg = TrainConfig(max_epochs=7, patience=3, warmup=2)
        trained, history = train_post(data, protos, head, cfg, eval_hook=hook)
        # best eligible metric is 0.3 at epoch index 2
        assert trained.kappa_b == seen[2][1]
        assert len(history) == 6  # epochs 3,4,5 are stale -> stop at epoch 5

    def test_gnll_variant_runs(self, rng):
        data, protos = tiny_data(rng)
        head = init_head((3, 2, 2), hidden=4, rng=rng)
        cfg = TrainConfig(mode=TrainMode.GNLL_VARIANT, max_epochs=3, warmup=0)
        _, history = train_post(data, protos, head, cfg)
        assert len(history) == 3
        assert all(math.isfinite(row["loss"]) for row in history)

    def test_batch_centroid_anchoring(self, rng):
        data, protos = tiny_data(rng, n=32, num_classes=2)
        head = init_head((3, 2, 2), hidden=4, rng=rng)
        cfg = TrainConfig(max_epochs=2, warmup=0,
                          anchor_mode=AnchorMode.BATCH_CENTROID)
        _, history = train_post(data, protos, head, cfg)
        assert len(history) == 2

    def test_batch_centroid_requires_positives(self, rng):
        # Every sample is its own class: excluding self leaves no positives.
        n = 8
        data = TrainData(features=rng.standard_normal((n, 3, 2, 2)),
                         labels=np.arange(n),
                         descriptors=unit_rows(rng, n, 6))
        protos = PrototypeSet(unit_rows(rng, n, 6))
        head = init_head((3, 2, 2), hidden=4, rng=rng)
        cfg = TrainConfig(max_epochs=1, warmup=0,
                          anchor_mode=AnchorMode.BATCH_CENTROID)
        with pytest.raises(ValueError, match="no positives"):
            train_post(data, protos, head, cfg)

    def test_requires_descriptors(self, rng):
        data = TrainData(features=rng.standard_normal((4, 3, 2, 2)),
                         labels=np.zeros(4, dtype=int))
        protos = PrototypeSet(unit_rows(rng, 2, 6))
        head = init_head((3, 2, 2), hidden=4, rng=rng)
        with pytest.raises(ValueError):
            train_post(data, protos, head, TrainConfig())


class TestTrainJoint:
    def test_lambda_zero_matches_classification_only(self, rng):
        data, protos = tiny_data(rng)
        encoder = LinearEncoder(rng.standard_normal((6, 5)))
        head = init_head((3, 2, 2), hidden=4, rng=rng)
        cfg0 = TrainConfig(mode=TrainMode.JOINT_TRAINING, lam=0.0,
                           max_epochs=4, warmup=0)
        enc_a, pro_a, _, _ = train_joint(data, encoder, protos, head, cfg0,
                                         LmclConfig())
        enc_b, pro_b, _, _ = train_joint(data, encoder, protos, None, cfg0,
                                         LmclConfig())
        np.testing.assert_array_equal(enc_a.weights, enc_b.weights)
        np.testing.assert_array_equal(pro_a.weights, pro_b.weights)

    def test_loss_decreases(self, rng):
        data, protos = tiny_data(rng, n=48)
        encoder = LinearEncoder(rng.standard_normal((6, 5)))
        head = init_head((3, 2, 2), hidden=4, rng=rng)
        cfg = TrainConfig(mode=TrainMode.JOINT_TRAINING, lam=0.01, lr=0.01,
                          max_epochs=30, warmup=0)
        _, _, _, history = train_joint(data, encoder, protos, head, cfg,
                                       LmclConfig())
        assert history[-1]["loss"] < history[0]["loss"]

    def test_prototypes_stay_unit(self, rng):
        data, protos = tiny_data(rng)
        encoder = LinearEncoder(rng.standard_normal((6, 5)))
        head = init_head((3, 2, 2), hidden=4, rng=rng)
        cfg = TrainConfig(mode=TrainMode.JOINT_TRAINING, max_epochs=3,
                          warmup=0)
        _, pro, _, _ = train_joint(data, encoder, protos, head, cfg,
                                   LmclConfig())
        np.testing.assert_allclose(np.linalg.norm(pro.weights, axis=1), 1.0,
                                   atol=1e-12)

    def test_phased_early_stopping(self, rng):
        data, protos = tiny_data(rng)
        encoder = LinearEncoder(rng.standard_normal((6, 5)))
        head = init_head((3, 2, 2), hidden=4, rng=rng)

        recalls = [0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6]
        eces = [0.3, 0.3, 0.3, 0.3, 0.25, 0.2, 0.3, 0.3, 0.3, 0.3]
        calls = []

        def hook(enc, pro, hd):
            i = len(calls)
            calls.append(i)
            return recalls[i], eces[i]

        cfg = TrainConfig(mode=TrainMode.JOINT_TRAINING, max_epochs=10,
                          patience=2, warmup=0)
        _, _, _, history = train_joint(data, encoder, protos, head, cfg,
                                       LmclConfig(), eval_hook=hook)
        phases = [row["phase"] for row in history]
        # recall plateaus after epoch 1 -> phase flips at epoch 3;
        # ece improves at 4,5 then stales at 6,7 -> stop after epoch 7.
        assert phases[:4] == [1, 1, 1, 1]
        assert all(p == 2 for p in phases[4:])
        assert len(history) == 8

    def test_requires_raw(self, rng):
        data = TrainData(features=rng.standard_normal((4, 3, 2, 2)),
                         labels=np.zeros(4, dtype=int),
                         descriptors=unit_rows(rng, 4, 6))
        encoder = LinearEncoder(rng.standard_normal((6, 5)))
        protos = PrototypeSet(unit_rows(rng, 2, 6))
        with pytest.raises(ValueError):
            train_joint(data, encoder, protos, None,
                        TrainConfig(mode=TrainMode.JOINT_TRAINING),
                        LmclConfig())


class TestConfigValidation:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(lam=-0.1)
        with pytest.raises(ValueError):
            TrainConfig(patience=0)
        with pytest.raises(ValueError):
            TrainConfig(warmup=-1)
        with pytest.raises(ValueError):
            LmclConfig(margin=1.0)
