import io

import numpy as np
import pytest

from handnet.network import Network, micro_config
from handnet.tensor import ConfigError
from handnet.training import (NUM_KEYPOINTS, DivergenceError, LRSchedule, SGD,
                              coordinate_loss, cyclical_lr, make_synth_dataset,
                              synth_hand, targets_from_keypoints, train_toy)


class TestSchedule:
    def test_landmark_values(self):
        s = LRSchedule(1e-4, 1e-1, 6)
        assert cyclical_lr(0, s) == pytest.approx(1e-4)
        assert cyclical_lr(6, s) == pytest.approx(1e-1)
        assert cyclical_lr(12, s) == pytest.approx(1e-4)
        assert cyclical_lr(18, s) == pytest.approx(1e-1)

    def test_linear_ramp(self):
        s = LRSchedule(0.0001, 0.1, 6)
        # halfway up the first ramp
        mid = 0.0001 + (0.1 - 0.0001) * 0.5
        assert cyclical_lr(3, s) == pytest.approx(mid)

    def test_contained_and_periodic(self):
        s = LRSchedule(1e-3, 1e-1, 4)
        vals = [cyclical_lr(t, s) for t in range(80)]
        assert min(vals) >= 1e-3 - 1e-15
        assert max(vals) <= 1e-1 + 1e-15
        period = 2 * s.stepsize
        for t in range(80 - period):
            assert vals[t] == pytest.approx(vals[t + period])

    def test_constant_when_min_equals_max(self):
        s = LRSchedule(2e-3, 2e-3, 6)
        assert all(cyclical_lr(t, s) == pytest.approx(2e-3)
                   for t in range(20))

    def test_validation(self):
        with pytest.raises(ConfigError):
            LRSchedule(0.0, 0.1, 6)
        with pytest.raises(ConfigError):
            LRSchedule(0.2, 0.1, 6)
        with pytest.raises(ConfigError):
            LRSchedule(1e-4, 1e-1, 0)


class _Quad:
    """One-parameter toy model: loss = w^2 has gradient 2w."""

    def __init__(self, w0):
        self.w = np.array([w0])
        self.gw = np.zeros(1)

    def named_items(self, prefix=""):
        yield "w", self.w, self.gw


class TestSGD:
    def test_plain_step(self):
        m = _Quad(1.0)
        m.gw[:] = 2.0 * m.w
        SGD(m).step(0.1)
        assert m.w[0] == pytest.approx(0.8)

    def test_momentum_accumulates(self):
        m = _Quad(1.0)
        opt = SGD(m, momentum=0.9)
        m.gw[:] = 1.0
        opt.step(0.1)       # v = -0.1, w = 0.9
        m.gw[:] = 1.0
        opt.step(0.1)       # v = -0.19, w = 0.71
        assert m.w[0] == pytest.approx(0.71)

    def test_momentum_converges_on_quadratic(self):
        m = _Quad(5.0)
        opt = SGD(m, momentum=0.9)
        for _ in range(400):
            m.gw[:] = 2.0 * m.w
            opt.step(0.05)
        assert abs(m.w[0]) < 1e-6

    def test_nonfinite_gradient_raises(self):
        m = _Quad(1.0)
        m.gw[:] = np.nan
        with pytest.raises(DivergenceError, match="w"):
            SGD(m).step(0.1)

    def test_parameter_blowup_raises(self):
        m = _Quad(1e308)
        m.gw[:] = -1e308
        with np.errstate(over="ignore"), pytest.raises(DivergenceError):
            SGD(m).step(10.0)


class TestCoordinateLoss:
    def test_mse_value_and_gradient(self):
        rng = np.random.default_rng(0)
        p = rng.standard_normal((2, 1, 1, 42))
        t = rng.standard_normal((2, 1, 1, 42))
        loss, grad = coordinate_loss(p, t, "mse")
        assert loss == pytest.approx(np.mean((p - t) ** 2))
        # numeric check on a few entries
        h = 1e-6
        for idx in [(0, 0, 0, 0), (1, 0, 0, 41), (0, 0, 0, 20)]:
            q = p.copy()
            q[idx] += h
            lp, _ = coordinate_loss(q, t, "mse")
            q[idx] -= 2 * h
            lm, _ = coordinate_loss(q, t, "mse")
            assert grad[idx] == pytest.approx((lp - lm) / (2 * h), rel=1e-4)

    def test_mae_value_and_gradient(self):
        p = np.array([[1.0, -2.0, 0.5, 3.0]])
        t = np.array([[0.0, 0.0, 1.0, 3.5]])
        loss, grad = coordinate_loss(p, t, "mae")
        assert loss == pytest.approx((1.0 + 2.0 + 0.5 + 0.5) / 4)
        assert np.allclose(grad, np.array([[1, -1, -1, -1]]) / 4.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            coordinate_loss(np.zeros((1, 4)), np.zeros((1, 5)))

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            coordinate_loss(np.zeros(4), np.zeros(4), "huber")

    def test_nonfinite_raises(self):
        with pytest.raises(DivergenceError):
            coordinate_loss(np.array([np.inf]), np.zeros(1))

    def test_grad_keeps_pred_dtype(self):
        p = np.zeros((1, 4), dtype=np.float32)
        _, grad = coordinate_loss(p, np.ones((1, 4), dtype=np.float32))
        assert grad.dtype == np.float32


class TestSynthData:
    def test_shapes_and_ranges(self):
        img, kps = synth_hand(np.random.default_rng(0), size=32)
        assert img.shape == (32, 32, 3)
        assert kps.shape == (NUM_KEYPOINTS, 2)
        # blobs top out at 1.0, additive scene noise adds up to 0.05
        assert img.min() >= 0.0 and img.max() <= 1.05 + 1e-6
        assert kps.min() >= 0.0 and kps.max() <= 31.0

    def test_deterministic_for_seed(self):
        a_img, a_kps = synth_hand(np.random.default_rng(7))
        b_img, b_kps = synth_hand(np.random.default_rng(7))
        assert np.array_equal(a_img, b_img)
        assert np.array_equal(a_kps, b_kps)

    def test_images_are_distinct(self):
        imgs, _ = make_synth_dataset(4, seed=1)
        assert not np.array_equal(imgs[0], imgs[1])

    def test_dataset_shapes(self):
        imgs, kps = make_synth_dataset(5, size=16, seed=2)
        assert imgs.shape == (5, 16, 16, 3)
        assert kps.shape == (5, NUM_KEYPOINTS, 2)
        assert imgs.dtype == np.float32
        assert kps.dtype == np.float64

    def test_targets_normalized(self):
        kps = np.array([[[8.0, 4.0]] * NUM_KEYPOINTS])
        t = targets_from_keypoints(kps, h=16, w=32)
        assert t.shape == (1, 1, 1, 2 * NUM_KEYPOINTS)
        assert t[0, 0, 0, 0] == pytest.approx(8.0 / 32)   # x over width
        assert t[0, 0, 0, 1] == pytest.approx(4.0 / 16)   # y over height


class TestTrainToy:
    def test_loss_decreases(self):
        net = Network(micro_config(), seed=0)
        imgs, kps = make_synth_dataset(4, size=16, seed=3)
        hist = train_toy(net, imgs, kps, epochs=12, batch_size=4,
                         sched=LRSchedule(1e-3, 3e-2, 6), seed=0)
        assert hist[-1].loss < hist[0].loss
        assert hist[-1].epe_px < hist[0].epe_px

    def test_bit_reproducible(self):
        imgs, kps = make_synth_dataset(4, size=16, seed=4)

        def run():
            net = Network(micro_config(), seed=1)
            log = io.StringIO()
            train_toy(net, imgs, kps, epochs=5, batch_size=2,
                      sched=LRSchedule(1e-3, 1e-2, 3), seed=9, log=log)
            return log.getvalue()

        assert run() == run()

    def test_history_fields(self):
        net = Network(micro_config(), seed=2)
        imgs, kps = make_synth_dataset(2, size=16, seed=5)
        sched = LRSchedule(1e-3, 1e-2, 2)
        hist = train_toy(net, imgs, kps, epochs=3, batch_size=2, sched=sched)
        assert [s.epoch for s in hist] == [0, 1, 2]
        assert hist[0].lr == pytest.approx(cyclical_lr(0, sched))
        assert hist[1].lr == pytest.approx(cyclical_lr(1, sched))

    def test_checkpoint_callback(self):
        net = Network(micro_config(), seed=3)
        imgs, kps = make_synth_dataset(2, size=16, seed=6)
        seen = []
        train_toy(net, imgs, kps, epochs=4, batch_size=2,
                  sched=LRSchedule(1e-3, 1e-3, 2),
                  checkpoint_every=2,
                  checkpoint_fn=lambda n, e: seen.append(e))
        assert seen == [1, 3]

    def test_empty_dataset_rejected(self):
        net = Network(micro_config(), seed=4)
        with pytest.raises(ValueError):
            train_toy(net, np.zeros((0, 16, 16, 3), np.float32),
                      np.zeros((0, 21, 2)), epochs=1)

    def test_divergence_surfaces(self):
        net = Network(micro_config(), seed=5)
        imgs, kps = make_synth_dataset(2, size=16, seed=7)
        with np.errstate(all="ignore"), pytest.raises(DivergenceError):
            train_toy(net, imgs, kps, epochs=60, batch_size=2,
                      sched=LRSchedule(5e3, 5e3, 2), momentum=0.0)
