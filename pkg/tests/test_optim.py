"""Lookahead-SGD and LR schedule contracts."""

import math

import numpy as np
import pytest

from bicap.optim import LrSchedule, init_optimizer, lr_at_step, sgd_lookahead_step
from bicap.tensor import ShapeError, Tensor


def make_param(value):
    return {"w": Tensor(np.asarray(value, dtype=np.float32), requires_grad=True)}


class TestLookahead:
    def test_alpha_one_sync_equals_fast_exactly(self):
        params = make_param([1.0, -2.0])
        opt = init_optimizer(params, k=3, alpha=1.0, momentum=0.0)
        for _ in range(3):
            sgd_lookahead_step(opt, {"w": np.array([0.5, 0.5], dtype=np.float32)}, 0.1)
        np.testing.assert_array_equal(opt.slow["w"], params["w"].data)

    def test_zero_grad_zero_momentum_keeps_weights(self):
        params = make_param([3.0])
        opt = init_optimizer(params, momentum=0.0)
        for _ in range(7):
            sgd_lookahead_step(opt, {"w": np.zeros(1, dtype=np.float32)}, 0.5)
        np.testing.assert_array_equal(params["w"].data, [3.0])

    def test_five_step_trace_midpoint(self):
        # k=5, alpha=0.5, constant gradient, momentum 0: after the sync the
        # slow weight sits at the midpoint of initial slow and final fast.
        params = make_param([1.0])
        opt = init_optimizer(params, k=5, alpha=0.5, momentum=0.0)
        lr, g = 0.1, 2.0
        fast = 1.0
        for _ in range(5):
            sgd_lookahead_step(opt, {"w": np.array([g], dtype=np.float32)}, lr)
            fast -= lr * g
        midpoint = 1.0 + 0.5 * (fast - 1.0)
        np.testing.assert_allclose(params["w"].data, np.float32(midpoint), rtol=1e-6)
        np.testing.assert_allclose(opt.slow["w"], np.float32(midpoint), rtol=1e-6)

    def test_hand_simulated_trace_with_momentum(self):
        params = make_param([0.5])
        opt = init_optimizer(params, k=5, alpha=0.5, momentum=0.9)
        lr = 0.05
        grads = [0.3, -0.1, 0.7, 0.2, -0.4, 0.6, 0.1]
        fast, slow, buf = np.float32(0.5), np.float32(0.5), np.float32(0.0)
        for i, g in enumerate(grads, start=1):
            sgd_lookahead_step(opt, {"w": np.array([g], dtype=np.float32)}, lr)
            buf = np.float32(0.9) * buf + np.float32(g)
            fast = fast - np.float32(lr) * buf
            if i % 5 == 0:
                slow = slow + np.float32(0.5) * (fast - slow)
                fast = slow
        np.testing.assert_allclose(params["w"].data, fast, rtol=1e-6)
        np.testing.assert_allclose(opt.slow["w"], slow, rtol=1e-6)

    def test_alpha_one_k_one_bit_identical_to_plain_sgd(self):
        rng = np.random.default_rng(0)
        params = make_param(rng.standard_normal(8))
        plain = params["w"].data.copy()
        buf = np.zeros(8, dtype=np.float32)
        opt = init_optimizer(params, k=1, alpha=1.0, momentum=0.9)
        for step in range(25):
            g = rng.standard_normal(8).astype(np.float32)
            lr = 0.01 * (step + 1)
            sgd_lookahead_step(opt, {"w": g}, lr)
            buf = np.float32(0.9) * buf + g
            plain = plain - np.float32(lr) * buf
            np.testing.assert_array_equal(params["w"].data, plain)

    def test_counter_stays_in_range(self):
        params = make_param([1.0])
        opt = init_optimizer(params, k=4)
        for _ in range(11):
            sgd_lookahead_step(opt, {"w": np.ones(1, dtype=np.float32)}, 0.01)
            assert 0 <= opt.counter < 4

    def test_shape_mismatch(self):
        params = make_param([1.0, 2.0])
        opt = init_optimizer(params)
        with pytest.raises(ShapeError):
            sgd_lookahead_step(opt, {"w": np.ones(3, dtype=np.float32)}, 0.1)


class TestLrSchedule:
    def test_warmup_end_is_max(self):
        # warmup covers 5% of total steps
        sched = LrSchedule(max_lr=0.4, total_steps=1000, warmup_fraction=0.05)
        assert sched.warmup_steps == 50
        assert lr_at_step(sched, 50) == 0.4

    def test_final_step_is_zero(self):
        sched = LrSchedule(max_lr=0.3, total_steps=400, warmup_fraction=0.05)
        assert abs(lr_at_step(sched, 400)) <= 1e-12

    def test_decay_midpoint_is_half(self):
        sched = LrSchedule(max_lr=0.2, total_steps=1050, warmup_fraction=0.05)
        mid = sched.warmup_steps + (sched.total_steps - sched.warmup_steps) // 2
        assert abs(lr_at_step(sched, mid) - 0.1) <= 1e-12

    def test_continuous_at_boundary(self):
        sched = LrSchedule(max_lr=0.7, total_steps=2000, warmup_fraction=0.05)
        w = sched.warmup_steps
        before = lr_at_step(sched, w)
        after = sched.max_lr * 0.5 * (1 + math.cos(math.pi * 0.0))
        assert abs(before - after) <= 1e-12

    def test_step_out_of_range(self):
        sched = LrSchedule(max_lr=0.1, total_steps=10, warmup_fraction=0.1)
        with pytest.raises(ValueError):
            lr_at_step(sched, 11)
        with pytest.raises(ValueError):
            lr_at_step(sched, -1)

    def test_warmup_at_least_one_step(self):
        sched = LrSchedule(max_lr=0.1, total_steps=5, warmup_fraction=0.01)
        assert sched.warmup_steps == 1
