import math

import numpy as np
import pytest

from vithash.autodiff import Tensor
from vithash.errors import ConfigError
from vithash.optim import SGD, SgdConfig, learning_rate, sgd_step


class TestSchedule:
    cfg = SgdConfig(base_lr=0.1, warmup_steps=10, total_steps=30)

    @pytest.mark.parametrize(
        "step,expected",
        [(0, 0.0), (5, 0.05), (10, 0.1), (20, 0.05), (30, 0.0), (45, 0.0)],
    )
    def test_boundaries(self, step, expected):
        assert learning_rate(self.cfg, step) == pytest.approx(expected, abs=1e-15)

    def test_cosine_shape(self):
        step = 15
        expected = 0.1 * 0.5 * (1 + math.cos(math.pi * 5 / 20))
        assert learning_rate(self.cfg, step) == pytest.approx(expected)

    def test_warmup_increasing_then_decay(self):
        lrs = [learning_rate(self.cfg, s) for s in range(31)]
        assert all(a < b for a, b in zip(lrs[:10], lrs[1:11]))
        assert all(a > b for a, b in zip(lrs[10:30], lrs[11:31]))

    def test_no_warmup(self):
        assert learning_rate(SgdConfig(base_lr=0.2, warmup_steps=0, total_steps=4), 0) == 0.2

    @pytest.mark.parametrize(
        "kw",
        [dict(base_lr=0.0), dict(weight_decay=-1.0), dict(total_steps=0),
         dict(warmup_steps=3000), dict(momentum=1.0)],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            SgdConfig(**kw).validate()


class TestStep:
    def quadratic(self, p):
        return 0.5 * float((p.data ** 2).sum())

    def test_reduces_quadratic(self, rng):
        p = Tensor(rng.standard_normal(5), requires_grad=True)
        before = self.quadratic(p)
        p.grad = p.data.copy()
        opt = SGD([p], SgdConfig(base_lr=0.1, warmup_steps=0, total_steps=10))
        opt.step(1)
        assert self.quadratic(p) < before

    def test_update_formula(self):
        p = Tensor(np.array([2.0, -1.0]), requires_grad=True)
        p.grad = np.array([0.5, 0.5])
        cfg = SgdConfig(base_lr=0.1, weight_decay=0.01, warmup_steps=0, total_steps=10)
        lr = SGD([p], cfg).step(0)
        assert lr == 0.1
        np.testing.assert_allclose(p.data, [2.0 - 0.1 * (0.5 + 0.02), -1.0 - 0.1 * (0.5 - 0.01)])

    def test_free_function_matches_class(self, rng):
        x = rng.standard_normal(4)
        g = rng.standard_normal(4)
        a, b = Tensor(x.copy()), Tensor(x.copy())
        a.grad, b.grad = g, g
        cfg = SgdConfig(warmup_steps=2, total_steps=8)
        SGD([a], cfg).step(3)
        sgd_step([b], cfg, 3)
        np.testing.assert_array_equal(a.data, b.data)

    def test_momentum_accumulates(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        cfg = SgdConfig(base_lr=1.0, weight_decay=0.0, warmup_steps=0, total_steps=100, momentum=0.5)
        opt = SGD([p], cfg)
        for _ in range(2):
            p.grad = np.array([1.0])
            opt.step(0)
        assert p.data[0] == pytest.approx(-(1.0 + 1.5))

    def test_zero_grad(self):
        p = Tensor(np.ones(2), requires_grad=True)
        p.grad = np.ones(2)
        opt = SGD([p], SgdConfig())
        opt.zero_grad()
        assert p.grad is None
