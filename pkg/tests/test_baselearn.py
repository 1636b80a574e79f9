import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pacbus.baselearn import (StabilityBudget, adapt, beta_convex, beta_effective, beta_nonconvex,
                              nonconvex_expression, step_plan)
from pacbus.core import RngStream
from pacbus.models import LossConstants, ModelSpec, certified_linear_constants, scaled_ce_loss

pos = st.floats(1e-3, 1e3)


def linear_budget(spec, m, steps, alpha, algorithm="gd", n=0):
    return StabilityBudget(algorithm, steps, certified_linear_constants(spec), m, n, step_size=alpha)


def test_beta_convex_arithmetic():
    assert beta_convex(0.5, 4, 1.0, 10) == pytest.approx(0.2, rel=1e-15)
    assert beta_convex(0.5, 0, 1.0, 10) == 0.0
    with pytest.raises(ValueError):
        beta_convex(0.5, 1, 1.0, 0)


@settings(max_examples=20, deadline=None)
@given(pos, st.integers(1, 100), pos, st.integers(1, 1000))
def test_beta_convex_scaling(c_L, T, alpha, m):
    b = beta_convex(c_L, T, alpha, m)
    assert beta_convex(c_L, T, alpha, 2 * m) == pytest.approx(b / 2, rel=1e-12)
    assert beta_convex(c_L, 2 * T, alpha, m) == pytest.approx(2 * b, rel=1e-12)


def test_beta_nonconvex_arithmetic():
    # exponent on T is 1/3 and the Lipschitz factor is (2 * 0.25 * 1)^(1/1.5)
    val = beta_nonconvex(0.5, 0.5, 1.0, 10, 11)
    assert val == pytest.approx(3 / 10 * 0.5 ** (2 / 3) * 10 ** (1 / 3), rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(pos, pos, pos, st.integers(2, 10**6))
def test_beta_nonconvex_monotone(c_L, c_S, c, m):
    assert beta_nonconvex(c_L, c_S, c, 2, m) > beta_nonconvex(c_L, c_S, c, 1, m)
    assert beta_nonconvex(c_L, c_S, c, 5, 10 * m) < beta_nonconvex(c_L, c_S, c, 5, m)


def test_beta_nonconvex_vanishes_with_m_and_rejects_bad_inputs():
    assert beta_nonconvex(0.5, 0.5, 1.0, 10, 10**9) < 1e-8
    with pytest.raises(ValueError):
        beta_nonconvex(0.5, 0.5, 1.0, 10, 1)
    with pytest.raises(ValueError, match="GD"):
        beta_nonconvex(0.5, 0.5, 1.0, 10, 10, algorithm="gd")


def test_nonconvex_expression_accepts_complex_step():
    h = 1e-30
    d = nonconvex_expression(0.5 + 1j * h, 0.5, 1.0, 10, 11).imag / h
    fd = (beta_nonconvex(0.5 + 1e-6, 0.5, 1.0, 10, 11) - beta_nonconvex(0.5 - 1e-6, 0.5, 1.0, 10, 11)) / 2e-6
    assert d == pytest.approx(fd, rel=1e-7)


def test_beta_effective():
    assert beta_effective(0.2, 10, 0) == 0.2
    assert beta_effective(0.2, 10, 250) == pytest.approx(0.2 * 10 / 260, rel=1e-15)
    assert beta_effective(0.2, 10, 250) == pytest.approx(0.007692, abs=5e-7)
    assert beta_effective(0.2, 10, 10**12) < 1e-11
    with pytest.raises(ValueError):
        beta_effective(0.2, 0, 1)


def test_budget_validation():
    spec = ModelSpec.linear(2, 2)
    c = certified_linear_constants(spec)
    limit = 2.0 / c.smoothness
    StabilityBudget("gd", 3, c, 10, step_size=limit)
    with pytest.raises(ValueError, match="2/c_S"):
        StabilityBudget("gd", 3, c, 10, step_size=limit * 1.001)
    with pytest.raises(ValueError, match="exactly one"):
        StabilityBudget("gd", 3, c, 10)
    with pytest.raises(ValueError, match="schedule"):
        StabilityBudget("sgd", 3, c, 10, step_size=0.1, convex=False)
    with pytest.raises(ValueError, match="SGD"):
        StabilityBudget("gd", 3, c, 10, schedule_c=0.1, convex=False)
    with pytest.raises(ValueError):
        StabilityBudget("adam", 3, c, 10, step_size=0.1)


def test_budget_beta_and_schedules():
    c = LossConstants(0.5, 0.1)
    fixed = StabilityBudget("sgd", 4, c, 10, 0, step_size=1.0)
    assert fixed.beta() == pytest.approx(0.2)
    assert np.array_equal(fixed.learning_rates(), [1.0] * 4)
    sched = StabilityBudget("sgd", 4, c, 10, 0, schedule_c=1.0)
    assert sched.beta() == pytest.approx(2 * 0.25 * (1 + 1 / 2 + 1 / 3 + 1 / 4) / 10)
    nc = StabilityBudget("sgd", 4, c, 10, 5, schedule_c=1.0, convex=False)
    assert nc.beta() == beta_nonconvex(0.5, 0.1, 1.0, 4, 10)
    assert nc.stability_term() == pytest.approx(nc.beta() * 10 / 15)
    assert nc.replace(n=0).stability_term() == nc.beta()
    assert StabilityBudget("gd", 0, c, 10, step_size=1.0).beta() == 0.0


def test_step_plan():
    assert np.array_equal(step_plan("gd", 3, 5, None), [-1, -1, -1])
    p = step_plan("sgd", 12, 5, RngStream(1).child("order", 3))
    assert sorted(p[:5]) == list(range(5))
    assert np.array_equal(p[5:10], p[:5])
    assert np.array_equal(p, step_plan("sgd", 12, 5, RngStream(1).child("order", 3)))
    with pytest.raises(ValueError):
        step_plan("sgd", 3, 5, None)


def _task(gen, spec, m):
    Z = gen.standard_normal((m, spec.d))
    Z /= np.maximum(1.0, np.linalg.norm(Z, axis=1, keepdims=True))
    return Z, gen.integers(0, spec.k, m)


def test_zero_steps_and_zero_step_size_are_no_ops():
    spec = ModelSpec.linear(3, 2)
    gen = np.random.default_rng(0)
    S = _task(gen, spec, 6)
    theta = gen.standard_normal(spec.param_count) * 0.1
    assert np.array_equal(adapt(spec, theta, S, linear_budget(spec, 6, 0, 0.5)).theta, theta)
    assert np.array_equal(adapt(spec, theta, S, linear_budget(spec, 6, 7, 0.0)).theta, theta)


def test_adaptation_descends_on_separable_task():
    spec = ModelSpec.linear(2, 2, r=1.0)
    alpha = 1.0 / certified_linear_constants(spec).smoothness
    for seed in range(100):
        gen = np.random.default_rng(seed)
        u = gen.standard_normal(2)
        u /= np.linalg.norm(u)
        Z = np.stack([u, -u]) * gen.uniform(0.2, 1.0)
        Y = np.array([0, 1])
        theta = gen.standard_normal(4)
        theta *= gen.uniform(0, spec.radius) / np.linalg.norm(theta)
        res = adapt(spec, theta, (Z, Y), linear_budget(spec, 2, 10, alpha))
        assert res.final_train_loss < scaled_ce_loss(spec, theta, Z, Y)
        assert np.linalg.norm(res.theta) <= spec.radius


def test_adapt_sgd_order_and_projection():
    spec = ModelSpec.mlp((2, 4, 2), r=0.5)
    gen = np.random.default_rng(1)
    S = _task(gen, spec, 5)
    theta = gen.standard_normal(spec.param_count)
    theta *= 0.49 / np.linalg.norm(theta)
    from pacbus.models import certified_network_constants
    budget = StabilityBudget("sgd", 7, certified_network_constants(spec), 5, schedule_c=3.0, convex=False)
    a = adapt(spec, theta, S, budget, RngStream(2))
    b = adapt(spec, theta, S, budget, RngStream(2))
    assert np.array_equal(a.theta, b.theta)
    assert np.linalg.norm(a.theta) <= spec.radius
    with pytest.raises(ValueError):
        adapt(spec, theta * 10, S, budget, RngStream(2))


def test_empirical_stability_small():
    # replace one training sample; the loss on a fresh point moves by at most beta
    spec = ModelSpec.linear(3, 3, r=1.0)
    m, T = 10, 5
    alpha = 2.0 / certified_linear_constants(spec).smoothness
    budget = linear_budget(spec, m, T, alpha, "sgd")
    gen = np.random.default_rng(3)
    beta = budget.beta()
    worst = 0.0
    for trial in range(50):
        Z, Y = _task(gen, spec, m)
        Z2, Y2 = Z.copy(), Y.copy()
        i = gen.integers(m)
        Z2[i], Y2[i] = _task(gen, spec, 1)[0][0], gen.integers(3)
        theta = gen.standard_normal(spec.param_count)
        theta *= gen.uniform(0, spec.radius) / np.linalg.norm(theta)
        z, y = _task(gen, spec, 1)
        rng = RngStream(trial)
        a = adapt(spec, theta, (Z, Y), budget, rng).theta
        b = adapt(spec, theta, (Z2, Y2), budget, rng).theta
        worst = max(worst, abs(scaled_ce_loss(spec, a, z, y) - scaled_ce_loss(spec, b, z, y)))
    assert worst <= beta
    assert math.isfinite(beta)
