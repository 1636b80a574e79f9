import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pacbus.baselearn import StabilityBudget
from pacbus.bounds import (BoundReport, assemble_bound, binary_kl, certify, draw_parameters, kl_inverse,
                           kl_inverse_many, pac_bayes_regularizer, pac_bayes_regularizer_dkl)
from pacbus.core import PosteriorParams, RngStream, kl_diag_gaussian
from pacbus.models import LossScaling, ModelSpec, certified_linear_constants, certified_network_constants, init_params
from pacbus.tasks import gen_circle_tasks

probs = st.floats(0.0, 1.0)
budgets = st.floats(0.0, 5.0)


def r_bayes_decimal(kl, l, delta):
    getcontext().prec = 40
    arg = (Decimal(kl) + (2 * Decimal(l).sqrt() / Decimal(delta)).ln()) / (2 * Decimal(l))
    return float(arg.sqrt())


def test_regularizer_reference_value():
    val = pac_bayes_regularizer(0.0, 8, 0.01)
    assert val == pytest.approx(r_bayes_decimal(0, 8, "0.01"), rel=1e-15)
    assert val == pytest.approx(0.6293865136676724, rel=1e-15)


def test_regularizer_monotonicity_and_domain():
    vals = [pac_bayes_regularizer(1.0, l, 0.01) for l in range(8, 10001)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    gen = np.random.default_rng(0)
    for _ in range(50):
        kl, l, d = gen.uniform(0.01, 100), int(gen.integers(8, 10**5)), gen.uniform(1e-4, 0.5)
        assert pac_bayes_regularizer(2 * kl, l, d) > pac_bayes_regularizer(kl, l, d)
    with pytest.raises(ValueError, match="l >= 8"):
        pac_bayes_regularizer(0.0, 7, 0.01)
    with pytest.raises(ValueError):
        pac_bayes_regularizer(-1.0, 8, 0.01)
    with pytest.raises(ValueError):
        pac_bayes_regularizer(0.0, 8, 1.0)


def test_regularizer_derivative():
    for kl in (0.0, 0.3, 40.0):
        h = 1e-6
        lo = max(kl - h, 0.0)
        fd = (pac_bayes_regularizer(kl + h, 50, 0.01) - pac_bayes_regularizer(lo, 50, 0.01)) / (kl + h - lo)
        assert pac_bayes_regularizer_dkl(kl, 50, 0.01) == pytest.approx(fd, rel=1e-5)


def test_binary_kl_values():
    assert binary_kl(0.3, 0.3) == 0.0
    assert binary_kl(0.0, 0.5) == pytest.approx(math.log(2))
    assert binary_kl(1.0, 0.25) == pytest.approx(math.log(4))
    assert binary_kl(0.2, 0.6) == pytest.approx(0.2 * math.log(1 / 3) + 0.8 * math.log(2))


def test_kl_inverse_closed_forms():
    for p in (0.0, 0.2, 0.7, 1.0):
        assert kl_inverse(p, 0.0) == p
    for c in (0.01, 0.5, 3.0):
        assert kl_inverse(0.0, c) == pytest.approx(1 - math.exp(-c), abs=1e-9)
        assert kl_inverse(1.0, c) == 1.0


def test_kl_inverse_against_grid():
    q = np.linspace(0.0, 1.0, 10**6 + 1)
    ok = q[binary_kl(np.full_like(q, 0.1), q) <= 0.2]
    assert abs(kl_inverse(0.1, 0.2) - ok.max()) <= 1e-5


@settings(max_examples=300, deadline=None)
@given(probs, budgets)
def test_kl_inverse_brackets_the_supremum(p, c):
    q = kl_inverse(p, c)
    assert p <= q <= 1.0
    if c > 0 and p < 1 and q < 1:
        assert binary_kl(p, q) >= c - 1e-12                   # rounded up, never below
        # binary_kl carries ~1e-16 absolute rounding error next to p
        assert binary_kl(p, max(p, q - 2e-9)) <= c + 1e-15


@settings(max_examples=100, deadline=None)
@given(probs, budgets, budgets)
def test_kl_inverse_monotone_in_budget(p, c1, c2):
    lo, hi = sorted((c1, c2))
    assert kl_inverse(p, lo) <= kl_inverse(p, hi) + 1e-9


def test_kl_inverse_vectorized_and_errors():
    p = np.array([0.0, 0.1, 0.5, 1.0])
    out = kl_inverse_many(p, 0.3)
    assert np.allclose(out, [kl_inverse(x, 0.3) for x in p])
    with pytest.raises(ValueError):
        kl_inverse(1.2, 0.1)
    with pytest.raises(ValueError):
        kl_inverse(0.2, -0.1)


def test_assemble_bound_composition():
    assert assemble_bound(0.0, 0.0, 8, 0.01, 0.0) == pac_bayes_regularizer(0.0, 8, 0.01)
    b = StabilityBudget("gd", 3, certified_linear_constants(ModelSpec.linear(2, 2)), 10, 0, step_size=0.5)
    assert assemble_bound(0.1, 0.2, 20, 0.01, b.beta()) == assemble_bound(0.1, 0.2, 20, 0.01, b.stability_term())
    with pytest.raises(ValueError):
        assemble_bound(-0.1, 0.0, 8, 0.01, 0.0)


def report_fields(**kw):
    base = dict(empirical_term=0.1, kl_value=0.5, pac_bayes_regularizer=0.2, stability_term=0.05,
                total_bound=0.1 + 0.2 + 0.05, l=10, N=5, delta=0.01, delta_prime=0.01,
                per_task_certified=(0.1,), per_task_empirical=(0.05,), beta=0.05, m=3, n=0,
                guarantee_valid=True)
    base.update(kw)
    return base


def test_report_invariants_and_round_trip():
    r = BoundReport(**report_fields())
    assert BoundReport.from_dict(r.to_dict()) == r
    assert r.flag == "guarantee-valid"
    assert r.confidence == pytest.approx(0.98)
    with pytest.raises(ValueError, match="sum"):
        BoundReport(**report_fields(total_bound=0.4))
    with pytest.raises(ValueError):
        BoundReport(**report_fields(stability_term=-0.05, total_bound=0.1 + 0.2 - 0.05))


@pytest.fixture(scope="module")
def circle():
    pool = gen_circle_tasks(12, 6, 8, "meta-train", RngStream(0))
    spec = ModelSpec.mlp((2, 5, 2), r=1.5)
    psi0 = PosteriorParams.isotropic(init_params(spec, RngStream(1)), 1e-3)
    budget = StabilityBudget("sgd", 2, certified_network_constants(spec), 6, 8, schedule_c=0.5, convex=False)
    return pool, spec, psi0, budget


def test_certificate_of_zero_loss_tasks():
    pool = gen_circle_tasks(10, 4, 4, "meta-train", RngStream(2))
    spec = ModelSpec.linear(2, 2)
    psi = PosteriorParams(np.zeros(4), np.full(4, -200.0))
    budget = StabilityBudget("gd", 0, certified_linear_constants(spec), 4, 4, step_size=0.1)
    rep = certify(psi, psi, pool, spec, budget, 1, 0.01, 0.02, RngStream(3),
                  scaling=LossScaling(math.log(2), math.log(2) + 1.0))
    assert rep.per_task_empirical == (0.0,) * 10
    expect = kl_inverse(0.0, math.log(2 / 0.02)) + pac_bayes_regularizer(0.0, 10, 0.01) + 0.0
    assert rep.total_bound == pytest.approx(expect, rel=1e-15)
    assert rep.guarantee_valid


def test_certificate_dominates_plug_in(circle):
    pool, spec, psi0, budget = circle
    rep = certify(psi0, psi0, pool, spec, budget, 30, 0.01, 0.01, RngStream(4))
    assert all(c >= e for c, e in zip(rep.per_task_certified, rep.per_task_empirical))
    assert rep.empirical_term >= np.mean(rep.per_task_empirical)
    assert rep.total_bound == rep.empirical_term + rep.pac_bayes_regularizer + rep.stability_term
    assert rep.guarantee_valid
    union = certify(psi0, psi0, pool, spec, budget, 30, 0.01, 0.01, RngStream(4), union_bound=True)
    assert union.empirical_term >= rep.empirical_term
    assert union.confidence_mode == "union"


def test_certificate_is_deterministic_and_uses_kl(circle):
    pool, spec, psi0, budget = circle
    psi = psi0.replace(mean=psi0.mean * 0.9)
    a = certify(psi, psi0, pool, spec, budget, 10, 0.01, 0.01, RngStream(5))
    b = certify(psi, psi0, pool, spec, budget, 10, 0.01, 0.01, RngStream(5))
    assert a == b
    assert a.kl_value == kl_diag_gaussian(psi, psi0)


def test_draws_are_projected(circle):
    _, spec, psi0, _ = circle
    wide = psi0.replace(log_var=np.zeros(psi0.dim))
    thetas, raw, eps = draw_parameters(wide, 20, RngStream(6), spec.radius)
    assert all(np.linalg.norm(t) <= spec.radius for t in thetas)
    assert np.allclose(raw, wide.mean + eps)


def test_certificate_flags(circle):
    pool, spec, psi0, budget = circle
    convex = StabilityBudget("sgd", 2, budget.constants, 6, 8, schedule_c=0.2, convex=True)
    rep = certify(psi0, psi0, pool, spec, convex, 5, 0.01, 0.01, RngStream(7))
    assert not rep.guarantee_valid and any("non-convex model" in n for n in rep.notes)
    heur = certify(psi0, psi0, pool, spec, budget, 5, 0.01, 0.01, RngStream(7), heuristic=True)
    assert not heur.guarantee_valid and heur.flag == "heuristic"


def test_certificate_preconditions(circle):
    pool, spec, psi0, budget = circle
    with pytest.raises(ValueError, match="l >= 8"):
        certify(psi0, psi0, pool.subset(range(5)), spec, budget, 5, 0.01, 0.01, RngStream(0))
    with pytest.raises(ValueError, match="below 1"):
        certify(psi0, psi0, pool, spec, budget, 5, 0.6, 0.5, RngStream(0))
    with pytest.raises(ValueError, match="stability budget"):
        certify(psi0, psi0, pool, spec, budget.replace(m=7), 5, 0.01, 0.01, RngStream(0))
    with pytest.raises(ValueError):
        certify(psi0, psi0, pool, ModelSpec.mlp((3, 5, 2)), budget, 5, 0.01, 0.01, RngStream(0))


def test_no_validation_reduction(circle):
    pool, spec, psi0, budget = circle
    stripped = pool.without_validation()
    b0 = budget.replace(n=0)
    a = certify(psi0, psi0, stripped, spec, b0, 20, 0.01, 0.01, RngStream(8), validation=True)
    b = certify(psi0, psi0, pool, spec, b0, 20, 0.01, 0.01, RngStream(8), validation=False)
    assert a.to_dict() == b.to_dict()
