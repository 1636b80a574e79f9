import os
import subprocess
import sys

import numpy as np
import pytest

from pacbus import kernels
from pacbus.baselearn import StabilityBudget, adapt, step_plan
from pacbus.core import RngStream
from pacbus.models import ModelSpec, batch_loss_grad, certified_network_constants, loss_grad

SPECS = [ModelSpec.linear(3, 4, r=1.5), ModelSpec.mlp((2, 6, 5, 3), r=2.0)]


def problem(spec, gen, B=7, l=5, m=6, q=4, T=3, algorithm="sgd"):
    thetas = gen.standard_normal((B, spec.param_count))
    thetas *= (spec.radius * gen.uniform(0.2, 1.0, B) / np.linalg.norm(thetas, axis=1))[:, None]
    def split(n):
        X = gen.standard_normal((l, n, spec.d))
        X /= np.maximum(1.0, np.linalg.norm(X, axis=2, keepdims=True))
        return X, gen.integers(0, spec.k, (l, n))
    Xtr, Ytr = split(m)
    Xev, Yev = split(q)
    plans = np.stack([step_plan(algorithm, T, m, RngStream(0).child("order", t)) for t in range(l)])
    lrs = 1.5 / np.arange(1, T + 1)
    ti = np.repeat(np.arange(B), l)
    ki = np.tile(np.arange(l), B)
    return thetas, ti, ki, Xtr, Ytr, Xev, Yev, plans, lrs


def call(fn, spec, args, radius, want_grad=True, adapted=True):
    thetas, ti, ki, Xtr, Ytr, Xev, Yev, plans, lrs = args
    s = spec.scaling
    return fn(thetas, ti, ki, Xtr, Ytr, Xev, Yev, np.array(spec.widths), spec.bias, spec.activation,
              plans, lrs, radius, s.min_loss, s.max_loss, want_grad, 2, adapted)


@pytest.mark.skipif("compiled" not in kernels.BACKENDS, reason="compiled backend not built")
@pytest.mark.parametrize("spec", SPECS)
@pytest.mark.parametrize("algorithm", ["gd", "sgd"])
@pytest.mark.parametrize("finite_radius", [True, False])
def test_backends_agree(spec, algorithm, finite_radius):
    gen = np.random.default_rng(0)
    args = problem(spec, gen, algorithm=algorithm)
    radius = spec.radius if finite_radius else np.inf
    a = call(kernels.BACKENDS["python"], spec, args, radius)
    b = call(kernels.BACKENDS["compiled"], spec, args, radius)
    for x, y in zip(a, b):
        assert np.allclose(x, y, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("backend", sorted(kernels.BACKENDS))
def test_kernel_matches_reference_learner(backend):
    spec = SPECS[1]
    gen = np.random.default_rng(1)
    args = problem(spec, gen)
    thetas, ti, ki, Xtr, Ytr, Xev, Yev, plans, lrs = args
    loss, acc, grad, adapted = call(kernels.BACKENDS[backend], spec, args, spec.radius)
    budget = StabilityBudget("sgd", 3, certified_network_constants(spec), 6, schedule_c=1.5, convex=False)
    for p in (0, 9, len(ti) - 1):
        t = ki[p]
        ref = adapt(spec, thetas[ti[p]], (Xtr[t], Ytr[t]), budget, RngStream(0).child("order", t))
        assert np.allclose(adapted[p], ref.theta, rtol=1e-12, atol=1e-14)
        l_ref, a_ref, _ = batch_loss_grad(spec, ref.theta[None], Xev[t][None], Yev[t][None], spec.scaling)
        assert loss[p] == pytest.approx(l_ref[0], rel=1e-12)
        assert acc[p] == a_ref[0]
        assert np.allclose(grad[p], loss_grad(spec, ref.theta, Xev[t], Yev[t]), rtol=1e-10, atol=1e-14)


@pytest.mark.parametrize("backend", sorted(kernels.BACKENDS))
def test_zero_steps_and_empty_batches(backend):
    spec = SPECS[0]
    gen = np.random.default_rng(2)
    thetas, ti, ki, Xtr, Ytr, Xev, Yev, _, _ = problem(spec, gen)
    fn = kernels.BACKENDS[backend]
    s = spec.scaling
    out = fn(thetas, ti, ki, Xtr, Ytr, Xev, Yev, np.array(spec.widths), False, False,
             np.zeros((5, 0), dtype=np.int64), np.zeros(0), spec.radius, s.min_loss, s.max_loss, False, 1, True)
    assert np.array_equal(out[3], thetas[ti])
    empty = fn(thetas, ti[:0], ki[:0], Xtr, Ytr, Xev, Yev, np.array(spec.widths), False, False,
               np.zeros((5, 0), dtype=np.int64), np.zeros(0), spec.radius, s.min_loss, s.max_loss)
    assert empty[0].shape == (0,)


def test_results_do_not_depend_on_thread_count():
    spec = SPECS[1]
    args = problem(spec, np.random.default_rng(3), B=40)
    thetas, ti, ki, Xtr, Ytr, Xev, Yev, plans, lrs = args
    s = spec.scaling
    outs = [kernels.adapt_eval(thetas, ti, ki, Xtr, Ytr, Xev, Yev, np.array(spec.widths), True, True, plans,
                               lrs, spec.radius, s.min_loss, s.max_loss, True, n) for n in (1, 3)]
    assert all(np.array_equal(a, b) for a, b in zip(outs[0], outs[1]))


def test_pure_backend_can_be_forced():
    env = dict(os.environ, PACBUS_PURE="1")
    out = subprocess.run([sys.executable, "-c", "from pacbus import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("PACBUS_THREADS", "1")
    assert kernels.thread_count() == 1
    monkeypatch.setenv("PACBUS_THREADS", "many")
    with pytest.raises(ValueError):
        kernels.thread_count()


def test_backends_reject_mixed_layouts():
    spec = SPECS[0]
    args = problem(spec, np.random.default_rng(4))
    thetas, ti, ki, Xtr, Ytr, Xev, Yev, plans, lrs = args
    for fn in kernels.BACKENDS.values():
        with pytest.raises(ValueError):
            fn(thetas, ti, ki, Xtr, Ytr, Xev, Yev, np.array(spec.widths), True, False, plans, lrs, 1.0, 0.0, 1.0)
