"""Compare the compiled and numpy adapt-and-evaluate backends.

    python benchmarks/bench_kernels.py [--pairs 2000] [--repeat 3]

Each workload adapts B parameter vectors on l tasks (B * l pairs) with T
SGD steps and scores the result, once with gradients and once without.
"""

import argparse
import time

import numpy as np

from pacbus import kernels
from pacbus.baselearn import step_plan
from pacbus.core import RngStream
from pacbus.models import ModelSpec

WORKLOADS = [
    ("linear 2-2, T=1", ModelSpec.linear(2, 2, r=1.0), 10, 50, 1),
    ("mlp 2-16-16-2, T=1", ModelSpec.mlp((2, 16, 16, 2), r=2.0), 10, 50, 1),
    ("mlp 2-16-16-2, T=5", ModelSpec.mlp((2, 16, 16, 2), r=2.0), 10, 50, 5),
    ("mlp 16-32-10, T=1", ModelSpec.mlp((16, 32, 10), r=1.0), 10, 50, 1),
]


def workload(spec, m, q, T, pairs, seed=0):
    gen = np.random.default_rng(seed)
    l = 100
    B = max(1, pairs // l)
    thetas = gen.standard_normal((B, spec.param_count))
    thetas *= (0.9 * spec.radius / np.linalg.norm(thetas, axis=1))[:, None]

    def split(n):
        X = gen.standard_normal((l, n, spec.d))
        X /= np.maximum(1.0, np.linalg.norm(X, axis=2, keepdims=True))
        return X, gen.integers(0, spec.k, (l, n))

    Xtr, Ytr = split(m)
    Xev, Yev = split(q)
    plans = np.stack([step_plan("sgd", T, m, RngStream(seed).child("order", t)) for t in range(l)])
    lrs = 0.5 / np.arange(1, T + 1)
    ti = np.repeat(np.arange(B), l)
    ki = np.tile(np.arange(l), B)
    return thetas, ti, ki, Xtr, Ytr, Xev, Yev, plans, lrs


def timed(fn, spec, args, want_grad, repeat):
    thetas, ti, ki, Xtr, Ytr, Xev, Yev, plans, lrs = args
    s = spec.scaling
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(thetas, ti, ki, Xtr, Ytr, Xev, Yev, np.array(spec.widths), spec.bias, spec.activation,
           plans, lrs, spec.radius, s.min_loss, s.max_loss, want_grad, kernels.thread_count())
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--pairs", type=int, default=2000)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()
    names = sorted(kernels.BACKENDS)
    print(f"backends: {', '.join(names)}   threads: {kernels.thread_count()}   pairs: {args.pairs}")
    header = f"{'workload':<22}{'grad':>6}" + "".join(f"{n + ' (ms)':>16}" for n in names)
    if "compiled" in names:
        header += f"{'speedup':>10}"
    print(header)
    for label, spec, m, q, T in WORKLOADS:
        data = workload(spec, m, q, T, args.pairs)
        for want_grad in (False, True):
            times = {n: timed(kernels.BACKENDS[n], spec, data, want_grad, args.repeat) for n in names}
            row = f"{label:<22}{str(want_grad):>6}" + "".join(f"{1e3 * times[n]:>16.1f}" for n in names)
            if "compiled" in names:
                row += f"{times['python'] / times['compiled']:>9.1f}x"
            print(row)


if __name__ == "__main__":
    main()
