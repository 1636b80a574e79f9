"""Projected GD/SGD base learners and their uniform-stability constants."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import RngStream, project_to_ball
from .models import LossConstants, LossScaling, ModelSpec, batch_loss_grad


def beta_convex(c_L: float, T: int, alpha: float, m: int) -> float:
    """Stability of T projected (S)GD steps with step alpha on a convex,
    c_L-Lipschitz loss: 2 c_L^2 T alpha / m."""
    if T == 0:
        return 0.0
    if not (c_L > 0 and T > 0 and alpha > 0 and m > 0):
        raise ValueError("beta_convex needs positive c_L, T, alpha and m")
    return 2.0 * c_L * c_L * T * alpha / m


def nonconvex_expression(c_L, c_S, c, T, m):
    """Arithmetic core of :func:`beta_nonconvex`; accepts complex inputs."""
    q = c_S * c
    return (1.0 + 1.0 / q) / (m - 1) * (2.0 * c_L * c_L * c) ** (1.0 / (q + 1.0)) * T ** (q / (q + 1.0))


def beta_nonconvex(c_L: float, c_S: float, c: float, T: int, m: int, algorithm: str = "sgd") -> float:
    """Stability of T SGD steps with alpha_t <= c/t on a c_L-Lipschitz,
    c_S-smooth loss over m samples."""
    if algorithm != "sgd":
        raise ValueError("the non-convex stability bound holds for SGD with a c/t schedule, not GD")
    if m < 2:
        raise ValueError(f"non-convex stability bound needs m >= 2, got m={m}")
    if not (c_L > 0 and c_S > 0 and c > 0 and T > 0):
        raise ValueError("beta_nonconvex needs positive c_L, c_S, c and T")
    return float(nonconvex_expression(c_L, c_S, c, T, m))


def beta_effective(beta: float, m: int, n: int) -> float:
    """Stability term when n validation samples join the m training ones."""
    if m < 1 or n < 0:
        raise ValueError(f"need m >= 1 and n >= 0, got m={m}, n={n}")
    if n == 0:
        return beta
    return m * beta / (m + n)


@dataclass(frozen=True)
class StabilityBudget:
    """Base-learner description from which the stability constant follows.

    Exactly one of ``step_size`` (fixed alpha) and ``schedule_c`` (alpha_t =
    c/t) is set.  ``convex`` selects the convex or the non-convex bound.
    """

    algorithm: str
    steps: int
    constants: LossConstants
    m: int
    n: int = 0
    step_size: float | None = None
    schedule_c: float | None = None
    convex: bool = True

    def __post_init__(self):
        if self.algorithm not in ("gd", "sgd"):
            raise ValueError(f"algorithm must be 'gd' or 'sgd', got {self.algorithm!r}")
        if self.steps < 0:
            raise ValueError("steps T must be non-negative")
        if self.m < 1 or self.n < 0:
            raise ValueError(f"need m >= 1 and n >= 0, got m={self.m}, n={self.n}")
        if (self.step_size is None) == (self.schedule_c is None):
            raise ValueError("set exactly one of step_size and schedule_c")
        a0 = self.step_size if self.step_size is not None else self.schedule_c
        if not (np.isfinite(a0) and a0 >= 0):
            raise ValueError(f"step size must be finite and non-negative, got {a0}")
        if self.convex:
            if a0 > 2.0 / self.constants.smoothness:
                raise ValueError(f"step size {a0} exceeds 2/c_S = {2.0 / self.constants.smoothness:.6g}; "
                                 "the convex stability bound requires alpha <= 2/c_S")
        else:
            if self.schedule_c is None:
                raise ValueError("the non-convex bound requires a c/t step-size schedule")
            if self.algorithm != "sgd":
                raise ValueError("the non-convex bound holds for SGD only, not GD")
            if self.m < 2:
                raise ValueError("the non-convex bound needs m >= 2")

    def learning_rates(self) -> np.ndarray:
        t = np.arange(1, self.steps + 1, dtype=np.float64)
        if self.step_size is not None:
            return np.full(self.steps, float(self.step_size))
        return self.schedule_c / t

    def beta(self) -> float:
        if self.steps == 0:
            return 0.0
        if self.convex:
            total = float(np.sum(self.learning_rates()))
            if total == 0.0:
                return 0.0
            # fixed steps give 2 c_L^2 T alpha / m; a schedule sums its steps
            return beta_convex(self.constants.lipschitz, 1, total, self.m) if self.step_size is None \
                else beta_convex(self.constants.lipschitz, self.steps, self.step_size, self.m)
        if self.schedule_c == 0.0:
            return 0.0
        return beta_nonconvex(self.constants.lipschitz, self.constants.smoothness,
                              self.schedule_c, self.steps, self.m, self.algorithm)

    def stability_term(self) -> float:
        return beta_effective(self.beta(), self.m, self.n)

    def replace(self, **kw) -> "StabilityBudget":
        args = dict(algorithm=self.algorithm, steps=self.steps, constants=self.constants, m=self.m,
                    n=self.n, step_size=self.step_size, schedule_c=self.schedule_c, convex=self.convex)
        args.update(kw)
        return StabilityBudget(**args)


class AdaptResult(NamedTuple):
    theta: np.ndarray
    steps: int
    final_train_loss: float


def step_plan(algorithm: str, steps: int, m: int, rng: RngStream | None) -> np.ndarray:
    """Sample index used at each step: -1 for a full-batch GD step, else a
    fixed permutation of the training set (drawn from ``rng``) cycled."""
    if algorithm == "gd":
        return np.full(steps, -1, dtype=np.int64)
    if rng is None:
        raise ValueError("SGD needs an rng stream to fix the sample order")
    perm = rng.generator().permutation(m)
    return perm[np.arange(steps) % m].astype(np.int64)


def adapt(spec: ModelSpec, theta: np.ndarray, S, budget: StabilityBudget, rng: RngStream | None = None,
          scaling: LossScaling | None = None, radius: float | None = None) -> AdaptResult:
    """Run the base learner from ``theta`` on training split ``S = (X, Y)``.

    Each step is theta <- Proj(theta - alpha_t * grad), with the gradient of
    the mean scaled loss (GD) or of one sample in a fixed order (SGD).
    ``radius`` defaults to the model's projection radius; pass ``inf`` to
    skip projection.
    """
    X, Y = (np.asarray(a) for a in S)
    X = np.asarray(X, dtype=np.float64).reshape(-1, spec.d)
    Y = np.asarray(Y, dtype=np.int64).reshape(-1)
    if len(Y) == 0:
        raise ValueError("training split is empty")
    scaling = scaling or spec.scaling
    radius = spec.radius if radius is None else radius
    theta = spec.check_theta(theta).copy()
    if np.linalg.norm(theta) > radius * (1 + 1e-12):
        raise ValueError(f"initial ||theta|| exceeds the projection radius {radius:.6g}")
    plan = step_plan(budget.algorithm, budget.steps, len(Y), rng)
    for lr, j in zip(budget.learning_rates(), plan):
        Xs, Ys = (X, Y) if j < 0 else (X[j:j + 1], Y[j:j + 1])
        _, _, g = batch_loss_grad(spec, theta[None], Xs[None], Ys[None], scaling)
        theta = project_to_ball(theta - lr * g[0], radius)
    loss, _, _ = batch_loss_grad(spec, theta[None], X[None], Y[None], scaling, want_grad=False)
    return AdaptResult(theta, budget.steps, float(loss[0]))
