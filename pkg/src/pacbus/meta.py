"""Meta-training of the Gaussian over initializations: full-batch bound
minimization, its task mini-batch variant, the re-weighted heuristic, and
first-order MAML-style prior training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import kernels
from .baselearn import StabilityBudget, nonconvex_expression
from .bounds import MIN_TASKS, pac_bayes_regularizer, pac_bayes_regularizer_dkl, task_step_plans
from .core import (PosteriorParams, RngStream, kl_diag_gaussian, kl_diag_gaussian_grad, project_to_ball,
                   project_vjp, sample_posterior)
from .models import (CE_LOGIT_SMOOTHNESS, LossScaling, ModelSpec, _network_recursion, batch_loss_grad,
                     linear_hvp, logit_gradient_bound)
from .tasks import TaskPool

GRADIENT_MODES = ("first-order", "exact-linear")
COMPLEX_STEP = 1e-30


class TrainingDivergence(ArithmeticError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"meta-objective became {value!r} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    meta_lr: float
    iterations: int
    batch_size: int | None = None          # None: all tasks every step
    gradient_mode: str = "first-order"
    lambda1: float = 1.0
    lambda2: float = 1.0
    constant_samples: int = 1
    seed: int = 0
    samples_per_step: int = 1
    delta: float = 0.005
    early_stop: bool = False
    early_stop_tol: float = 1e-6
    early_stop_patience: int = 50
    learn_variance: bool = True

    def __post_init__(self):
        if not (self.meta_lr > 0 and np.isfinite(self.meta_lr)):
            raise ValueError("meta learning rate must be positive and finite")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"gradient mode must be one of {GRADIENT_MODES}")
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative")
        if self.constant_samples < 1 or self.samples_per_step < 1:
            raise ValueError("sample counts must be positive")


@dataclass(frozen=True)
class MetaObjective:
    value: float
    empirical: float
    r_bayes: float
    beta: float
    kl: float
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self):
        if self.value != self.empirical + self.lambda1 * self.r_bayes + self.lambda2 * self.beta:
            raise ValueError("objective value must equal its weighted components")


@dataclass
class MetaProblem:
    """Everything the objective needs besides psi.

    ``heuristic`` switches to raw cross-entropy, unprojected single-step GD
    with step ``base_lr`` and a stability term built from constants
    estimated at posterior draws.
    """

    pool: TaskPool
    psi0: PosteriorParams
    spec: ModelSpec
    budget: StabilityBudget | None
    order_rng: RngStream
    delta: float = 0.005
    lambda1: float = 1.0
    lambda2: float = 1.0
    validation: bool = True
    heuristic: bool = False
    base_lr: float = 0.0
    constant_samples: int = 1
    nthreads: int | None = None
    arrays: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if self.pool.d != self.spec.d or self.pool.k != self.spec.k:
            raise ValueError("task pool and model disagree on d or k")
        if self.heuristic:
            self.scaling = LossScaling.identity()
            self.radius = math.inf
            self.lrs = np.array([float(self.base_lr)])
            self.plans = np.full((self.pool.l, 1), -1, dtype=np.int64)
        else:
            if self.budget is None:
                raise ValueError("a stability budget is required outside heuristic mode")
            self.scaling = self.spec.scaling
            self.radius = self.spec.radius
            self.lrs = self.budget.learning_rates()
            self.plans = task_step_plans(self.pool, self.budget, self.order_rng)
        self.arrays = self.pool.stacked(self.validation)

    @property
    def l(self) -> int:
        return self.pool.l


@dataclass
class StepInfo:
    objective: MetaObjective
    d_mean: np.ndarray
    d_log_var: np.ndarray
    c_L: float = float("nan")
    c_S: float = float("nan")
    eps: np.ndarray | None = None
    adapted: np.ndarray | None = None


# ------------------------------------------------------------ pieces

def _stability(problem: MetaProblem, psi: PosteriorParams, rng: RngStream, want_grad: bool):
    """(beta, d_mean, d_log_var, c_L, c_S)."""
    D = psi.dim
    if not problem.heuristic:
        b = problem.budget
        c = b.constants
        return b.stability_term(), np.zeros(D), np.zeros(D), c.lipschitz, c.smoothness
    return heuristic_beta(problem.spec, psi, rng.child("constants"), problem.constant_samples,
                          problem.pool.m, problem.base_lr, want_grad)


def heuristic_beta(spec: ModelSpec, psi: PosteriorParams, rng: RngStream, samples: int, m: int,
                   alpha: float, want_grad: bool = True):
    """One-step non-convex stability value from constants estimated at
    ``samples`` posterior draws (maximum over draws), with its gradient in
    psi through the maximizing draws.

    Returns (beta, d_mean, d_log_var, c_L, c_S).
    """
    if spec.arch != "mlp":
        raise ValueError("estimated constants are defined for the MLP")
    G, S = logit_gradient_bound(None), CE_LOGIT_SMOOTHNESS
    draws = []
    for j in range(samples):
        s = sample_posterior(psi, rng.child(j))
        norms, bnorms, svecs = [], [], []
        for W, bvec in spec.unflatten(s.theta):
            U, sv, Vt = np.linalg.svd(W, full_matrices=False)
            norms.append(float(sv[0]))
            svecs.append((U[:, 0], Vt[0]))
            bnorms.append(float(np.linalg.norm(bvec)))
        c_l, c_s = _network_recursion(norms, bnorms, spec.r_z, G, S, True, True)
        draws.append((float(c_l), float(c_s), s, norms, bnorms, svecs))
    a = max(range(samples), key=lambda j: draws[j][0])
    b = max(range(samples), key=lambda j: draws[j][1])
    c_L, c_S = draws[a][0], draws[b][1]
    if alpha <= 0:
        return 0.0, np.zeros(psi.dim), np.zeros(psi.dim), c_L, c_S
    beta = float(nonconvex_expression(c_L, c_S, alpha, 1, m))
    if not want_grad:
        return beta, np.zeros(psi.dim), np.zeros(psi.dim), c_L, c_S

    L = spec.n_layers
    x0 = np.array(draws[a][3] + draws[a][4] + draws[b][3] + draws[b][4], dtype=np.complex128)

    def h(x):
        cl, _ = _network_recursion(x[:L], x[L:2 * L], spec.r_z, G, S, True, True)
        _, cs = _network_recursion(x[2 * L:3 * L], x[3 * L:], spec.r_z, G, S, True, True)
        return nonconvex_expression(cl, cs, alpha, 1, m)

    dx = np.empty(4 * L)
    for i in range(4 * L):
        x = x0.copy()
        x[i] += 1j * COMPLEX_STEP
        dx[i] = h(x).imag / COMPLEX_STEP
    d_mean = np.zeros(psi.dim)
    d_log_var = np.zeros(psi.dim)
    for slot, j in ((0, a), (2 * L, b)):
        g_theta = np.zeros(psi.dim)
        s = draws[j][2]
        for li, ((w_sl, b_sl, _, _), (u, v)) in enumerate(zip(spec.layer_slices, draws[j][5])):
            g_theta[w_sl] += dx[slot + li] * np.outer(u, v).reshape(-1)
            bvec = s.theta[b_sl]
            bn = np.linalg.norm(bvec)
            if bn > 0:
                g_theta[b_sl] += dx[slot + L + li] * bvec / bn
        d_mean += g_theta
        d_log_var += g_theta * s.eps * psi.std * 0.5
    return beta, d_mean, d_log_var, c_L, c_S


def _exact_linear_grad(problem: MetaProblem, theta0: np.ndarray, task: int, g_final: np.ndarray):
    """Pull the evaluation-loss gradient back through the projected GD/SGD
    steps of one task (linear model), returning d loss / d theta0."""
    spec = problem.spec
    Xtr, Ytr = problem.arrays[0][task], problem.arrays[1][task]
    pre, prev = [], []
    theta = theta0
    for lr, j in zip(problem.lrs, problem.plans[task]):
        Xs, Ys = (Xtr, Ytr) if j < 0 else (Xtr[j:j + 1], Ytr[j:j + 1])
        _, _, g = batch_loss_grad(spec, theta[None], Xs[None], Ys[None], problem.scaling)
        u = theta - lr * g[0]
        prev.append((theta, Xs, Ys, lr))
        pre.append(u)
        theta = project_to_ball(u, problem.radius)
    v = g_final
    for u, (th, Xs, Ys, lr) in zip(reversed(pre), reversed(prev)):
        v = project_vjp(u, problem.radius, v)
        v = v - lr * linear_hvp(spec, th, Xs, Ys, v, problem.scaling)
    return v


def evaluate_objective(psi: PosteriorParams, problem: MetaProblem, rng: RngStream,
                       task_indices: np.ndarray | None = None, mode: str = "first-order",
                       want_grad: bool = True, samples: int = 1, l_total: int | None = None) -> StepInfo:
    """Objective value and gradient for one meta-step.

    ``rng.child("theta", j)`` supplies draw j.  ``task_indices`` (with
    repetition allowed) selects a task batch; the regularizer always uses
    ``l_total`` (default: all tasks in the problem).
    """
    if mode not in GRADIENT_MODES:
        raise ValueError(f"gradient mode must be one of {GRADIENT_MODES}")
    if mode == "exact-linear" and problem.spec.arch != "linear":
        raise ValueError("exact-linear meta-gradients need the linear model")
    spec = problem.spec
    l_total = l_total or problem.l
    tasks = np.arange(problem.l) if task_indices is None else np.asarray(task_indices, dtype=np.int64)
    Xtr, Ytr, Xev, Yev = problem.arrays
    D = psi.dim
    g_mean = np.zeros(D)
    g_logv = np.zeros(D)
    emp = 0.0
    eps_rec, adapted_rec = [], []
    nthreads = problem.nthreads or kernels.thread_count()
    for j in range(samples):
        s = sample_posterior(psi, rng.child("theta", j))
        theta0 = project_to_ball(s.theta, problem.radius)
        loss, _, grads, adapted = kernels.adapt_eval(
            theta0[None], np.zeros(len(tasks), dtype=np.int64), tasks, Xtr, Ytr, Xev, Yev,
            np.array(spec.widths), spec.bias, spec.activation, problem.plans, problem.lrs, problem.radius,
            problem.scaling.min_loss, problem.scaling.max_loss, want_grad, nthreads, True)
        emp += float(np.mean(loss))
        eps_rec.append(s.eps)
        adapted_rec.append(adapted)
        if not want_grad:
            continue
        if mode == "exact-linear":
            g0 = np.mean([_exact_linear_grad(problem, theta0, t, grads[i]) for i, t in enumerate(tasks)], axis=0)
        else:
            g0 = grads.mean(axis=0)
        g_raw = project_vjp(s.theta, problem.radius, g0)
        g_mean += g_raw
        g_logv += g_raw * s.eps * psi.std * 0.5
    emp /= samples
    g_mean /= samples
    g_logv /= samples

    kl = kl_diag_gaussian(psi, problem.psi0)
    if l_total >= MIN_TASKS:
        reg = pac_bayes_regularizer(kl, l_total, problem.delta)
    elif problem.lambda1 == 0:
        reg = 0.0
    else:
        raise ValueError(f"the PAC-Bayes term needs at least {MIN_TASKS} tasks")
    beta, b_mean, b_logv, c_L, c_S = _stability(problem, psi, rng, want_grad)
    value = emp + problem.lambda1 * reg + problem.lambda2 * beta
    obj = MetaObjective(value, emp, reg, beta, kl, problem.lambda1, problem.lambda2)
    if want_grad:
        if problem.lambda1 and reg > 0:
            k_mean, k_logv = kl_diag_gaussian_grad(psi, problem.psi0)
            w = problem.lambda1 * pac_bayes_regularizer_dkl(kl, l_total, problem.delta)
            g_mean = g_mean + w * k_mean
            g_logv = g_logv + w * k_logv
        if problem.lambda2:
            g_mean = g_mean + problem.lambda2 * b_mean
            g_logv = g_logv + problem.lambda2 * b_logv
    return StepInfo(obj, g_mean, g_logv, c_L, c_S, eps_rec[0], adapted_rec[0])


def meta_objective(psi: PosteriorParams, problem: MetaProblem, rng: RngStream,
                   task_indices: np.ndarray | None = None, l_total: int | None = None) -> MetaObjective:
    return evaluate_objective(psi, problem, rng, task_indices, want_grad=False, l_total=l_total).objective


def meta_gradient(psi: PosteriorParams, problem: MetaProblem, rng: RngStream, mode: str = "first-order",
                  task_indices: np.ndarray | None = None) -> tuple:
    info = evaluate_objective(psi, problem, rng, task_indices, mode)
    return info.d_mean, info.d_log_var


def frozen_surrogate(psi: PosteriorParams, problem: MetaProblem, eps: np.ndarray, shifts: np.ndarray,
                     task_indices: np.ndarray | None = None) -> float:
    """Objective with each task's adaptation displacement held fixed:
    mean_i L_ev(P(mu + sigma eps) + shift_i) + lambda1 R + lambda2 beta.
    Its gradient is what the first-order mode computes."""
    spec = problem.spec
    tasks = np.arange(problem.l) if task_indices is None else np.asarray(task_indices)
    theta0 = project_to_ball(psi.mean + psi.std * eps, problem.radius)
    thetas = theta0[None] + shifts
    _, _, Xev, Yev = problem.arrays
    loss, _, _ = batch_loss_grad(spec, thetas, Xev[tasks], Yev[tasks], problem.scaling, want_grad=False)
    kl = kl_diag_gaussian(psi, problem.psi0)
    reg = pac_bayes_regularizer(kl, problem.l, problem.delta) if problem.l >= MIN_TASKS else 0.0
    beta = problem.budget.stability_term() if problem.budget is not None else 0.0
    return float(np.mean(loss)) + problem.lambda1 * reg + problem.lambda2 * beta


# -------------------------------------------------------------- loops

LogSink = Callable[[dict], None] | list | None


def _emit(log: LogSink, record: dict):
    if log is None:
        return
    if isinstance(log, list):
        log.append(record)
    else:
        log(record)


def _record(it: int, info: StepInfo, psi: PosteriorParams) -> dict:
    o = info.objective
    return {"iteration": it, "B": o.value, "empirical": o.empirical, "r_bayes": o.r_bayes,
            "beta": o.beta, "kl": o.kl, "lambda1": o.lambda1, "lambda2": o.lambda2,
            "c_L": info.c_L, "c_S": info.c_S, "mean_norm": float(np.linalg.norm(psi.mean))}


def _run(config: TrainConfig, problem: MetaProblem, psi: PosteriorParams, log: LogSink, start: int,
         batch: int | None, stop_after: int | None = None) -> PosteriorParams:
    root = RngStream(config.seed).child("meta")
    still, prev = 0, None
    end = config.iterations if stop_after is None else min(config.iterations, stop_after)
    for it in range(start, end):
        rng = root.child(it)
        idx = None
        if batch is not None:
            idx = rng.child("batch").generator().integers(0, problem.l, batch)
        info = evaluate_objective(psi, problem, rng, idx, config.gradient_mode,
                                  samples=config.samples_per_step)
        value = info.objective.value
        if not np.isfinite(value) or not (np.all(np.isfinite(info.d_mean)) and np.all(np.isfinite(info.d_log_var))):
            raise TrainingDivergence(it, value)
        _emit(log, _record(it, info, psi))
        new_mean = psi.mean - config.meta_lr * info.d_mean
        new_logv = psi.log_var - config.meta_lr * info.d_log_var if config.learn_variance else psi.log_var
        with np.errstate(over="ignore"):
            finite_std = np.all(np.isfinite(np.exp(0.5 * new_logv)))
        if not (np.all(np.isfinite(new_mean)) and np.all(np.isfinite(new_logv)) and finite_std):
            raise TrainingDivergence(it, value)
        psi = PosteriorParams(new_mean, new_logv)
        if config.early_stop:
            still = still + 1 if prev is not None and abs(value - prev) < config.early_stop_tol else 0
            prev = value
            if still >= config.early_stop_patience:
                break
    return psi


def _problem(config, pool, psi0, spec, budget, **kw) -> MetaProblem:
    order = RngStream(config.seed).child("base")
    return MetaProblem(pool, psi0, spec, budget, order, config.delta, config.lambda1, config.lambda2,
                       constant_samples=config.constant_samples, **kw)


def pacbus_train(config: TrainConfig, pool: TaskPool, psi0: PosteriorParams, spec: ModelSpec,
                 budget: StabilityBudget, log: LogSink = None, psi: PosteriorParams | None = None,
                 start: int = 0, stop_after: int | None = None) -> PosteriorParams:
    """Gradient descent on the bound over all tasks, starting from psi0
    (or from ``psi`` at iteration ``start`` when resuming)."""
    if config.lambda1 != 1.0 or config.lambda2 != 1.0:
        raise ValueError("bound minimization uses unit weights; use pacbus_h_train for re-weighting")
    if pool.l < MIN_TASKS:
        raise ValueError(f"need at least {MIN_TASKS} tasks, got {pool.l}")
    problem = _problem(config, pool, psi0, spec, budget)
    return _run(config, problem, psi or psi0, log, start, None, stop_after)


def pacbus_train_minibatch(config: TrainConfig, pool: TaskPool, psi0: PosteriorParams, spec: ModelSpec,
                           budget: StabilityBudget, log: LogSink = None, psi: PosteriorParams | None = None,
                           start: int = 0, stop_after: int | None = None) -> PosteriorParams:
    """As :func:`pacbus_train` but each step averages a batch of
    ``config.batch_size`` tasks drawn uniformly with replacement; the
    regularizer still counts all l tasks."""
    if config.batch_size is None or config.batch_size > pool.l:
        raise ValueError("batch size must be set and at most the number of tasks")
    if config.lambda1 != 1.0 or config.lambda2 != 1.0:
        raise ValueError("bound minimization uses unit weights")
    if pool.l < MIN_TASKS:
        raise ValueError(f"need at least {MIN_TASKS} tasks, got {pool.l}")
    problem = _problem(config, pool, psi0, spec, budget)
    return _run(config, problem, psi or psi0, log, start, config.batch_size, stop_after)


def pacbus_h_train(config: TrainConfig, pool: TaskPool, psi0: PosteriorParams, spec: ModelSpec,
                   base_lr: float, log: LogSink = None, psi: PosteriorParams | None = None,
                   start: int = 0, stop_after: int | None = None) -> PosteriorParams:
    """Heuristic: raw cross-entropy, one unprojected GD step per task,
    stability term from constants estimated at posterior draws, and the two
    regularizers weighted by lambda1 and lambda2."""
    if config.gradient_mode != "first-order":
        raise ValueError("the heuristic supports first-order meta-gradients only")
    problem = _problem(config, pool, psi0, spec, None, heuristic=True, base_lr=base_lr)
    return _run(config, problem, psi or psi0, log, start, config.batch_size, stop_after)


def train_prior(pool: TaskPool, spec: ModelSpec, budget: StabilityBudget | None, iterations: int, lr: float,
                rng: RngStream, variance: float, init: np.ndarray | None = None, heuristic_lr: float | None = None,
                batch_size: int | None = None, log: LogSink = None) -> PosteriorParams:
    """First-order MAML-style training of a single initialization on the
    prior tasks; returns the isotropic Gaussian N(mu0, variance I).

    With ``heuristic_lr`` the base learner is one unprojected GD step on raw
    cross-entropy, otherwise the projected learner of ``budget``.
    """
    from .models import init_params
    theta = init_params(spec, rng.child("init")) if init is None else np.array(init, dtype=np.float64)
    heuristic = heuristic_lr is not None
    dummy = PosteriorParams.isotropic(theta, 1.0)
    problem = MetaProblem(pool, dummy, spec, budget, rng.child("base"), heuristic=heuristic,
                          base_lr=heuristic_lr or 0.0, lambda1=0.0, lambda2=0.0)
    Xtr, Ytr, Xev, Yev = problem.arrays
    nthreads = kernels.thread_count()
    for it in range(iterations):
        tasks = np.arange(pool.l) if batch_size is None else \
            rng.child("prior-batch", it).generator().integers(0, pool.l, batch_size)
        loss, _, grads = kernels.adapt_eval(
            theta[None], np.zeros(len(tasks), dtype=np.int64), tasks, Xtr, Ytr, Xev, Yev,
            np.array(spec.widths), spec.bias, spec.activation, problem.plans, problem.lrs, problem.radius,
            problem.scaling.min_loss, problem.scaling.max_loss, True, nthreads)
        if not np.all(np.isfinite(grads)):
            raise TrainingDivergence(it, float(np.mean(loss)))
        _emit(log, {"iteration": it, "prior_loss": float(np.mean(loss))})
        theta = project_to_ball(theta - lr * grads.mean(axis=0), problem.radius)
    return PosteriorParams.isotropic(theta, variance)


def evaluate_posterior(psi: PosteriorParams, pool: TaskPool, spec: ModelSpec, budget: StabilityBudget | None,
                       draws: int, rng: RngStream, heuristic_lr: float | None = None,
                       nthreads: int | None = None) -> dict:
    """Held-out loss and accuracy after adaptation: every draw is adapted on
    each task's S and scored on its validation split.  Mean and standard
    deviation are taken over tasks (draws averaged within a task)."""
    if pool.n == 0:
        raise ValueError("evaluation needs held-out validation samples")
    heuristic = heuristic_lr is not None
    problem = MetaProblem(pool, psi, spec, budget, rng.child("base"), heuristic=heuristic,
                          base_lr=heuristic_lr or 0.0, lambda1=0.0, lambda2=0.0)
    Xtr, Ytr = problem.arrays[0], problem.arrays[1]
    Xva, Yva = pool.stacked_validation()
    thetas = np.stack([project_to_ball(sample_posterior(psi, rng.child("eval", j)).theta, problem.radius)
                       for j in range(draws)])
    ti = np.repeat(np.arange(draws), pool.l)
    ki = np.tile(np.arange(pool.l), draws)
    loss, acc, _ = kernels.adapt_eval(thetas, ti, ki, Xtr, Ytr, Xva, Yva, np.array(spec.widths),
                                      spec.bias, spec.activation, problem.plans, problem.lrs, problem.radius,
                                      problem.scaling.min_loss, problem.scaling.max_loss, False,
                                      nthreads or kernels.thread_count())
    loss = loss.reshape(draws, pool.l).mean(axis=0)
    acc = acc.reshape(draws, pool.l).mean(axis=0)
    return {"loss_mean": float(loss.mean()), "loss_std": float(loss.std()),
            "accuracy_mean": float(acc.mean()), "accuracy_std": float(acc.std()),
            "tasks": pool.l, "draws": draws}


def with_weights(config: TrainConfig, lambda1: float, lambda2: float) -> TrainConfig:
    return replace(config, lambda1=lambda1, lambda2=lambda2)
