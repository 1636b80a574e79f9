"""PAC-Bayes regularizer, binary-KL inversion and the sampled certificate."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .baselearn import StabilityBudget, step_plan
from .core import PosteriorParams, RngStream, kl_diag_gaussian, project_to_ball, sample_posterior
from .models import LossScaling, ModelSpec
from .tasks import TaskPool

KL_INV_TOL = 1e-9
MIN_TASKS = 8


def _check_delta(delta: float, name: str = "delta"):
    if not (0.0 < delta < 1.0):
        raise ValueError(f"{name} must lie in (0, 1), got {delta}")


def pac_bayes_regularizer(kl: float, l: int, delta: float) -> float:
    """sqrt((KL + ln(2 sqrt(l) / delta)) / (2 l)), valid for l >= 8 tasks."""
    if l < MIN_TASKS:
        raise ValueError(f"the PAC-Bayes bound requires l >= {MIN_TASKS} tasks, got l={l}")
    if not kl >= 0:
        raise ValueError(f"KL must be non-negative, got {kl}")
    _check_delta(delta)
    return math.sqrt((kl + math.log(2.0 * math.sqrt(l) / delta)) / (2.0 * l))


def pac_bayes_regularizer_dkl(kl: float, l: int, delta: float) -> float:
    """Derivative of :func:`pac_bayes_regularizer` with respect to KL."""
    return 1.0 / (4.0 * l * pac_bayes_regularizer(kl, l, delta))


def binary_kl(p, q):
    """kl(p || q) between Bernoulli means with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(p > 0, p * np.log(p / q), 0.0)
        b = np.where(p < 1, (1 - p) * np.log((1 - p) / (1 - q)), 0.0)
    out = a + b
    return float(out) if out.ndim == 0 else out


def kl_inverse_many(p, c, tol: float = KL_INV_TOL) -> np.ndarray:
    """Vectorized sup{q in [p, 1] : kl(p || q) <= c} by bisection.

    Returns the upper end of the final bracket, so the value never falls
    below the true supremum and exceeds it by at most ``tol``.
    """
    p = np.atleast_1d(np.asarray(p, dtype=np.float64)).copy()
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), p.shape)
    if np.any(~np.isfinite(p)) or np.any((p < 0) | (p > 1)):
        raise ValueError("p must lie in [0, 1]")
    if np.any(~(c >= 0)) or np.any(~np.isfinite(c)):
        raise ValueError("c must be finite and non-negative")
    lo = p.copy()
    hi = np.ones_like(p)
    active = (c > 0) & (p < 1)
    while True:
        live = active & (hi - lo > tol)
        if not np.any(live):
            break
        mid = 0.5 * (lo[live] + hi[live])
        ok = binary_kl(p[live], mid) <= c[live]
        lo[live] = np.where(ok, mid, lo[live])
        hi[live] = np.where(ok, hi[live], mid)
    out = np.where(active, hi, np.where(p >= 1, 1.0, p))
    return out


def kl_inverse(p: float, c: float, tol: float = KL_INV_TOL) -> float:
    return float(kl_inverse_many(p, c, tol)[0])


def assemble_bound(empirical: float, kl: float, l: int, delta: float, stability_term: float) -> float:
    for name, v in (("empirical", empirical), ("stability_term", stability_term)):
        if not (np.isfinite(v) and v >= 0):
            raise ValueError(f"{name} must be finite and non-negative, got {v}")
    return empirical + pac_bayes_regularizer(kl, l, delta) + stability_term


@dataclass(frozen=True)
class BoundReport:
    empirical_term: float
    kl_value: float
    pac_bayes_regularizer: float
    stability_term: float
    total_bound: float
    l: int
    N: int
    delta: float
    delta_prime: float
    per_task_certified: tuple
    per_task_empirical: tuple
    beta: float
    m: int
    n: int
    guarantee_valid: bool
    confidence_mode: str = "shared"
    notes: tuple = field(default_factory=tuple)

    def __post_init__(self):
        total = self.empirical_term + self.pac_bayes_regularizer + self.stability_term
        if total != self.total_bound:
            raise ValueError("total bound must equal the sum of its terms")
        for name in ("empirical_term", "kl_value", "pac_bayes_regularizer", "stability_term"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} is negative")
        _check_delta(self.delta)
        _check_delta(self.delta_prime, "delta_prime")

    @property
    def flag(self) -> str:
        return "guarantee-valid" if self.guarantee_valid else "heuristic"

    @property
    def confidence(self) -> float:
        return 1.0 - self.delta - self.delta_prime

    def to_dict(self) -> dict:
        out = asdict(self)
        out["per_task_certified"] = list(self.per_task_certified)
        out["per_task_empirical"] = list(self.per_task_empirical)
        out["notes"] = list(self.notes)
        out["flag"] = self.flag
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "BoundReport":
        d = {k: v for k, v in d.items() if k != "flag"}
        for key in ("per_task_certified", "per_task_empirical", "notes"):
            d[key] = tuple(d[key])
        return cls(**d)


def draw_parameters(psi: PosteriorParams, count: int, rng: RngStream, radius: float) -> tuple:
    """``count`` posterior draws, each projected onto the ball (row j uses
    substream j of ``rng``).  Returns (projected thetas, raw draws, eps)."""
    raw = np.empty((count, psi.dim))
    eps = np.empty((count, psi.dim))
    thetas = np.empty((count, psi.dim))
    for j in range(count):
        s = sample_posterior(psi, rng.child(j))
        raw[j], eps[j] = s.theta, s.eps
        thetas[j] = project_to_ball(s.theta, radius)
    return thetas, raw, eps


def task_step_plans(pool: TaskPool, budget: StabilityBudget, rng: RngStream,
                    algorithm: str | None = None) -> np.ndarray:
    """(l, T) step indices; each task's SGD order comes from its own substream."""
    algorithm = algorithm or budget.algorithm
    return np.stack([step_plan(algorithm, budget.steps, pool.m, rng.child("order", t.task_id))
                     for t in pool.tasks]).reshape(pool.l, budget.steps)


def loss_matrix(spec: ModelSpec, thetas: np.ndarray, pool: TaskPool, budget: StabilityBudget,
                rng: RngStream, scaling: LossScaling, radius: float, validation: bool = True,
                nthreads: int | None = None, block: int = 100, algorithm: str | None = None) -> tuple:
    """Scaled evaluation loss and accuracy of every (draw, task) pair after
    adaptation, shapes (N, l)."""
    Xtr, Ytr, Xev, Yev = pool.stacked(validation)
    plans = task_step_plans(pool, budget, rng, algorithm)
    lrs = budget.learning_rates()
    N, l = len(thetas), pool.l
    losses = np.empty((N, l))
    accs = np.empty((N, l))
    nthreads = nthreads or kernels.thread_count()
    for lo in range(0, N, block):
        hi = min(N, lo + block)
        ti = np.repeat(np.arange(lo, hi), l)
        ki = np.tile(np.arange(l), hi - lo)
        loss, acc, _ = kernels.adapt_eval(thetas, ti, ki, Xtr, Ytr, Xev, Yev, np.array(spec.widths),
                                          spec.bias, spec.activation, plans, lrs, radius,
                                          scaling.min_loss, scaling.max_loss, False, nthreads)
        losses[lo:hi] = loss.reshape(hi - lo, l)
        accs[lo:hi] = acc.reshape(hi - lo, l)
    return losses, accs


def certify(psi: PosteriorParams, psi0: PosteriorParams, pool: TaskPool, spec: ModelSpec,
            budget: StabilityBudget, N: int, delta: float, delta_prime: float, rng: RngStream,
            union_bound: bool = False, validation: bool = True, heuristic: bool = False,
            scaling: LossScaling | None = None, nthreads: int | None = None) -> BoundReport:
    """Sampled certificate on the expected post-adaptation loss of new tasks.

    One shared set of N draws from the posterior is adapted on every task;
    each task's mean loss is inverted through the binary KL at confidence
    delta' (delta'/l per task with ``union_bound``), averaged, and combined
    with the PAC-Bayes regularizer and the stability term.  The result holds
    with probability at least 1 - delta - delta'.
    """
    if N < 1:
        raise ValueError(f"need at least one posterior draw, got N={N}")
    if pool.l < MIN_TASKS:
        raise ValueError(f"certificate needs l >= {MIN_TASKS} tasks, got {pool.l}")
    _check_delta(delta)
    _check_delta(delta_prime, "delta_prime")
    if delta + delta_prime >= 1:
        raise ValueError("delta + delta_prime must be below 1")
    if pool.d != spec.d or pool.k != spec.k:
        raise ValueError(f"tasks have d={pool.d}, k={pool.k}; model expects d={spec.d}, k={spec.k}")
    n_eff = pool.n if validation else 0
    if budget.m != pool.m or budget.n != n_eff:
        raise ValueError(f"stability budget is for m={budget.m}, n={budget.n}; tasks give m={pool.m}, n={n_eff}")

    scaling = scaling or (LossScaling.identity() if heuristic else spec.scaling)
    radius = math.inf if heuristic else spec.radius
    thetas, _, _ = draw_parameters(psi, N, rng.child("certify"), radius)
    # the heuristic adapts with full-batch GD steps
    losses, _ = loss_matrix(spec, thetas, pool, budget, rng, scaling, radius, validation, nthreads,
                            algorithm="gd" if heuristic else None)
    if not np.all(np.isfinite(losses)):
        raise FloatingPointError("non-finite loss while certifying")
    per_task = losses.mean(axis=0)
    conf = delta_prime / pool.l if union_bound else delta_prime
    c = math.log(2.0 / conf) / N
    notes = []
    out_of_range = bool(np.any(per_task < 0) or np.any(per_task > 1))
    if heuristic or out_of_range:
        # losses outside [0, 1] void the inversion; report the plug-in value
        certified = per_task.copy()
        if out_of_range:
            notes.append("losses not confined to [0, 1]: plug-in mean reported, no guarantee")
    else:
        certified = kl_inverse_many(per_task, c)
    empirical = float(np.mean(certified))
    kl = kl_diag_gaussian(psi, psi0)
    reg = pac_bayes_regularizer(kl, pool.l, delta)
    beta_term = budget.beta()
    stab = budget.stability_term() if validation else beta_term
    total = empirical + reg + stab
    guarantee = not heuristic and not out_of_range
    if spec.arch != "linear" and budget.convex:
        guarantee = False
        notes.append("convex stability bound used for a non-convex model")
    if heuristic:
        notes.append("heuristic run: raw unprojected loss, estimated constants and plug-in means; "
                     "no guarantee")
    if not budget.convex:
        notes.append("non-convex bound uses m - 1 (the adapting set size) in its denominator")
    return BoundReport(empirical, kl, reg, stab, total, pool.l, N, delta, delta_prime,
                       tuple(float(x) for x in certified), tuple(float(x) for x in per_task),
                       float(beta_term), pool.m, n_eff, guarantee,
                       "union" if union_bound else "shared", tuple(notes))
