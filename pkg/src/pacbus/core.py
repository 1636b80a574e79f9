"""Value types shared by every module: RNG streams, the diagonal Gaussian
over initializations, norm-ball projection and the Gaussian KL divergence."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

KL_NEGATIVE_TOL = 1e-12


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream addressed by a root seed and a path of ids.

    ``RngStream(7).child("train", 3)`` always yields the same draws, no matter
    which other streams were consumed before it.
    """

    seed: int
    path: tuple = ()

    def child(self, *ids) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(ids))

    def generator(self) -> np.random.Generator:
        key = tuple(_stream_id(i) for i in self.path)
        ss = np.random.SeedSequence(entropy=self.seed & (2**64 - 1), spawn_key=key)
        return np.random.Generator(np.random.PCG64(ss))


def _stream_id(x) -> int:
    if isinstance(x, (int, np.integer)):
        if x < 0:
            raise ValueError("stream ids must be non-negative")
        return int(x)
    # stable across processes, unlike hash()
    return int.from_bytes(str(x).encode("utf-8")[:16].ljust(16, b"\0"), "little") % (2**63)


@dataclass(frozen=True)
class PosteriorParams:
    """psi = (mean, log-variance) of a diagonal Gaussian over parameter vectors."""

    mean: np.ndarray
    log_var: np.ndarray = field(repr=False)

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        log_var = np.array(self.log_var, dtype=np.float64).reshape(-1)
        if mean.shape != log_var.shape:
            raise ValueError(f"mean has dimension {mean.size}, log_var {log_var.size}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_var))):
            raise ValueError("posterior parameters must be finite")
        mean.flags.writeable = False
        log_var.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_var", log_var)

    @classmethod
    def isotropic(cls, mean, variance: float) -> "PosteriorParams":
        mean = np.asarray(mean, dtype=np.float64)
        return cls(mean, np.full(mean.shape, np.log(variance)))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)

    def replace(self, mean=None, log_var=None) -> "PosteriorParams":
        return PosteriorParams(self.mean if mean is None else mean,
                               self.log_var if log_var is None else log_var)


class PosteriorSample(NamedTuple):
    theta: np.ndarray
    eps: np.ndarray


def reparameterize(psi: PosteriorParams, eps: np.ndarray) -> np.ndarray:
    return psi.mean + psi.std * eps


def sample_posterior(psi: PosteriorParams, rng: RngStream | np.random.Generator) -> PosteriorSample:
    """Draw theta ~ N(mu, diag(s)) and keep the standard-normal noise used."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    eps = gen.standard_normal(psi.dim)
    return PosteriorSample(reparameterize(psi, eps), eps)


def kl_diag_gaussian(q: PosteriorParams, p: PosteriorParams) -> float:
    """KL(q || p) for diagonal Gaussians, summed coordinate-wise."""
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: {q.dim} vs {p.dim}")
    diff = q.mean - p.mean
    ratio = np.exp(q.log_var - p.log_var)
    terms = diff * diff * np.exp(-p.log_var) + (p.log_var - q.log_var) + ratio - 1.0
    kl = 0.5 * float(np.sum(terms))
    if not np.isfinite(kl):
        raise ValueError("KL divergence is not finite")
    if kl < 0.0:
        if kl < -KL_NEGATIVE_TOL:
            raise ArithmeticError(f"KL divergence evaluated to {kl!r}")
        kl = 0.0
    return kl


def kl_diag_gaussian_grad(q: PosteriorParams, p: PosteriorParams) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of KL(q || p) with respect to (q.mean, q.log_var)."""
    d_mean = (q.mean - p.mean) * np.exp(-p.log_var)
    d_log_var = 0.5 * (np.exp(q.log_var - p.log_var) - 1.0)
    return d_mean, d_log_var


def project_to_ball(theta: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection onto {x : ||x|| <= radius}."""
    if not radius > 0:
        raise ValueError(f"projection radius must be positive, got {radius}")
    theta = np.asarray(theta, dtype=np.float64)
    if not np.isfinite(radius):
        return theta.copy()
    norm = float(np.linalg.norm(theta))
    if norm <= radius:
        return theta.copy()
    out = theta * (radius / norm)
    # guard the last ulp so the output norm never exceeds the radius
    while np.linalg.norm(out) > radius:
        out = np.nextafter(out, 0.0)
    return out


def project_vjp(x: np.ndarray, radius: float, v: np.ndarray) -> np.ndarray:
    """v^T J where J is the Jacobian of project_to_ball at x (J is symmetric)."""
    if not np.isfinite(radius):
        return v
    norm = float(np.linalg.norm(x))
    if norm <= radius:
        return v
    u = x / norm
    return (radius / norm) * (v - u * float(u @ v))
