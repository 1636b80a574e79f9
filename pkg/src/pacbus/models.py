"""Linear softmax and ELU-MLP classifiers with a bounded, rescaled
cross-entropy loss, hand-written gradients, and Lipschitz/smoothness
constants for that loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import PosteriorParams, RngStream, sample_posterior

SQRT2 = math.sqrt(2.0)
# the softmax cross-entropy Hessian w.r.t. logits, diag(p) - pp^T, has
# spectral norm at most 1/2 (Gershgorin: 2 p_i (1 - p_i) <= 1/2)
CE_LOGIT_SMOOTHNESS = 0.5
CONSTANT_FLOOR = 1e-8


@dataclass(frozen=True)
class LossScaling:
    min_loss: float
    max_loss: float

    def __post_init__(self):
        if not self.max_loss > self.min_loss:
            raise ValueError(f"degenerate loss scaling [{self.min_loss}, {self.max_loss}]")

    @property
    def width(self) -> float:
        return self.max_loss - self.min_loss

    @classmethod
    def identity(cls) -> "LossScaling":
        return cls(0.0, 1.0)


@dataclass(frozen=True)
class LossConstants:
    lipschitz: float
    smoothness: float
    scaled: bool = True

    def __post_init__(self):
        for name in ("lipschitz", "smoothness"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} constant must be finite and positive, got {v}")


def loss_scaling(k: int, r: float, rule: str = "ball") -> LossScaling:
    """Range of the k-class softmax cross-entropy over logits with ||u|| <= r.

    ``rule="ball"`` gives bounds valid for every logit vector in the
    Euclidean ball: the exact minimum (true-class logit against all the
    others at maximal gap r*sqrt(k/(k-1))) and a maximum using the
    pairwise gap bound sqrt(2)*r, exact for k = 2.

    ``rule="paper"`` returns log(1 + (k-1)e^-r) and log(1 + (k-1)e^r), the
    range attained when a single logit carries the whole norm.  Those
    values can be undercut inside the ball, so they are kept for reference
    and comparison only.
    """
    if k < 2:
        raise ValueError(f"need at least 2 classes, got k={k}")
    if not r > 0:
        raise ValueError(f"output radius must be positive, got r={r}")
    if rule == "paper":
        lo = math.log((math.exp(r) + k - 1) / math.exp(r))
        hi = math.log((math.exp(-r) + k - 1) / math.exp(-r))
    elif rule == "ball":
        gap_min = r * math.sqrt(k / (k - 1))
        lo = math.log1p((k - 1) * math.exp(-gap_min))
        hi = SQRT2 * r + math.log((k - 1) + math.exp(-SQRT2 * r))
    else:
        raise ValueError(f"unknown scaling rule {rule!r}")
    return LossScaling(lo, hi)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture plus the radii that keep the loss bounded.

    ``arch`` is ``"linear"`` (softmax regression without bias, logits W z)
    or ``"mlp"`` (ELU after every layer, output included, with biases).
    Weights are stored (out, in) row-major, each layer's weights followed
    by its bias.
    """

    arch: str
    widths: tuple
    r: float = 1.0
    r_z: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.arch not in ("linear", "mlp"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError(f"bad layer widths {self.widths}")
        if self.arch == "linear" and len(self.widths) != 2:
            raise ValueError("linear model takes exactly (d, k)")
        if self.widths[-1] < 2:
            raise ValueError("need at least 2 output classes")
        if not (self.r > 0 and self.r_z > 0):
            raise ValueError("radii r and r_z must be positive")

    @classmethod
    def linear(cls, d: int, k: int, r: float = 1.0, r_z: float = 1.0) -> "ModelSpec":
        return cls("linear", (d, k), r, r_z)

    @classmethod
    def mlp(cls, widths, r: float = 1.0, r_z: float = 1.0) -> "ModelSpec":
        return cls("mlp", tuple(widths), r, r_z)

    @property
    def d(self) -> int:
        return self.widths[0]

    @property
    def k(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def bias(self) -> bool:
        return self.arch == "mlp"

    @property
    def activation(self) -> bool:
        return self.arch == "mlp"

    @cached_property
    def layer_slices(self) -> tuple:
        out, start = [], 0
        for n_in, n_out in zip(self.widths[:-1], self.widths[1:]):
            w = slice(start, start + n_in * n_out)
            start = w.stop
            if self.bias:
                b = slice(start, start + n_out)
                start = b.stop
            else:
                b = None
            out.append((w, b, n_out, n_in))
        return tuple(out)

    @property
    def param_count(self) -> int:
        last_w, last_b, _, _ = self.layer_slices[-1]
        return (last_b or last_w).stop

    @property
    def radius(self) -> float:
        """Projection radius r / max(1, r_z) for the parameter vector."""
        return self.r / max(1.0, self.r_z)

    @cached_property
    def logit_radius(self) -> float:
        """Certified bound on ||N_theta(z)|| over the projection ball."""
        return chain_output_bound(self.widths, self.radius, self.r_z, self.bias)

    @cached_property
    def scaling(self) -> LossScaling:
        return loss_scaling(self.k, self.logit_radius)

    def unflatten(self, theta: np.ndarray) -> list:
        theta = np.asarray(theta)
        layers = []
        for w, b, n_out, n_in in self.layer_slices:
            W = theta[..., w].reshape(theta.shape[:-1] + (n_out, n_in))
            bias = theta[..., b] if b is not None else None
            layers.append((W, bias))
        return layers

    def flatten(self, layers) -> np.ndarray:
        parts = []
        for W, b in layers:
            parts.append(np.asarray(W, dtype=np.float64).reshape(-1))
            if self.bias:
                parts.append(np.asarray(b, dtype=np.float64).reshape(-1))
        return np.concatenate(parts)

    def check_theta(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape[-1] != self.param_count:
            raise ValueError(f"parameter vector has {theta.shape[-1]} entries, "
                             f"model needs {self.param_count}")
        return theta

    def describe(self) -> str:
        return f"{self.arch}({'-'.join(map(str, self.widths))}), r={self.r}, r_z={self.r_z}"


def init_params(spec: ModelSpec, rng: RngStream | np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Glorot-style random weights with zero biases, projected into the ball."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    layers = []
    for n_in, n_out in zip(spec.widths[:-1], spec.widths[1:]):
        W = gen.standard_normal((n_out, n_in)) * scale * math.sqrt(2.0 / (n_in + n_out))
        layers.append((W, np.zeros(n_out)))
    theta = spec.flatten(layers)
    norm = np.linalg.norm(theta)
    if norm > spec.radius:
        theta *= spec.radius / norm
    return theta


# ---------------------------------------------------------------- network

def elu(a):
    return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))


def elu_grad(a):
    return np.where(a > 0, 1.0, np.exp(np.minimum(a, 0.0)))


def batch_forward(spec: ModelSpec, thetas: np.ndarray, X: np.ndarray, keep: bool = False):
    """Logits for a batch of parameter vectors (B, D) on inputs (B, q, d)."""
    x = X
    cache = []
    for W, b in spec.unflatten(thetas):
        a = np.einsum("bqi,boi->bqo", x, W)
        if b is not None:
            a = a + b[:, None, :]
        if keep:
            cache.append((x, a))
        x = elu(a) if spec.activation else a
    return (x, cache) if keep else x


def batch_loss_grad(spec: ModelSpec, thetas: np.ndarray, X: np.ndarray, Y: np.ndarray,
                    scaling: LossScaling | None, want_grad: bool = True):
    """Mean (scaled) cross-entropy over q samples for each of B parameter vectors.

    Returns ``(loss, accuracy, grad)``, shapes (B,), (B,), (B, D) with
    ``grad`` None unless requested.  ``scaling=None`` means raw cross-entropy.
    """
    scaling = scaling or LossScaling.identity()
    B, q = Y.shape
    logits, cache = batch_forward(spec, thetas, X, keep=True)
    top = logits.max(axis=-1, keepdims=True)
    ez = np.exp(logits - top)
    z = ez.sum(axis=-1, keepdims=True)
    lse = (top + np.log(z))[..., 0]
    true = np.take_along_axis(logits, Y[..., None], axis=-1)[..., 0]
    ce = lse - true
    loss = ((ce - scaling.min_loss) / scaling.width).mean(axis=1)
    acc = (logits.argmax(axis=-1) == Y).mean(axis=1)
    if not want_grad:
        return loss, acc, None

    g = ez / z
    np.put_along_axis(g, Y[..., None], np.take_along_axis(g, Y[..., None], axis=-1) - 1.0, axis=-1)
    g /= q * scaling.width
    layers = spec.unflatten(thetas)
    grads = []
    for (W, b), (x_in, a) in zip(reversed(layers), reversed(cache)):
        if spec.activation:
            g = g * elu_grad(a)
        gW = np.einsum("bqo,bqi->boi", g, x_in)
        grads.append(np.sum(g, axis=1) if b is not None else None)
        grads.append(gW.reshape(B, -1))
        g = np.einsum("bqo,boi->bqi", g, W)
    grads.reverse()
    return loss, acc, np.concatenate([p for p in grads if p is not None], axis=1)


def forward(spec: ModelSpec, theta: np.ndarray, z: np.ndarray) -> np.ndarray:
    theta = spec.check_theta(theta)
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != spec.d:
        raise ValueError(f"input has dimension {z.shape[-1]}, model expects {spec.d}")
    out = batch_forward(spec, theta[None], z.reshape(1, -1, spec.d))
    return out.reshape(z.shape[:-1] + (spec.k,))


def _check_admissible(spec: ModelSpec, theta: np.ndarray):
    norm = float(np.linalg.norm(theta))
    if norm > spec.radius * (1 + 1e-12):
        raise ValueError(f"||theta|| = {norm:.6g} exceeds the projection bound "
                         f"r/max(1, r_z) = {spec.radius:.6g}; project first")


def _as_batch(spec, z, y):
    Z = np.asarray(z, dtype=np.float64).reshape(1, -1, spec.d)
    Y = np.asarray(y, dtype=np.int64).reshape(1, -1)
    if Y.size and (Y.min() < 0 or Y.max() >= spec.k):
        raise ValueError(f"labels must lie in 0..{spec.k - 1}")
    return Z, Y


def ce_loss(spec: ModelSpec, theta, z, y) -> float:
    """Unscaled softmax cross-entropy, averaged if several samples are given."""
    theta = spec.check_theta(theta)
    Z, Y = _as_batch(spec, z, y)
    loss, _, _ = batch_loss_grad(spec, theta[None], Z, Y, None, want_grad=False)
    return float(loss[0])


def scaled_ce_loss(spec: ModelSpec, theta, z, y, scaling: LossScaling | None = None) -> float:
    theta = spec.check_theta(theta)
    _check_admissible(spec, theta)
    Z, Y = _as_batch(spec, z, y)
    loss, _, _ = batch_loss_grad(spec, theta[None], Z, Y, scaling or spec.scaling, want_grad=False)
    return float(loss[0])


def loss_grad(spec: ModelSpec, theta, z, y, scaling: LossScaling | None = None) -> np.ndarray:
    """Gradient of the scaled loss (mean over the given samples) w.r.t. theta."""
    theta = spec.check_theta(theta)
    _check_admissible(spec, theta)
    Z, Y = _as_batch(spec, z, y)
    _, _, grad = batch_loss_grad(spec, theta[None], Z, Y, scaling or spec.scaling)
    return grad[0]


def linear_hvp(spec: ModelSpec, theta, Z, Y, v, scaling: LossScaling | None = None) -> np.ndarray:
    """Hessian-vector product of the mean scaled loss for the linear model.

    Per sample the Hessian is (diag(p) - p p^T) kron z z^T.
    """
    if spec.arch != "linear":
        raise ValueError("closed-form Hessian is only available for the linear model")
    scaling = scaling or spec.scaling
    W = np.asarray(theta).reshape(spec.k, spec.d)
    V = np.asarray(v).reshape(spec.k, spec.d)
    Z = np.asarray(Z, dtype=np.float64).reshape(-1, spec.d)
    logits = Z @ W.T
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    s = Z @ V.T                              # directional logit change per sample
    coef = p * s - p * np.sum(p * s, axis=1, keepdims=True)
    H = coef.T @ Z / (Z.shape[0] * scaling.width)
    return H.reshape(-1)


# ---------------------------------------------------------- constants

def loss_constants_linear(k: int, scaling: LossScaling | None = None) -> LossConstants:
    """Constants of the linear softmax cross-entropy as derived for unit inputs:
    c_L = sqrt(k-1)/k and c_S = sqrt((k-1)(k-2)/k^3) (sqrt(2/27) at k = 2),
    divided by the loss range when a scaling is supplied.

    These are the literal textbook-derivation values.  ``c_L`` here is the
    Frobenius bound of the Hessian rather than of the gradient, so it is not
    a Lipschitz constant of the loss; certificates use
    :func:`certified_linear_constants` instead.
    """
    if k < 2:
        raise ValueError(f"need at least 2 classes, got k={k}")
    c_l = math.sqrt(k - 1) / k
    c_s = math.sqrt(2.0 / 27.0) if k == 2 else math.sqrt((k - 1) * (k - 2) / k**3)
    if scaling is None:
        return LossConstants(c_l, c_s, scaled=False)
    return LossConstants(c_l / scaling.width, c_s / scaling.width, scaled=True)


def logit_gradient_bound(scaling: LossScaling | None) -> float:
    """sup ||p - y|| over logits whose cross-entropy stays below the max loss."""
    if scaling is None:
        return SQRT2
    # ||p - y||^2 <= 2 (1 - p_y)^2 and p_y >= exp(-max_loss)
    return SQRT2 * (1.0 - math.exp(-scaling.max_loss))


def certified_linear_constants(spec: ModelSpec, scaling: LossScaling | None = None) -> LossConstants:
    """Lipschitz and smoothness constants of the scaled linear-softmax loss
    valid for every weight matrix in the projection ball and ||z|| <= r_z."""
    if spec.arch != "linear":
        raise ValueError("certified_linear_constants needs a linear model")
    scaling = scaling or spec.scaling
    c_l = logit_gradient_bound(scaling) * spec.r_z
    c_s = CE_LOGIT_SMOOTHNESS * spec.r_z**2
    return LossConstants(c_l / scaling.width, c_s / scaling.width, scaled=True)


def chain_output_bound(widths, rho: float, r_z: float, bias: bool, grid: int = 2000) -> float:
    """Upper bound on max ||N_theta(z)|| over ||theta|| <= rho, ||z|| <= r_z.

    Uses ||x_i|| <= ||W_i||_F ||x_{i-1}|| + ||b_i|| (ELU shrinks norms) and
    maximizes over how the squared budget rho^2 is split between layers.
    With V_i(s) the best bound using budget s on the first i layers,
    V_i(s) = max_t sqrt(s - t) * sqrt(V_{i-1}(t)^2 + [bias]) by
    Cauchy-Schwarz.  The grid maximum is bracketed (sqrt(s - t) decreasing,
    V increasing) so the result is a rigorous upper bound.
    """
    n_layers = len(widths) - 1
    if n_layers == 1 and not bias:
        return rho * r_z
    s = np.linspace(0.0, rho * rho, grid + 1)
    V = np.full(grid + 1, float(r_z))
    extra = 1.0 if bias else 0.0
    for _ in range(n_layers):
        # candidate for s_j from bracket [t_a, t_{a+1}], a < j
        head = np.sqrt(np.maximum(s[:, None] - s[None, :-1], 0.0))
        tail = np.sqrt(V[1:] ** 2 + extra)[None, :]
        mask = np.arange(grid)[None, :] < np.arange(grid + 1)[:, None]
        V = np.where(mask, head * tail, 0.0).max(axis=1)
    return float(V[-1]) * (1 + 1e-12)


def _network_recursion(norms, bias_norms, r_z, G, S, bias: bool, activation: bool):
    """Per-parameter-vector Lipschitz/smoothness bounds of loss(N_theta(z)) in theta.

    norms: spectral norms of the layer weights; bias_norms: their bias norms.
    Written with + * sqrt only so it evaluates under complex-step
    differentiation.  Returns (c_L, c_S).
    """
    extra = 1.0 if bias else 0.0
    X = r_z
    D2 = 0.0      # squared bound on ||d x_i|| per unit parameter direction
    E = 0.0       # bound on ||d^2 x_i||
    for n, bn in zip(norms, bias_norms):
        D_prev = np.sqrt(D2)
        D2 = n * n * D2 + X * X + extra
        E = (D2 if activation else 0.0) + 2.0 * D_prev + n * E
        X = n * X + (bn if bias else 0.0)
    return G * np.sqrt(D2), S * D2 + G * E


def certified_network_constants(spec: ModelSpec, scaling: LossScaling | None = None) -> LossConstants:
    """Constants of the scaled loss valid over the entire projection ball.

    Layer norms are bounded by the radius and the activations by the chain
    bound, so the constants hold along any projected trajectory.
    """
    if spec.arch == "linear":
        return certified_linear_constants(spec, scaling)
    scaling = scaling or spec.scaling
    c_l, c_s = _network_recursion_bounded(spec, spec.radius, scaling)
    return LossConstants(max(c_l, CONSTANT_FLOOR) / scaling.width,
                         max(c_s, CONSTANT_FLOOR) / scaling.width, scaled=True)


def _network_recursion_bounded(spec: ModelSpec, rho: float, scaling: LossScaling):
    G = logit_gradient_bound(scaling)
    S = CE_LOGIT_SMOOTHNESS
    extra = 1.0 if spec.bias else 0.0
    D2 = 0.0
    E = 0.0
    for i in range(spec.n_layers):
        X = chain_output_bound(spec.widths[: i + 1], rho, spec.r_z, spec.bias) if i else spec.r_z
        D_prev = math.sqrt(D2)
        D2 = rho * rho * D2 + X * X + extra
        E = (D2 if spec.activation else 0.0) + 2.0 * D_prev + rho * E
    return G * math.sqrt(D2), S * D2 + G * E


def layer_norms(spec: ModelSpec, theta: np.ndarray):
    """Spectral norms of the weight matrices and Euclidean norms of the biases."""
    norms, bnorms = [], []
    for W, b in spec.unflatten(theta):
        norms.append(float(np.linalg.norm(W, 2)))
        bnorms.append(float(np.linalg.norm(b)) if b is not None else 0.0)
    return norms, bnorms


def network_constants_at(spec: ModelSpec, theta: np.ndarray, scaling: LossScaling | None = None):
    """(c_L, c_S) bounds at a single parameter vector, any ||z|| <= r_z.

    ``scaling=None`` gives constants of the raw cross-entropy.
    """
    norms, bnorms = layer_norms(spec, theta)
    G = logit_gradient_bound(scaling)
    c_l, c_s = _network_recursion(norms, bnorms, spec.r_z, G, CE_LOGIT_SMOOTHNESS,
                                  spec.bias, spec.activation)
    width = scaling.width if scaling is not None else 1.0
    return float(c_l) / width, float(c_s) / width


def estimate_network_constants(spec: ModelSpec, psi: PosteriorParams, sample_count: int,
                               rng: RngStream, scaling: LossScaling | None = None) -> LossConstants:
    """Max of per-draw constant bounds over ``sample_count`` posterior draws."""
    if spec.arch != "mlp":
        raise ValueError("linear models have closed-form constants; "
                         "use certified_linear_constants or loss_constants_linear")
    if sample_count < 1:
        raise ValueError("sample_count must be at least 1")
    c_l = c_s = 0.0
    for j in range(sample_count):
        theta = sample_posterior(psi, rng.child(j)).theta
        a, b = network_constants_at(spec, theta, scaling)
        c_l, c_s = max(c_l, a), max(c_s, b)
    return LossConstants(max(c_l, CONSTANT_FLOOR), max(c_s, CONSTANT_FLOOR),
                         scaled=scaling is not None)
