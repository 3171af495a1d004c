"""Two-layer random network: forward model, exact gradients, input Jacobian.

Model and conventions (shared by every other module):

    f(x) = sum_j a[j] * s(W[j] . x)         a ~ N(0, 1/m^2), W rows ~ N(0, I_d)
    loss = sum_i (y_i - f(x_i))^2           unreduced sum over the batch
    r_i  = 2 (f(x_i) - y_i)                 canonical residual sign

    d loss / d a[j]   = sum_i r_i s(W[j] . x_i)
    d loss / d W[j]   = sum_i r_i a[j] s'(W[j] . x_i) x_i

Observations flatten as ``grad_a`` first, then ``grad_W`` row-major, giving
m + m*d coordinates.  The input Jacobian stacks per-sample blocks: row
(i, s) holds the derivative of every gradient coordinate with respect to
component s of sample x_i, so J has shape (B*d, m + m*d).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .activations import Activation
from .errors import DimensionError
from .seeding import rng_from

__all__ = [
    "NetworkParams",
    "DataBatch",
    "GradientObservation",
    "sample_params",
    "sample_batch",
    "forward",
    "gradient",
    "input_jacobian",
    "gradient_input_vjp",
]


@dataclass(frozen=True)
class NetworkParams:
    """Weights of the two-layer network; treat arrays as immutable."""

    a: np.ndarray          # (m,)   second-layer weights
    W: np.ndarray          # (m, d) first-layer weight rows
    activation: Activation

    def __post_init__(self):
        if self.a.ndim != 1 or self.W.ndim != 2 or self.a.shape[0] != self.W.shape[0]:
            raise DimensionError(
                f"inconsistent parameter shapes a{self.a.shape} W{self.W.shape}"
            )

    @property
    def m(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    @property
    def n_coords(self) -> int:
        """Length of the flattened gradient."""
        return self.m * (1 + self.d)


@dataclass(frozen=True)
class DataBatch:
    """Unit-norm samples as columns of X with +/-1 labels."""

    X: np.ndarray  # (d, B)
    y: np.ndarray  # (B,)

    def __post_init__(self):
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[1],):
            raise DimensionError(f"inconsistent batch shapes X{self.X.shape} y{self.y.shape}")

    @property
    def B(self) -> int:
        return self.X.shape[1]

    @property
    def d(self) -> int:
        return self.X.shape[0]

    @property
    def min_singular_value(self) -> float:
        """B-th singular value of the sample matrix; must stay away from 0
        for moment-based recovery to be well posed."""
        return float(np.linalg.svd(self.X, compute_uv=False)[-1])


@dataclass
class GradientObservation:
    """A (possibly defended) gradient with its flattening layout.

    provenance records every defense applied, in order.
    """

    grad_a: np.ndarray  # (m,)
    grad_W: np.ndarray  # (m, d)
    provenance: list = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.grad_a.shape[0]

    @property
    def d(self) -> int:
        return self.grad_W.shape[1]

    def flatten(self) -> np.ndarray:
        """Canonical layout: grad_a, then grad_W row-major."""
        return np.concatenate([self.grad_a, self.grad_W.ravel()])

    @classmethod
    def from_flat(cls, flat: np.ndarray, m: int, d: int, provenance=None):
        if flat.shape != (m * (1 + d),):
            raise DimensionError(f"flat vector has shape {flat.shape}, expected ({m*(1+d)},)")
        return cls(
            grad_a=flat[:m].copy(),
            grad_W=flat[m:].reshape(m, d).copy(),
            provenance=list(provenance) if provenance else [],
        )

    def norm(self) -> float:
        return float(np.linalg.norm(self.flatten()))

    def copy(self) -> "GradientObservation":
        return GradientObservation(
            grad_a=self.grad_a.copy(),
            grad_W=self.grad_W.copy(),
            provenance=list(self.provenance),
        )

    def same_layout(self, other: "GradientObservation") -> bool:
        return self.grad_a.shape == other.grad_a.shape and self.grad_W.shape == other.grad_W.shape


def sample_params(d: int, m: int, seed: int, activation: Activation) -> NetworkParams:
    """Draw a ~ N(0, 1/m^2) and W rows ~ N(0, I_d); deterministic in seed."""
    if d < 1 or m < 1:
        raise DimensionError(f"d and m must be positive, got d={d}, m={m}")
    rng = rng_from(seed)
    a = rng.normal(0.0, 1.0 / m, size=m)
    W = rng.standard_normal((m, d))
    return NetworkParams(a=a, W=W, activation=activation)


def sample_batch(d: int, B: int, seed: int) -> DataBatch:
    """Uniform unit-sphere samples with Rademacher labels."""
    if d < 1 or B < 1:
        raise DimensionError(f"d and B must be positive, got d={d}, B={B}")
    rng = rng_from(seed)
    X = rng.standard_normal((d, B))
    X /= np.linalg.norm(X, axis=0)
    y = rng.choice(np.array([-1.0, 1.0]), size=B)
    return DataBatch(X=X, y=y)


def forward(params: NetworkParams, x: np.ndarray) -> float:
    """f(x) = sum_j a[j] s(W[j] . x), summed in ascending j."""
    if x.shape != (params.d,):
        raise DimensionError(f"x has shape {x.shape}, expected ({params.d},)")
    return float(params.a @ params.activation(params.W @ x))


def _batch_internals(params: NetworkParams, batch: DataBatch):
    """Activation values / derivatives and residuals shared by the ops."""
    if batch.d != params.d:
        raise DimensionError(
            f"batch dimension {batch.d} does not match network dimension {params.d}"
        )
    Z = params.W @ batch.X            # (m, B)
    S0 = params.activation(Z)
    S1 = params.activation.d1(Z)
    fx = S0.T @ params.a              # (B,)
    r = 2.0 * (fx - batch.y)
    return Z, S0, S1, fx, r


def gradient(params: NetworkParams, batch: DataBatch) -> GradientObservation:
    """Exact gradient of the summed square loss at ``params`` on ``batch``."""
    _, S0, S1, _, r = _batch_internals(params, batch)
    grad_a = S0 @ r
    grad_W = (params.a[:, None] * (S1 * r[None, :])) @ batch.X.T
    return GradientObservation(grad_a=grad_a, grad_W=grad_W)


def loss(params: NetworkParams, batch: DataBatch) -> float:
    """Summed square loss sum_i (y_i - f(x_i))^2."""
    _, _, _, fx, _ = _batch_internals(params, batch)
    return float(np.sum((batch.y - fx) ** 2))


def _input_gradients(params, S1):
    """h_i = grad_x f(x_i) = sum_j a_j s'(z_ji) W[j]; returned as (d, B)."""
    return params.W.T @ (params.a[:, None] * S1)


def input_jacobian(params: NetworkParams, batch: DataBatch) -> np.ndarray:
    """Jacobian of the flattened gradient with respect to the batch inputs.

    Returns J with shape (B*d, m + m*d); row (i, s) differentiates every
    gradient coordinate by component s of x_i.  Per-sample blocks (the
    batched Jacobian is their vertical concatenation):

        d grad_a[j] / d x_i = r_i s'(z_ji) W[j] + 2 s(z_ji) h_i
        d grad_W[j] / d x_i = a_j [ 2 s'(z_ji) h_i x_i^T
                                    + r_i s''(z_ji) W[j] x_i^T
                                    + r_i s'(z_ji) I_d ]

    Requires the activation's analytic second derivative.
    """
    Z, S0, S1, _, r = _batch_internals(params, batch)
    S2 = params.activation.d2(Z)
    m, d, B = params.m, params.d, batch.B
    H = _input_gradients(params, S1)  # (d, B)
    J = np.empty((B * d, m + m * d))
    eye = np.eye(d)
    for i in range(B):
        xi = batch.X[:, i]
        ri = r[i]
        hi = H[:, i]
        s0i, s1i, s2i = S0[:, i], S1[:, i], S2[:, i]
        # a-block: (d, m)
        J[i * d:(i + 1) * d, :m] = ri * (params.W * s1i[:, None]).T + 2.0 * np.outer(hi, s0i)
        # W-block: (d, m, d) -> (d, m*d)
        u = 2.0 * np.outer(hi, params.a * s1i)  # (d, m): 2 a_j s'(z_ji) h_i[s]
        blk = np.einsum("sj,t->sjt", u + ri * (params.a * s2i)[None, :] * params.W.T, xi)
        blk += (ri * params.a * s1i)[None, :, None] * eye[:, None, :]
        J[i * d:(i + 1) * d, m:] = blk.reshape(d, m * d)
    return J


def gradient_input_vjp(
    params: NetworkParams,
    batch: DataBatch,
    u_a: np.ndarray,
    u_W: np.ndarray,
) -> np.ndarray:
    """J @ u without materializing J; returns (d, B).

    Column i is the gradient of <flattened gradient, u> with respect to
    x_i.  Used by the gradient-matching attack, where m*(d+1) is too large
    to rebuild the dense Jacobian every iteration.  Agreement with
    ``input_jacobian`` is covered by a regression test.
    """
    Z, S0, S1, _, r = _batch_internals(params, batch)
    S2 = params.activation.d2(Z)
    H = _input_gradients(params, S1)
    out = np.empty((params.d, batch.B))
    a = params.a
    for i in range(batch.B):
        s0i, s1i, s2i = S0[:, i], S1[:, i], S2[:, i]
        ri, hi = r[i], H[:, i]
        c = u_W @ batch.X[:, i]  # (m,) inner products x_i . u_W[j]
        out[:, i] = (
            ri * (params.W.T @ (u_a * s1i))
            + 2.0 * float(u_a @ s0i) * hi
            + 2.0 * float(np.sum(a * s1i * c)) * hi
            + ri * (params.W.T @ (a * s2i * c))
            + ri * (u_W.T @ (a * s1i))
        )
    return out
