"""Information-theoretic reconstruction limits and the private-noise calculator.

With the observation modeled as the flattened gradient plus isotropic
Gaussian noise of std ``sigma``, no estimator of the batch can beat the
Cramer-Rao limit computed from the input Jacobian J (shape (B*d, m + m*d),
rows are input coordinates, columns are observation coordinates):

    exact:  R^2 >= (1/B) * tr((J J^T)^{-1}) * sigma^2
    loose:  R^2 >= (1/B) * (B*d)^2 * sigma^2 / tr(J J^T)

The loose form follows from the trace inequality tr(M) tr(M^{-1}) >= n^2 and
never exceeds the exact one.  Defense records adjust the computation:
clipping rescales the effective noise, masking defenses (pruning, dropout)
delete the observation coordinates they zeroed -- rank deficiency is then a
real loss of information and is reported, not hidden.

The same noise model drives the privacy calculator: a Gaussian mechanism on
a function with squared sensitivity ``sensitivity`` satisfies an
(epsilon, delta) guarantee with the closed-form failure probability

    delta = exp( -(sensitivity / (2 sigma^2)) * (sigma^2 eps / sensitivity - 1/2)^2 )

valid when the optimizing moment order is >= 1 (flagged otherwise), and its
inverse gives the noise variance required for a target (epsilon, delta).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .defenses import DefenseRecord
from .errors import ConfigError, DimensionError
from .network import DataBatch, GradientObservation, NetworkParams, gradient
from .seeding import rng_from

__all__ = [
    "BoundReport",
    "cramer_rao",
    "bound_under_defense",
    "dp_delta",
    "dp_lambda_star",
    "required_sigma",
    "SensitivityEstimate",
    "estimate_sensitivity",
]

# relative eigenvalue floor below which a mode of J J^T counts as lost
_RANK_FLOOR = 1e-12


@dataclass
class BoundReport:
    """Lower-bound values (squared and square-rooted) plus adjustments."""

    rl2_exact: float
    rl2_loose: float
    sigma: float
    batch_size: int
    rank: int
    n_input_coords: int
    n_obs_coords: int
    adjustments: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    @property
    def rl_exact(self) -> float:
        return math.sqrt(self.rl2_exact) if math.isfinite(self.rl2_exact) else math.inf

    @property
    def rl_loose(self) -> float:
        return math.sqrt(self.rl2_loose) if math.isfinite(self.rl2_loose) else math.inf

    def to_dict(self) -> dict:
        return {
            "rl_exact": self.rl_exact,
            "rl_loose": self.rl_loose,
            "rl2_exact": self.rl2_exact,
            "rl2_loose": self.rl2_loose,
            "sigma": self.sigma,
            "batch_size": self.batch_size,
            "rank": self.rank,
            "n_input_coords": self.n_input_coords,
            "n_obs_coords": self.n_obs_coords,
            "adjustments": self.adjustments,
            "flags": list(self.flags),
        }


def cramer_rao(J: np.ndarray, sigma: float, B: int) -> BoundReport:
    """Exact and loosened lower bounds from the input Jacobian.

    Rank-deficient J J^T (legitimate under masking defenses) computes the
    exact trace-inverse on the numerical range only and flags the
    deficiency; with no observation coordinates at all both bounds are
    infinite.
    """
    if sigma <= 0:
        raise ConfigError("sigma must be > 0")
    if B < 1:
        raise ConfigError("B must be >= 1")
    if J.ndim != 2:
        raise DimensionError("J must be a matrix")
    n_in, n_obs = J.shape
    flags: list[str] = []
    if n_obs == 0 or not np.any(J):
        return BoundReport(
            rl2_exact=math.inf,
            rl2_loose=math.inf,
            sigma=sigma,
            batch_size=B,
            rank=0,
            n_input_coords=n_in,
            n_obs_coords=n_obs,
            flags=["no-information"],
        )
    M = J @ J.T
    evals = np.linalg.eigvalsh(M)
    floor = evals[-1] * _RANK_FLOOR
    kept = evals[evals > floor]
    rank = int(kept.size)
    if rank < n_in:
        flags.append(f"rank-deficient: rank {rank} of {n_in} input coordinates")
    rl2_exact = float(np.sum(1.0 / kept)) * sigma**2 / B
    # rank == n_in in the regular full-rank case; restricting the trace
    # inequality to the numerical range keeps loose <= exact always
    rl2_loose = (rank**2) * sigma**2 / float(np.sum(kept)) / B
    return BoundReport(
        rl2_exact=rl2_exact,
        rl2_loose=rl2_loose,
        sigma=sigma,
        batch_size=B,
        rank=rank,
        n_input_coords=n_in,
        n_obs_coords=n_obs,
        flags=flags,
    )


def _kept_columns(record: DefenseRecord, n_obs: int) -> np.ndarray:
    if record.mask is None or record.mask.shape != (n_obs,):
        raise DimensionError("defense record mask does not match the observation layout")
    return record.mask


def bound_under_defense(
    J: np.ndarray,
    sigma: float,
    B: int,
    record: DefenseRecord,
    obs: GradientObservation,
) -> BoundReport:
    """Lower bound adjusted for one applied defense.

    clip:     with realized factor R < 1 the useful signal shrank by R, so
              the effective noise grows to sigma / R.
    pruning / dropout:
              masked observation coordinates carry no information; the
              matching Jacobian columns are deleted (exact form).  The
              report also carries the closed-form width heuristics: the
              baseline loose bound scaled by 1/sqrt(1-p) for dropout and
              1/sqrt(1-p_hat) for pruning, where p_hat is the fraction of
              Jacobian Frobenius mass destroyed by the mask.
    noise:    the defense's own noise is the observation noise; bound
              unchanged at the configured sigma.
    local aggregation:
              same-order bound as the undefended case in the analyzed
              learning-rate regime; flagged rather than re-derived.  (An
              exact multi-step Jacobian is available separately via finite
              differences on the rollout.)
    """
    n_obs = J.shape[1]
    m, d = obs.m, obs.d
    if n_obs != m * (1 + d):
        raise DimensionError("Jacobian width does not match the observation layout")
    variant = record.variant
    if variant == "clip":
        factor = record.clip_factor if record.clip_factor is not None else 1.0
        sigma_eff = sigma / factor
        rep = cramer_rao(J, sigma_eff, B)
        rep.adjustments["clip_factor"] = factor
        rep.adjustments["sigma_effective"] = sigma_eff
        return rep
    if variant in ("prune_ratio", "prune_threshold", "dropout"):
        keep = _kept_columns(record, n_obs)
        total_mass = float(np.sum(J * J))
        kept_mass = float(np.sum(J[:, keep] ** 2))
        destroyed = 1.0 - (kept_mass / total_mass if total_mass > 0 else 0.0)
        rep = cramer_rao(J[:, keep], sigma, B)
        base = cramer_rao(J, sigma, B)
        rep.adjustments["mass_fraction_destroyed"] = destroyed
        if variant == "dropout":
            p = float(record.params.get("rate", 0.0))
            rep.adjustments["closed_form_rl"] = (
                base.rl_loose / math.sqrt(1.0 - p) if p < 1 else math.inf
            )
            rep.adjustments["effective_width"] = (1.0 - p) * m
        else:
            rep.adjustments["closed_form_rl"] = (
                base.rl_loose / math.sqrt(1.0 - destroyed)
                if destroyed < 1
                else math.inf
            )
        return rep
    if variant == "noise":
        rep = cramer_rao(J, sigma, B)
        rep.adjustments["defense_sigma0"] = record.params.get("sigma0")
        return rep
    if variant == "local_aggregation":
        rep = cramer_rao(J, sigma, B)
        rep.flags.append(
            "local-aggregation: single-step Jacobian; same-order bound in the "
            "analyzed learning-rate regime"
        )
        rep.adjustments["steps"] = record.steps
        return rep
    if variant == "secure_aggregation":
        rep = cramer_rao(J, sigma, B)
        rep.adjustments["clients"] = record.params.get("batch_sizes")
        return rep
    raise ConfigError(f"no bound adjustment for defense variant '{variant}'")


def dp_lambda_star(epsilon: float, sigma_sq: float, sensitivity: float) -> float:
    """Moment order minimizing the closed-form failure probability."""
    return sigma_sq * epsilon / sensitivity - 0.5


def dp_delta(epsilon: float, sigma_sq: float, sensitivity: float) -> float:
    """Closed-form failure probability of the Gaussian mechanism.

    delta = exp(-(sensitivity/(2 sigma^2)) (sigma^2 eps / sensitivity - 1/2)^2),
    clamped to [0, 1]; degenerate inputs (optimum at or below zero) clamp to
    the vacuous delta = 1.  The formula's derivation needs the optimizing
    order >= 1; use ``dp_lambda_star`` to check (the harness flags it).
    """
    if epsilon <= 0 or sigma_sq <= 0 or sensitivity <= 0:
        raise ConfigError("epsilon, sigma_sq and sensitivity must all be > 0")
    t = dp_lambda_star(epsilon, sigma_sq, sensitivity)
    if t <= 0:
        return 1.0
    val = math.exp(-(sensitivity / (2.0 * sigma_sq)) * t * t)
    return min(max(val, 0.0), 1.0)


def required_sigma(epsilon: float, delta: float, sensitivity: float) -> float:
    """Smallest noise variance giving the target (epsilon, delta).

    Inverts ``dp_delta`` in closed form: with L = ln(1/delta) the optimal
    order is t = (L + sqrt(L^2 + eps L)) / eps and
    sigma^2 = sensitivity (t + 1/2) / eps, homogeneous of degree 1 in the
    sensitivity.  Round-trips through ``dp_delta`` to relative 1e-9.
    """
    if epsilon <= 0 or sensitivity <= 0:
        raise ConfigError("epsilon and sensitivity must be > 0")
    if not 0 < delta < 1:
        raise ConfigError("delta must lie strictly between 0 and 1")
    L = math.log(1.0 / delta)
    disc = L * L + epsilon * L
    if disc < 0:  # unreachable for valid inputs; kept as an explicit guard
        raise ConfigError("no real solution for these parameters")
    t = (L + math.sqrt(disc)) / epsilon
    return sensitivity * (t + 0.5) / epsilon


@dataclass(frozen=True)
class SensitivityEstimate:
    """Sampled lower estimate of the worst-case squared gradient gap.

    The true sensitivity is a supremum over all adjacent sample pairs; a
    Monte-Carlo max can only under-shoot it, which is the conservative
    direction for "at least this much noise is needed".
    """

    value: float
    trials: int


def estimate_sensitivity(
    params: NetworkParams, trials: int, seed: int
) -> SensitivityEstimate:
    """Max over sampled adjacent pairs of || G(x,y) - G(x',y') ||^2.

    Pairs are unit-sphere samples with Rademacher labels; with the summed
    per-sample loss, swapping one sample changes the batch gradient by
    exactly the difference of the two single-sample gradients.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    rng = rng_from(seed)
    best = 0.0
    d = params.d
    for _ in range(trials):
        xs = rng.standard_normal((d, 2))
        xs /= np.linalg.norm(xs, axis=0)
        ys = rng.choice(np.array([-1.0, 1.0]), size=2)
        g0 = gradient(params, DataBatch(X=xs[:, :1], y=ys[:1])).flatten()
        g1 = gradient(params, DataBatch(X=xs[:, 1:], y=ys[1:])).flatten()
        gap = float(np.sum((g0 - g1) ** 2))
        if gap > best:
            best = gap
    return SensitivityEstimate(value=best, trials=trials)


def local_aggregation_jacobian_fd(
    params: NetworkParams,
    batches: list[DataBatch],
    eta_a: float | None,
    eta_w: float | None,
    steps: int,
    eps: float = 1e-6,
) -> np.ndarray:
    """Exact multi-step Jacobian by central finite differences on the
    rollout observation; expensive opt-in for small problems."""
    from .defenses import local_aggregation

    base_batches = [DataBatch(X=b.X.copy(), y=b.y.copy()) for b in batches]
    all_X = [b.X for b in base_batches]
    n_cols = sum(X.shape[1] for X in all_X)
    d = params.d
    J = np.empty((n_cols * d, params.n_coords))
    row = 0
    for bi, X in enumerate(all_X):
        for col in range(X.shape[1]):
            for s in range(d):
                for sign, out in ((1.0, "plus"), (-1.0, "minus")):
                    X[s, col] += sign * eps
                    obs = local_aggregation(params, base_batches, eta_a, eta_w, steps)
                    if sign > 0:
                        plus = obs.flatten()
                    else:
                        minus = obs.flatten()
                    X[s, col] -= sign * eps
                J[row] = (plus - minus) / (2.0 * eps)
                row += 1
    return J
