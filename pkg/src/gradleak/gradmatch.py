"""Optimization-based gradient matching with feature-direction regularization.

Candidates X (one unit-norm column per sample, labels known) are optimized
so their gradient matches the observed one under a configurable distance,
optionally pulled toward externally reconstructed directions (e.g. the
moment-based attack's output).  Because those directions carry a sign
ambiguity, the regularizer uses squared cosine similarity, which is exactly
invariant to flipping any target column.

The candidate gradient's derivative with respect to X is assembled through
the network's input-Jacobian chain rule, evaluated as Jacobian-vector
products so the dense (B*d) x (m + m*d) matrix is never built inside the
optimization loop.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, DivergenceError
from .network import DataBatch, GradientObservation, NetworkParams, gradient, gradient_input_vjp
from .seeding import rng_from
from .tensor_attack import ReconstructionResult

__all__ = [
    "OptimizerConfig",
    "GradMatchConfig",
    "grad_match_loss",
    "feature_regularizer",
    "grad_match_attack",
]

_DISTANCES = ("squared-l2", "negative-cosine")
_FEATURE_MODES = ("cosine2", "subspace", "off")


@dataclass(frozen=True)
class OptimizerConfig:
    """Adam-style first-order optimizer with unit-sphere projection."""

    step_size: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iters: int = 2000
    grad_tol: float = 1e-10
    halve_on_increase: bool = False
    max_halvings: int = 30

    def validate(self):
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.step_size <= 0:
            raise ConfigError("step_size must be > 0")


@dataclass(frozen=True)
class GradMatchConfig:
    distance: str = "squared-l2"
    group_reweighting: bool = False
    alpha_feature: float = 0.0
    feature_mode: str = "off"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    pairing_refresh: int = 100
    sign_resolve: bool = True
    seed: int = 0

    def validate(self):
        if self.distance not in _DISTANCES:
            raise ConfigError(f"distance must be one of {_DISTANCES}")
        if self.feature_mode not in _FEATURE_MODES:
            raise ConfigError(f"feature_mode must be one of {_FEATURE_MODES}")
        if self.alpha_feature < 0:
            raise ConfigError("alpha_feature must be >= 0")
        self.optimizer.validate()


def _group_weights(cfg: GradMatchConfig, target: GradientObservation):
    """Per-group weights, normalized so the distance stays O(1).

    Reweighting uses each group's count of nonzero target entries (the
    second layer has m coordinates, the first m*d, and defenses may zero
    some); without it both groups merge into one global vector.
    """
    if not cfg.group_reweighting:
        return None
    na = int(np.count_nonzero(target.grad_a))
    nw = int(np.count_nonzero(target.grad_W))
    tot = max(na + nw, 1)
    return na / tot, nw / tot


def _distance_and_cograd(cfg, g_a, g_W, t_a, t_W, weights):
    """Distance value and its gradient with respect to (g_a, g_W)."""

    def one(g, t):
        if cfg.distance == "squared-l2":
            diff = g - t
            return float(np.sum(diff * diff)), 2.0 * diff
        ng, nt = float(np.linalg.norm(g)), float(np.linalg.norm(t))
        if ng < 1e-300 or nt < 1e-300:
            return 0.0, np.zeros_like(g)
        dot = float(np.sum(g * t))
        val = -dot / (ng * nt)
        grad = -(t / (ng * nt)) + (dot / (ng**3 * nt)) * g
        return val, grad

    if weights is None:
        # single global vector
        val, u = one(
            np.concatenate([g_a, g_W.ravel()]), np.concatenate([t_a, t_W.ravel()])
        )
        m = g_a.shape[0]
        return val, u[:m], u[m:].reshape(g_W.shape)
    wa, ww = weights
    la, ua = one(g_a, t_a)
    lw, uw = one(g_W.ravel(), t_W.ravel())
    return wa * la + ww * lw, wa * ua, ww * uw.reshape(g_W.shape)


def grad_match_loss(
    X_cand: np.ndarray,
    y: np.ndarray,
    params: NetworkParams,
    target: GradientObservation,
    cfg: GradMatchConfig,
) -> tuple[float, np.ndarray]:
    """Distance between the candidate gradient and the target, with its
    analytic gradient with respect to X_cand (shape (d, B)).

    Labels are taken as known to the attacker.  Raises DivergenceError on a
    non-finite loss.
    """
    if X_cand.shape[0] != params.d or y.shape != (X_cand.shape[1],):
        raise DimensionError(
            f"candidate shape {X_cand.shape} / labels {y.shape} inconsistent with d={params.d}"
        )
    batch = DataBatch(X=X_cand, y=y)
    g = gradient(params, batch)
    val, u_a, u_W = _distance_and_cograd(
        cfg, g.grad_a, g.grad_W, target.grad_a, target.grad_W, _group_weights(cfg, target)
    )
    if not np.isfinite(val):
        raise DivergenceError("gradient-matching loss is non-finite for this candidate")
    grad_X = gradient_input_vjp(params, batch, u_a, u_W)
    return val, grad_X


def _greedy_pairing(X_cand: np.ndarray, Z_hat: np.ndarray) -> np.ndarray:
    """Pair each candidate with a target column by descending squared
    cosine, each target used at most once; deterministic tie-breaking."""
    B, K = X_cand.shape[1], Z_hat.shape[1]
    nx = np.sum(X_cand * X_cand, axis=0)
    nz = np.sum(Z_hat * Z_hat, axis=0)
    c2 = (X_cand.T @ Z_hat) ** 2 / np.maximum(np.outer(nx, nz), 1e-300)
    pairing = np.full(B, -1, dtype=int)
    used = np.zeros(K, dtype=bool)
    for _ in range(min(B, K)):
        masked = np.where(used[None, :] | (pairing[:, None] >= 0), -np.inf, c2)
        i, j = np.unravel_index(np.argmax(masked), masked.shape)
        pairing[i] = j
        used[j] = True
    return pairing


def feature_regularizer(
    X_cand: np.ndarray,
    Z_hat: np.ndarray,
    mode: str,
    pairing: np.ndarray | None = None,
) -> tuple[float, np.ndarray, np.ndarray | None]:
    """Penalty pulling candidates toward reconstructed directions.

    cosine2:  sum_i (1 - cos^2(x_i, z_{pair(i)})); sign-proof because the
              cosine enters squared.  Pairing is greedy by current squared
              cosine (pass ``pairing`` to reuse one).
    subspace: sum_i of the squared residual of projecting x_i onto
              span(Z_hat); preferable when individual directions are
              unreliable but their span is.

    Returns (value, gradient wrt X_cand, pairing or None).  A zero-norm
    candidate column gets the maximum penalty with a zero (capped)
    gradient instead of dividing by zero.
    """
    if mode == "off":
        return 0.0, np.zeros_like(X_cand), None
    if mode not in _FEATURE_MODES:
        raise ConfigError(f"unknown feature mode '{mode}'")
    d, B = X_cand.shape
    grad = np.zeros_like(X_cand)
    if mode == "subspace":
        Q = np.linalg.qr(Z_hat)[0]
        resid = X_cand - Q @ (Q.T @ X_cand)
        return float(np.sum(resid * resid)), 2.0 * resid, None
    if pairing is None:
        pairing = _greedy_pairing(X_cand, Z_hat)
    value = 0.0
    for i in range(B):
        x = X_cand[:, i]
        z = Z_hat[:, pairing[i]]
        nx2 = float(x @ x)
        nz2 = float(z @ z)
        if nx2 < 1e-24 or nz2 < 1e-24:
            value += 1.0
            continue
        c = float(x @ z)
        c2 = c * c / (nx2 * nz2)
        value += 1.0 - c2
        grad[:, i] = -2.0 * (c * z / (nx2 * nz2) - c2 * x / nx2)
    return value, grad, pairing


def _project_columns(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=0)
    return X / np.where(norms > 1e-300, norms, 1.0)


def grad_match_attack(
    obs: GradientObservation,
    params: NetworkParams,
    labels: np.ndarray,
    cfg: GradMatchConfig | None = None,
    feature_targets: np.ndarray | None = None,
    X0: np.ndarray | None = None,
) -> ReconstructionResult:
    """Reconstruct len(labels) samples by first-order optimization of the
    matching objective plus the optional feature penalty.

    Labels are an attacker input (known in this threat model).  Sample
    norms are known to be 1, so every step re-projects candidate columns
    onto the unit sphere.  With ``halve_on_increase`` the step is
    backtracked until the objective does not increase, making accepted
    steps monotone.  Deterministic given (config, seed); the iterate
    trajectory hash lands in the diagnostics.  If the loss turns
    non-finite the best iterate so far is returned with a ``diverged``
    flag instead of raising.
    """
    cfg = cfg or GradMatchConfig()
    cfg.validate()
    use_feature = cfg.feature_mode != "off" and cfg.alpha_feature > 0
    if use_feature and feature_targets is None:
        raise ConfigError("feature regularization requested but no targets given")
    opt = cfg.optimizer
    rng = rng_from(cfg.seed)
    B = labels.shape[0]
    d = params.d
    if X0 is not None:
        X = _project_columns(np.array(X0, dtype=float))
        if X.shape != (d, B):
            raise DimensionError(f"X0 has shape {X0.shape}, expected ({d}, {B})")
    else:
        X = _project_columns(rng.standard_normal((d, B)))

    mom = np.zeros((d, B))
    vel = np.zeros((d, B))
    pairing = None
    traj = hashlib.sha256()
    diverged = False
    best_loss, best_X = np.inf, X.copy()
    iterations = 0
    loss_history: list[float] = []

    def objective(Xc, pairing_in):
        val, grad = grad_match_loss(Xc, labels, params, obs, cfg)
        if use_feature:
            fval, fgrad, pairing_out = feature_regularizer(
                Xc, feature_targets, cfg.feature_mode, pairing_in
            )
            val += cfg.alpha_feature * fval
            grad = grad + cfg.alpha_feature * fgrad
        else:
            pairing_out = pairing_in
        return val, grad, pairing_out

    for t in range(1, opt.max_iters + 1):
        iterations = t
        if use_feature and cfg.feature_mode == "cosine2" and (t - 1) % cfg.pairing_refresh == 0:
            pairing = None  # recompute greedily from the current iterate
        try:
            cur_loss, grad, pairing = objective(X, pairing)
        except DivergenceError:
            diverged = True
            break
        loss_history.append(cur_loss)
        if cur_loss < best_loss:
            best_loss, best_X = cur_loss, X.copy()
        gnorm = float(np.linalg.norm(grad))
        if gnorm < opt.grad_tol:
            break
        mom = opt.beta1 * mom + (1.0 - opt.beta1) * grad
        vel = opt.beta2 * vel + (1.0 - opt.beta2) * grad * grad
        step = (mom / (1.0 - opt.beta1**t)) / (
            np.sqrt(vel / (1.0 - opt.beta2**t)) + opt.eps
        )
        if opt.halve_on_increase:
            scale = 1.0
            accepted = X
            for _ in range(opt.max_halvings):
                cand = _project_columns(X - opt.step_size * scale * step)
                try:
                    cand_loss, _, _ = objective(cand, pairing)
                except DivergenceError:
                    cand_loss = np.inf
                if cand_loss <= cur_loss:
                    accepted = cand
                    break
                scale *= 0.5
            X = accepted
        else:
            X = _project_columns(X - opt.step_size * step)
        traj.update(np.ascontiguousarray(X).tobytes())

    # final iterate may beat the stored best
    try:
        final_loss, _, _ = objective(X, pairing)
        if final_loss < best_loss:
            best_loss, best_X = final_loss, X.copy()
    except DivergenceError:
        diverged = True

    return ReconstructionResult(
        samples=_project_columns(best_X),
        component_weights=np.zeros(B),
        diagnostics={
            "final_loss": float(best_loss),
            "iterations": iterations,
            "trajectory_hash": traj.hexdigest(),
            "diverged": diverged,
            "loss_history": loss_history,
        },
    )
