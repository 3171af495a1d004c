"""Permutation- and sign-resolved reconstruction error.

Batched gradients are unordered sums, so a reconstruction is only defined
up to a permutation of the batch, and moment-based recovery additionally
leaves a sign per sample.  The error metric therefore minimizes

    (1/B) sum_i || S_i - s_i * S_hat_{pi(i)} ||^2

over permutations pi (exact assignment solve) and, when requested, signs
s_i in {+1, -1}; the reported value is the square root.
"""
from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DimensionError

__all__ = ["min_perm_distance"]


def min_perm_distance(
    S: np.ndarray, S_hat: np.ndarray, sign_resolve: bool = True
) -> tuple[float, np.ndarray, np.ndarray]:
    """Root mean squared error after optimal column matching.

    Parameters
    ----------
    S, S_hat : (d, B) arrays, true and reconstructed samples as columns.
    sign_resolve : also minimize over a sign per matched pair.

    Returns
    -------
    (rmse, permutation, signs): column j of S_hat is matched to column
    permutation[j]... specifically S[:, i] pairs with
    signs[i] * S_hat[:, permutation[i]].
    """
    if S.shape != S_hat.shape or S.ndim != 2:
        raise DimensionError(f"shape mismatch: {S.shape} vs {S_hat.shape}")
    B = S.shape[1]
    # squared distances for both sign choices, computed via Gram products
    ss = np.sum(S * S, axis=0)[:, None]
    hh = np.sum(S_hat * S_hat, axis=0)[None, :]
    cross = S.T @ S_hat
    cost_plus = ss + hh - 2.0 * cross
    if sign_resolve:
        cost_minus = ss + hh + 2.0 * cross
        cost = np.minimum(cost_plus, cost_minus)
    else:
        cost = cost_plus
    cost = np.maximum(cost, 0.0)  # guard tiny negative round-off
    rows, cols = linear_sum_assignment(cost)  # rows come back sorted
    perm = cols.copy()
    if sign_resolve:
        signs = np.where(cost_minus[rows, cols] < cost_plus[rows, cols], -1.0, 1.0)
    else:
        signs = np.ones(B)
    rmse = float(np.sqrt(cost[rows, cols].sum() / B))
    return rmse, perm, signs
