"""Discrete optimal transport between neuron measures.

A layer's neurons form a discrete measure: a mass vector on the probability
simplex plus one support row per neuron. Supports come either from incoming
weight rows (server-side fusion) or from bottleneck activations over a probe
batch (client-side fusion). Couplings between two such measures are solved
exactly for the uniform equal-size case (where the optimum is a scaled
permutation) and by entropic regularization otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError, ShapeError
from .numerics import as_matrix, pairwise_euclidean

__all__ = [
    "NeuronMeasure",
    "TransportPlan",
    "uniform_mass",
    "weight_support",
    "activation_support",
    "solve_exact",
    "solve_sinkhorn",
    "plan_to_alignment",
]

_SIMPLEX_TOL = 1e-12
_MARGINAL_TOL = 1e-9


def uniform_mass(n: int) -> np.ndarray:
    if n < 1:
        raise ShapeError("measure needs at least one atom")
    return np.full(n, 1.0 / n)


def _check_simplex(mass: np.ndarray, name: str) -> np.ndarray:
    mass = np.asarray(mass, dtype=np.float64)
    if mass.ndim != 1:
        raise ShapeError(f"{name} must be a vector")
    if (mass < 0).any():
        raise NumericError(f"{name} has negative entries")
    if abs(mass.sum() - 1.0) > _SIMPLEX_TOL * max(1, mass.size):
        raise NumericError(f"{name} does not sum to 1 (got {mass.sum()!r})")
    return mass


@dataclass(frozen=True)
class NeuronMeasure:
    """Discrete measure over a layer's neurons: mass vector + support rows."""

    mass: np.ndarray
    support: np.ndarray

    def __post_init__(self):
        mass = _check_simplex(self.mass, "mass")
        support = as_matrix(self.support, rows=mass.size)
        object.__setattr__(self, "mass", mass)
        object.__setattr__(self, "support", support)

    @property
    def size(self) -> int:
        return self.mass.size


@dataclass(frozen=True)
class TransportPlan:
    """Coupling matrix with its marginals and realized (unregularized) cost."""

    plan: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    cost: float
    converged: bool = True

    def __post_init__(self):
        plan = as_matrix(self.plan)
        if (plan < 0).any():
            raise NumericError("transport plan has negative entries")
        object.__setattr__(self, "plan", plan)

    def marginal_violation(self) -> float:
        r = np.abs(self.plan.sum(axis=1) - self.row_marginal).max()
        c = np.abs(self.plan.sum(axis=0) - self.col_marginal).max()
        return float(max(r, c))


def weight_support(adapter_layer, which: str, incoming_adjustment: np.ndarray) -> np.ndarray:
    """Stack a projection's incoming-weight rows (plus bias) as measure supports.

    ``which="down"`` yields one row per bottleneck neuron (incoming from the
    hidden width); ``which="up"`` one row per hidden output (incoming from the
    bottleneck). The incoming dimension is first corrected for the previous
    permutation by post-multiplying with ``incoming_adjustment`` (identity when
    nothing upstream was permuted). The bias joins as a final support column
    since it is an incoming parameter of its neuron.
    """
    if which == "down":
        w = adapter_layer.w_down.T  # (bottleneck, hidden): rows are neurons
        bias = adapter_layer.b_down
    elif which == "up":
        w = adapter_layer.w_up.T  # (hidden, bottleneck): rows are neurons
        bias = adapter_layer.b_up
    else:
        raise ValueError(f"which must be 'down' or 'up', got {which!r}")
    adj = as_matrix(incoming_adjustment)
    if adj.shape[0] != w.shape[1] or adj.shape[0] != adj.shape[1]:
        raise ShapeError(
            f"incoming adjustment {adj.shape} incompatible with incoming dim {w.shape[1]}"
        )
    return np.hstack([w @ adj, bias[:, None]])


def activation_support(cache, layer_index: int, mode: str = "mean") -> np.ndarray:
    """Support rows from cached bottleneck activations of one adapter layer.

    ``mean`` reduces the probe batch to one scalar coordinate per neuron;
    ``per_sample`` keeps one coordinate per probe sample.
    """
    acts = cache.layers[layer_index].bottleneck_pre  # (samples, bottleneck)
    if acts.shape[0] < 1:
        raise DataError("activation support requires at least one cached sample")
    if mode == "mean":
        return acts.mean(axis=0)[:, None]
    if mode == "per_sample":
        return acts.T.copy()
    raise ValueError(f"mode must be 'mean' or 'per_sample', got {mode!r}")


def _solve_assignment(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect matching on a square cost matrix.

    Shortest-augmenting-path method with potentials, O(n^3). Columns are
    scanned in ascending order with strict-improvement updates, so equal-cost
    optima resolve to the lowest column index deterministically.

    Returns ``col_of_row``: row i is matched to column col_of_row[i].
    """
    n = cost.shape[0]
    INF = float("inf")
    # 1-indexed potentials; p[j] = row currently matched to column j (0 = free).
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = -1
            row = cost[i0 - 1]
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        col_of_row[p[j] - 1] = j - 1
    return col_of_row


def _is_uniform(mass: np.ndarray) -> bool:
    return np.abs(mass - 1.0 / mass.size).max() <= _SIMPLEX_TOL * mass.size


def _lp_coupling(cost: np.ndarray, alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Exact transportation LP for general marginals (HiGHS backend)."""
    from scipy.optimize import linprog
    from scipy.sparse import csr_matrix

    n, m = cost.shape
    rows, cols, vals = [], [], []
    for i in range(n):
        for j in range(m):
            rows.append(i)
            cols.append(i * m + j)
            vals.append(1.0)
    for j in range(m):
        for i in range(n):
            rows.append(n + j)
            cols.append(i * m + j)
            vals.append(1.0)
    a_eq = csr_matrix((vals, (rows, cols)), shape=(n + m, n * m))
    b_eq = np.concatenate([alpha, beta])
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise NumericError(f"transportation LP failed: {res.message}")
    return np.maximum(res.x.reshape(n, m), 0.0)


def solve_exact(cost: np.ndarray, alpha: np.ndarray, beta: np.ndarray) -> TransportPlan:
    """Exact optimal coupling for the given ground cost and marginals.

    With equal-size uniform marginals the optimum is a permutation scaled by
    1/n, found by linear assignment; other marginals fall back to the
    transportation LP.
    """
    cost = as_matrix(cost)
    if (cost < 0).any():
        raise NumericError("ground cost must be nonnegative")
    alpha = _check_simplex(alpha, "alpha")
    beta = _check_simplex(beta, "beta")
    if cost.shape != (alpha.size, beta.size):
        raise ShapeError(
            f"cost shape {cost.shape} does not match marginals ({alpha.size}, {beta.size})"
        )
    if abs(alpha.sum() - beta.sum()) > _MARGINAL_TOL:
        raise NumericError("infeasible marginals: mass totals differ")

    n, m = cost.shape
    if n == m and _is_uniform(alpha) and _is_uniform(beta):
        col_of_row = _solve_assignment(cost)
        plan = np.zeros((n, n))
        plan[np.arange(n), col_of_row] = 1.0 / n
        realized = float(cost[np.arange(n), col_of_row].sum() / n)
    else:
        plan = _lp_coupling(cost, alpha, beta)
        realized = float((plan * cost).sum())
    return TransportPlan(plan=plan, row_marginal=alpha, col_marginal=beta, cost=realized)


def solve_sinkhorn(
    cost: np.ndarray,
    alpha: np.ndarray,
    beta: np.ndarray,
    epsilon: float | None = None,
    max_iters: int = 2000,
    tol: float = 1e-9,
) -> TransportPlan:
    """Entropic-regularized coupling via log-domain Sinkhorn iterations.

    ``epsilon`` defaults to 0.01 * mean(cost). Iterates alternate row/column
    scaling in log space until the worst marginal violation drops below
    ``tol`` or ``max_iters`` is hit; in the latter case ``converged`` is
    False. Either way the final plan is rounded onto the transport polytope
    (row/column rescale plus a residual outer product), so returned plans
    always satisfy their marginals to float precision and their realized
    (unregularized) cost can never undercut the exact optimum.
    """
    cost = as_matrix(cost)
    alpha = _check_simplex(alpha, "alpha")
    beta = _check_simplex(beta, "beta")
    if cost.shape != (alpha.size, beta.size):
        raise ShapeError("cost shape does not match marginals")
    if epsilon is None:
        epsilon = 0.01 * float(cost.mean())
    if epsilon <= 0:
        raise NumericError("epsilon must be positive")

    log_alpha = np.log(alpha)
    log_beta = np.log(beta)
    log_k = -cost / epsilon  # (n, m)
    phi = np.zeros(alpha.size)
    psi = np.zeros(beta.size)
    converged = False
    for _ in range(max_iters):
        phi = log_alpha - _logsumexp(log_k + psi[None, :], axis=1)
        psi = log_beta - _logsumexp(log_k + phi[:, None], axis=0)
        plan = np.exp(phi[:, None] + psi[None, :] + log_k)
        viol = max(
            np.abs(plan.sum(axis=1) - alpha).max(),
            np.abs(plan.sum(axis=0) - beta).max(),
        )
        if viol < tol:
            converged = True
            break
    plan = np.exp(phi[:, None] + psi[None, :] + log_k)
    plan = _round_to_polytope(plan, alpha, beta)
    realized = float((plan * cost).sum())
    return TransportPlan(
        plan=plan,
        row_marginal=alpha,
        col_marginal=beta,
        cost=realized,
        converged=converged,
    )


def _round_to_polytope(plan: np.ndarray, alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Project an almost-coupling onto exact marginals.

    Scale rows then columns down where they overshoot, then distribute the
    remaining mass as a rank-one correction. Never increases any entry past
    its marginal share, so the added cost is bounded by the prior violation.
    """
    r = plan.sum(axis=1)
    plan = plan * np.minimum(alpha / np.maximum(r, 1e-300), 1.0)[:, None]
    c = plan.sum(axis=0)
    plan = plan * np.minimum(beta / np.maximum(c, 1e-300), 1.0)[None, :]
    err_r = alpha - plan.sum(axis=1)
    err_c = beta - plan.sum(axis=0)
    total = err_r.sum()
    if total > 0:
        plan = plan + np.outer(err_r, err_c) / total
    return np.maximum(plan, 0.0)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    hi = a.max(axis=axis, keepdims=True)
    out = np.log(np.exp(a - hi).sum(axis=axis, keepdims=True)) + hi
    return np.squeeze(out, axis=axis)


def plan_to_alignment(plan: TransportPlan) -> np.ndarray:
    """Normalize a coupling into an alignment map: diag(1/beta) @ plan^T.

    For uniform equal-size marginals the result is exactly a permutation
    matrix sending movable-neuron coordinates to anchor-neuron slots.
    """
    beta = plan.col_marginal
    if (beta <= 0).any():
        raise NumericError("alignment undefined for zero column marginals")
    return plan.plan.T / beta[:, None]
