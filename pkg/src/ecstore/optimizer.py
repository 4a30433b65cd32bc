"""Joint latency-plus-cost optimization of codes, placement and dispatch.

The storage cost ``sum_ij V_j 1(pi_ij > 0)`` is replaced around a reference
point by its tangent under the concave surrogate
``V_j log(beta*pi + 1)/log(beta)``.  Each outer iteration minimizes the
convex latency bound plus that linear cost over the per-file capped
simplices by projected gradient descent, then re-optimizes the shared
``z``.  Because the linear term majorizes the log surrogate, the
"modified" objective (latency + log surrogate) never increases across
outer iterations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .bound import (
    ObjectiveBreakdown,
    check_placement,
    code_lengths,
    indicator_cost,
    latency_bound_value,
    latency_weights,
    minimize_system_z,
    node_moments,
    placement_sets,
)
from .model import JlcmParams, Scenario
from .queueing import UnstableError

log = logging.getLogger(__name__)

__all__ = [
    "InfeasibleWorkloadError",
    "JlcmParams",
    "Solution",
    "TraceRow",
    "initialize_pi",
    "inner_projected_gradient",
    "latency_gradient",
    "linearized_cost",
    "load_balancing_pi",
    "max_spread_pi",
    "modified_objective",
    "project_capped_simplex",
    "project_rows",
    "run_jlcm",
    "update_z",
]


class InfeasibleWorkloadError(ValueError):
    """No stable dispatch exists under the utilization cap."""

    def __init__(self, message: str, nodes=()):
        super().__init__(message)
        self.nodes = list(nodes)


# ---------------------------------------------------------------------------
# Projection onto {x in [0,1]^m : sum x = k}


def project_rows(y, k) -> np.ndarray:
    """Row-wise Euclidean projection onto the capped simplices.

    Row ``i`` of the result is ``clip(y_i - tau_i, 0, 1)`` with ``tau_i``
    chosen so it sums to ``k[i]``.  The sum is piecewise linear in ``tau``
    with breakpoints at ``y_ij`` and ``y_ij - 1``, so ``tau_i`` is found
    exactly by interpolating between the bracketing breakpoints.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    r, m = y.shape
    k = np.broadcast_to(np.asarray(k, dtype=float), (r,))
    if np.any(k > m) or np.any(k < 0):
        raise ValueError("capped simplex is empty: need 0 <= k <= m")
    bps = np.sort(np.concatenate([y - 1.0, y], axis=1), axis=1)
    sums = np.clip(y[:, None, :] - bps[:, :, None], 0.0, 1.0).sum(axis=2)
    # sums is non-increasing along axis 1; first breakpoint with sum <= k
    idx = np.argmax(sums <= k[:, None] + 1e-15, axis=1)
    rows = np.arange(r)
    hi_tau, hi_sum = bps[rows, idx], sums[rows, idx]
    lo_idx = np.maximum(idx - 1, 0)
    lo_tau, lo_sum = bps[rows, lo_idx], sums[rows, lo_idx]
    denom = lo_sum - hi_sum
    frac = np.divide(lo_sum - k, denom, out=np.ones(r), where=denom > 0)
    tau = np.where(idx == 0, hi_tau, lo_tau + frac * (hi_tau - lo_tau))
    return np.clip(y - tau[:, None], 0.0, 1.0)


def project_capped_simplex(y, k: int) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if k > y.size:
        raise ValueError(f"k={k} exceeds dimension {y.size}")
    return project_rows(y[None, :], [k])[0]


# ---------------------------------------------------------------------------
# Objective pieces


def _slope(pi_ref, params: JlcmParams, scenario: Scenario) -> np.ndarray:
    return scenario.cost / ((np.asarray(pi_ref) + 1.0 / params.beta) * math.log(params.beta))


def linearized_cost(pi, pi_ref, params: JlcmParams, scenario: Scenario) -> float:
    """``theta * sum_ij [V_j 1(ref>0) + V_j (pi - ref)/((ref + 1/beta) log beta)]``."""
    pi, pi_ref = np.asarray(pi, float), np.asarray(pi_ref, float)
    if pi.shape != pi_ref.shape:
        raise ValueError("pi and pi_ref shapes differ")
    base = indicator_cost(pi_ref, scenario, params.pi_zero_tol)
    return params.theta * (base + float(np.sum(_slope(pi_ref, params, scenario) * (pi - pi_ref))))


def log_cost(pi, params: JlcmParams, scenario: Scenario) -> float:
    """``sum_ij V_j log(beta pi_ij + 1) / log beta``."""
    pi = np.asarray(pi, float)
    return float(np.sum(scenario.cost * np.log1p(params.beta * pi)) / math.log(params.beta))


def modified_objective(pi, z: float, scenario: Scenario, params: JlcmParams | None = None) -> float:
    params = params or scenario.optimizer
    return latency_bound_value(pi, z, scenario) + params.theta * log_cost(pi, params, scenario)


def _latency_and_gradient(pi, z: float, scenario: Scenario):
    loads, mean, var, dmean, dvar = node_moments(pi, scenario)
    if not np.all(np.isfinite(mean)):
        raise UnstableError("unstable placement")
    lam_hat = scenario.total_rate
    if z == -math.inf:
        value = float(loads @ mean) / lam_hat
        dnode = (mean + loads * dmean) / lam_hat
    else:
        w = latency_weights(loads, scenario)
        x = mean - z
        s = np.sqrt(x * x + var)
        g = x + s
        value = float(z + w @ g)
        dg = dmean + np.divide(x * dmean + dvar / 2, s, out=np.zeros_like(s), where=s > 0)
        dnode = g / (2 * lam_hat) + w * dg
    return value, scenario.lam[:, None] * dnode[None, :]


def latency_gradient(pi, z: float, scenario: Scenario) -> np.ndarray:
    """Gradient in ``pi`` of the rate-weighted latency bound at fixed ``z``."""
    return _latency_and_gradient(np.asarray(pi, float), z, scenario)[1]


def update_z(pi, scenario: Scenario) -> float:
    return minimize_system_z(pi, scenario).z


# ---------------------------------------------------------------------------
# Inner solver


def _stable(pi, scenario: Scenario, rho_cap: float) -> bool:
    return bool(np.all(scenario.lam @ pi < rho_cap * scenario.mu))


def inner_projected_gradient(pi_init, z: float, pi_ref, params: JlcmParams, scenario: Scenario,
                             tol: float | None = None) -> np.ndarray:
    """Projected gradient descent on latency + linearized cost at fixed ``z``.

    Steps are accepted only if they keep every node under ``rho_cap`` and
    satisfy the sufficient-decrease test of projected gradient methods;
    otherwise the step halves.  Stops when the L1 move drops below ``tol``
    (default ``params.epsilon``), after ``max_inner_iters`` steps, or when
    no step size yields progress.
    """
    tol = params.epsilon if tol is None else tol
    pi = np.array(pi_init, dtype=float)
    k = scenario.k
    cost_grad = params.theta * _slope(pi_ref, params, scenario)

    def surrogate(p):
        value, grad = _latency_and_gradient(p, z, scenario)
        return value + float(np.sum(cost_grad * p)), grad + cost_grad

    if not _stable(pi, scenario, params.rho_cap):
        raise UnstableError("inner solver started from an unstable point")
    f, g = surrogate(pi)
    step = _initial_step(pi, g, k, scenario, params, surrogate)
    for _ in range(params.max_inner_iters):
        accepted = False
        while step > 1e-18:
            cand = project_rows(pi - step * g, k)
            d = cand - pi
            if not np.any(d):
                return pi
            if _stable(cand, scenario, params.rho_cap):
                f_new, g_new = surrogate(cand)
                if f_new <= f + np.sum(g * d) + np.sum(d * d) / (2 * step) and f_new <= f:
                    accepted = True
                    break
            step /= 2
        if not accepted:
            break
        pi, f, g = cand, f_new, g_new
        step *= 2
        if np.abs(d).sum() <= tol:
            break
    return pi


def _initial_step(pi, g, k, scenario, params, surrogate) -> float:
    gnorm = float(np.abs(g).max())
    if gnorm == 0:
        return 1.0
    h = 1e-3 / gnorm
    probe = project_rows(pi - h * g, k)
    dx = probe - pi
    if not np.any(dx) or not _stable(probe, scenario, params.rho_cap):
        return h
    _, g2 = surrogate(probe)
    lip = float(np.linalg.norm(g2 - g) / np.linalg.norm(dx))
    return 1.0 / lip if lip > 0 else 1.0 / gnorm


# ---------------------------------------------------------------------------
# Initialization and baselines


def load_balancing_pi(scenario: Scenario) -> np.ndarray:
    """Rows proportional to service rates, projected onto the capped simplex."""
    share = scenario.mu / scenario.mu.sum()
    return project_rows(scenario.k[:, None] * share[None, :], scenario.k)


def max_spread_pi(scenario: Scenario) -> np.ndarray:
    """Every file spread evenly over all nodes, ``pi_ij = k_i / m``."""
    return np.repeat((scenario.k / scenario.m)[:, None], scenario.m, axis=1)


def _min_max_utilization(scenario: Scenario):
    """LP: placement minimizing the largest node utilization."""
    r, m = scenario.r, scenario.m
    n = r * m
    c = np.zeros(n + 1)
    c[-1] = 1.0
    rows_eq = sparse.kron(sparse.eye(r), np.ones((1, m)))
    a_eq = sparse.hstack([rows_eq, sparse.csr_matrix((r, 1))])
    load = sparse.kron(scenario.lam[None, :], sparse.eye(m))
    a_ub = sparse.hstack([load, sparse.csr_matrix(-scenario.mu[:, None])])
    res = linprog(c, A_ub=a_ub.tocsr(), b_ub=np.zeros(m), A_eq=a_eq.tocsr(),
                  b_eq=scenario.k.astype(float), bounds=[(0, 1)] * n + [(0, None)],
                  method="highs")
    if res.status != 0:
        raise InfeasibleWorkloadError(f"stabilizing LP failed: {res.message}")
    return project_rows(res.x[:-1].reshape(r, m), scenario.k), float(res.x[-1])


def initialize_pi(scenario: Scenario, params: JlcmParams | None = None) -> np.ndarray:
    """Feasible, stable starting placement.

    Starts from :func:`load_balancing_pi`; if some node exceeds the
    utilization cap, blends toward the min-max-utilization placement
    just enough to bring every node below the cap.
    """
    params = params or scenario.optimizer
    demand = float(scenario.lam @ scenario.k)
    capacity = float(scenario.mu.sum())
    if demand >= params.rho_cap * capacity:
        raise InfeasibleWorkloadError(
            f"workload infeasible: chunk demand {demand:.6g}/s >= "
            f"{params.rho_cap} x capacity {capacity:.6g}/s",
            [n.id for n in scenario.nodes])
    pi = load_balancing_pi(scenario)
    if _stable(pi, scenario, params.rho_cap):
        return pi
    pi_lp, worst = _min_max_utilization(scenario)
    if not worst < params.rho_cap:
        rho = scenario.lam @ pi_lp / scenario.mu
        bad = [scenario.nodes[j].id for j in np.flatnonzero(rho >= params.rho_cap - 1e-9)]
        raise InfeasibleWorkloadError(
            f"workload infeasible: node(s) {bad} saturate (min max utilization {worst:.6g})", bad)
    target = (worst + params.rho_cap) / 2
    load_p, load_lp = scenario.lam @ pi, scenario.lam @ pi_lp
    over = load_p > target * scenario.mu
    alpha = float(np.max((load_p[over] - target * scenario.mu[over]) / (load_p[over] - load_lp[over])))
    return project_rows((1 - alpha) * pi + alpha * pi_lp, scenario.k)


# ---------------------------------------------------------------------------
# Outer loop


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    objective: float
    modified_objective: float
    max_rho: float


@dataclass
class Solution:
    pi: np.ndarray
    z: float
    n: np.ndarray
    placement: list[list[int]]
    objective: ObjectiveBreakdown
    trace: list[TraceRow] = field(default_factory=list)
    converged: bool = False
    params: JlcmParams = field(default_factory=JlcmParams)

    @property
    def iterations(self) -> int:
        return len(self.trace) - 1


def snap_support(pi, k, tol: float) -> np.ndarray:
    """Zero entries at or below ``tol`` and re-project each row onto its support."""
    pi = np.array(pi, dtype=float)
    for i, row in enumerate(pi):
        keep = row > tol
        if keep.all():
            continue
        row[~keep] = 0.0
        row[keep] = project_capped_simplex(row[keep], int(k[i]))
    return pi


def _objective(pi, z, scenario, params) -> float:
    return latency_bound_value(pi, z, scenario) + params.theta * indicator_cost(pi, scenario, params.pi_zero_tol)


def _require_base_model(scenario: Scenario):
    if any(f.d is not None and f.d != f.k for f in scenario.files):
        raise ValueError("the optimizer handles k-of-n reads only; parallel reads (d > k) "
                         "are supported by the bound and the simulator")


def run_jlcm(scenario: Scenario, params: JlcmParams | None = None,
             pi_init=None) -> Solution:
    """Alternate convexified placement updates and ``z`` updates.

    Stops once both the true objective and the modified objective
    decrease by at most ``epsilon`` in an outer iteration, or after
    ``max_outer_iters``.  The returned placement is the iterate with the
    lowest true objective, with near-zero probabilities snapped to zero.
    """
    params = params or scenario.optimizer
    _require_base_model(scenario)
    if pi_init is None:
        pi = initialize_pi(scenario, params)
    else:
        pi = check_placement(pi_init, scenario).copy()
        if not _stable(pi, scenario, params.rho_cap):
            pi = initialize_pi(scenario, params)

    def max_rho(p):
        return float(np.max(scenario.lam @ p / scenario.mu))

    z = update_z(pi, scenario)
    b = _objective(pi, z, scenario, params)
    mod = modified_objective(pi, z, scenario, params)
    trace = [TraceRow(0, b, mod, max_rho(pi))]
    best = (b, pi, z)
    converged = False
    for t in range(1, params.max_outer_iters + 1):
        pi_new = inner_projected_gradient(pi, z, pi, params, scenario)
        z_new = update_z(pi_new, scenario)
        if latency_bound_value(pi_new, z_new, scenario) > latency_bound_value(pi_new, z, scenario):
            z_new = z
        b_new = _objective(pi_new, z_new, scenario, params)
        mod_new = modified_objective(pi_new, z_new, scenario, params)
        trace.append(TraceRow(t, b_new, mod_new, max_rho(pi_new)))
        if b_new < best[0]:
            best = (b_new, pi_new, z_new)
        done = b - b_new <= params.epsilon and mod - mod_new <= params.epsilon
        pi, z, b, mod = pi_new, z_new, b_new, mod_new
        if done:
            converged = True
            break
    log.debug("outer loop finished after %d iterations (converged=%s)", len(trace) - 1, converged)

    pi_best = snap_support(best[1], scenario.k, params.pi_zero_tol)
    if not _stable(pi_best, scenario, params.rho_cap):
        pi_best = best[1]
    z_best = update_z(pi_best, scenario)
    objective = ObjectiveBreakdown(
        z=z_best,
        latency_term=latency_bound_value(pi_best, z_best, scenario),
        cost_term=indicator_cost(pi_best, scenario, params.pi_zero_tol),
        theta=params.theta,
    )
    return Solution(
        pi=pi_best,
        z=z_best,
        n=code_lengths(pi_best, params.pi_zero_tol),
        placement=placement_sets(pi_best, scenario, params.pi_zero_tol),
        objective=objective,
        trace=trace,
        converged=converged,
        params=params,
    )
