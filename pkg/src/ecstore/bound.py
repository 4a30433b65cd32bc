"""Upper bounds on mean file-retrieval latency.

For a file whose ``k`` chunk requests go to a random node subset with
inclusion probabilities ``pi_j``, the expected maximum of the per-node
sojourn times satisfies, for every real ``z``::

    T <= z + sum_j pi_j/2 * [(E_j - z) + sqrt((E_j - z)^2 + V_j)]

The right-hand side is convex in ``z``; :func:`minimize_over_z` finds its
minimum.  :func:`system_objective` assembles the rate-weighted bound with
one shared ``z`` across files plus the ``theta``-weighted storage cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import FileClass, Scenario, StorageNode
from .queueing import (
    ParallelMix,
    UnstableError,
    WaitingMoments,
    batched_waiting_moments,
    mg1_waiting_moments,
    parallel_read_service_mix,
    parallel_waiting_moments,
    pk_moments,
)

PI_ZERO_TOL = 1e-6
ROW_SUM_TOL = 1e-9
_BISECT_ITERS = 200


@dataclass(frozen=True, eq=False)
class BoundInput:
    """Bound arguments for one file: inclusion probabilities and sojourn moments."""

    pi_row: np.ndarray
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        for name in ("pi_row", "mean", "variance"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not self.pi_row.shape == self.mean.shape == self.variance.shape:
            raise ValueError("pi_row, mean and variance must have the same length")
        if np.any(self.pi_row < -ROW_SUM_TOL) or np.any(self.pi_row > 1 + ROW_SUM_TOL):
            raise ValueError("pi_row entries must lie in [0, 1]")
        k = self.pi_row.sum()
        if abs(k - round(k)) > ROW_SUM_TOL or round(k) < 1:
            raise ValueError(f"pi_row must sum to a positive integer, got {k}")
        used = self.pi_row > 0
        if not np.all(np.isfinite(self.mean[used]) & np.isfinite(self.variance[used])):
            raise ValueError("finite moments required wherever pi > 0")
        if np.any(self.variance[used] < 0):
            raise ValueError("negative variance")

    @classmethod
    def from_waits(cls, pi_row, waits: Sequence[WaitingMoments]) -> BoundInput:
        return cls(pi_row, [w.mean for w in waits], [w.variance for w in waits])

    @property
    def k(self) -> int:
        return int(round(self.pi_row.sum()))


@dataclass(frozen=True)
class ZMin:
    """Result of a z-minimization; ``z`` may be ``-inf`` (see minimize_weighted)."""

    z: float
    bound: float


def _terms(weights, mean, var, z):
    used = weights > 0
    w, e, v = weights[used], mean[used], var[used]
    return w, e - z, v


def weighted_bound(weights, mean, var, z: float) -> float:
    """``z + sum_j w_j [(E_j - z) + sqrt((E_j - z)^2 + V_j)]``."""
    w, x, v = _terms(np.asarray(weights, float), np.asarray(mean, float), np.asarray(var, float), z)
    return float(z + np.sum(w * (x + np.sqrt(x * x + v))))


def weighted_bound_slope(weights, mean, var, z: float) -> float:
    """Derivative in ``z``; at kinks (``V_j = 0``, ``z = E_j``) the left value."""
    w, x, v = _terms(np.asarray(weights, float), np.asarray(mean, float), np.asarray(var, float), z)
    s = np.sqrt(x * x + v)
    # x/s -> sign(x) when V=0; at x == 0 use the left derivative (ratio +1)
    ratio = np.divide(x, s, out=np.ones_like(x), where=s > 0)
    return float(1.0 - np.sum(w * (1.0 + ratio)))


def minimize_weighted(weights, mean, var) -> ZMin:
    """Minimize the weighted bound over ``z``.

    With total weight ``W``, the slope tends to ``1 - 2W`` as ``z -> -inf``.
    When ``2W = 1`` (every file reads one chunk) the function decreases
    towards ``sum_j 2 w_j E_j`` and the infimum is reached only in the
    limit unless all variances vanish; in that case ``z = -inf`` is
    returned together with the limiting value.  With zero variances the
    largest minimizer is returned.
    """
    weights = np.asarray(weights, float)
    mean = np.asarray(mean, float)
    var = np.asarray(var, float)
    used = weights > 0
    w, e, v = weights[used], mean[used], var[used]
    if w.size == 0:
        raise ValueError("no positive weights")
    excess = 2 * w.sum() - 1
    if excess < -1e-12:
        raise ValueError("bound is unbounded below: total weight below 1/2")
    if excess <= 1e-12:
        if np.all(v == 0):
            z = float(e.min())
            return ZMin(z, weighted_bound(weights, mean, var, z))
        return ZMin(-math.inf, float(np.sum(2 * w * e)))

    sd = float(np.sqrt(v.max()))
    span = 10 * sd + 1.0 + 1e-9 * float(np.abs(e).max())
    lo, hi = float(e.min()) - span, float(e.max()) + span
    while weighted_bound_slope(w, e, v, lo) > 0:
        lo -= 2 * (hi - lo)
    while weighted_bound_slope(w, e, v, hi) <= 0:
        hi += 2 * (hi - lo)
    # bisection for the largest z with non-positive slope
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if weighted_bound_slope(w, e, v, mid) <= 0:
            lo = mid
        else:
            hi = mid
    z = lo if weighted_bound(w, e, v, lo) <= weighted_bound(w, e, v, hi) else hi
    return ZMin(z, weighted_bound(w, e, v, z))


def bound_at_z(bi: BoundInput, z: float) -> float:
    return weighted_bound(bi.pi_row / 2, bi.mean, bi.variance, z)


def minimize_over_z(bi: BoundInput) -> ZMin:
    """Tightest single-file bound; for ``k = 1`` this is ``sum_j pi_j E_j``."""
    return minimize_weighted(bi.pi_row / 2, bi.mean, bi.variance)


def homogeneous_closed_form(k: int, mean: float, var: float) -> float:
    """Bound for ``k`` reads spread uniformly over identical nodes.

    Equals ``E + sqrt(k - 1) * sd``; the optimizing ``z`` sits where the
    slope of the symmetric bound vanishes.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if var < 0:
        raise ValueError("negative variance")
    return mean + math.sqrt(k - 1) * math.sqrt(var)


# ---------------------------------------------------------------------------
# Per-file bounds with the extension variants


def file_bound(file: FileClass, pi_row, nodes: Sequence[StorageNode], loads,
               variant: str = "base", mix: Sequence[ParallelMix] | None = None) -> ZMin:
    """Per-file latency bound minimized over its own ``z``.

    variant
        ``"base"``: ``pi_row`` has ``m`` entries summing to ``k`` and
        ``loads`` are the node arrival rates.
        ``"multi_chunk"``: ``pi_row`` is an ``(m, c)`` array where
        ``pi_row[j, x-1]`` is the probability of sending ``x`` chunks to
        node ``j``; ``sum_j sum_x x * pi_row[j, x-1] = k``; ``loads`` are
        total chunk rates per node.
        ``"parallel"``: ``pi_row`` sums to ``d``; ``mix`` comes from
        :func:`~ecstore.queueing.parallel_read_service_mix`.
    """
    pi_row = np.asarray(pi_row, dtype=float)
    loads = np.asarray(loads, dtype=float)
    if variant == "base":
        _check_row(pi_row, file.k, file.id)
        waits = [mg1_waiting_moments(nodes[j], loads[j]) if pi_row[j] > 0 else None
                 for j in range(len(nodes))]
        return minimize_over_z(_bound_input(pi_row, waits))
    if variant == "multi_chunk":
        if pi_row.ndim != 2 or pi_row.shape[0] != len(nodes):
            raise ValueError("multi_chunk profile must be an (m, c) array")
        x = np.arange(1, pi_row.shape[1] + 1)
        mass = float((pi_row * x).sum())
        if abs(mass - file.k) > ROW_SUM_TOL:
            raise ValueError(f"file {file.id}: chunk mass {mass} != k={file.k}")
        if np.any(pi_row < -ROW_SUM_TOL) or np.any(pi_row.sum(axis=1) > 1 + ROW_SUM_TOL):
            raise ValueError(f"file {file.id}: invalid multi-chunk probabilities")
        w, e, v = [], [], []
        for j, node in enumerate(nodes):
            for xi in range(pi_row.shape[1]):
                if pi_row[j, xi] > 0:
                    wm = batched_waiting_moments(node, loads[j], xi + 1)
                    w.append(pi_row[j, xi] / 2)
                    e.append(wm.mean)
                    v.append(wm.variance)
        return minimize_weighted(w, e, v)
    if variant == "parallel":
        if file.d is None or mix is None:
            raise ValueError("parallel variant needs file.d and the node service mix")
        _check_row(pi_row, file.d, file.id)
        waits = [parallel_waiting_moments(nodes[j], mix[j], file.k, file.d) if pi_row[j] > 0
                 else None for j in range(len(nodes))]
        return minimize_over_z(_bound_input(pi_row, waits))
    raise ValueError(f"unknown variant {variant!r}")


def _check_row(pi_row, total, file_id):
    if pi_row.ndim != 1:
        raise ValueError("pi_row must be one-dimensional")
    if abs(pi_row.sum() - total) > ROW_SUM_TOL:
        raise ValueError(f"file {file_id}: row sums to {pi_row.sum()}, expected {total}")
    if np.any(pi_row < -ROW_SUM_TOL) or np.any(pi_row > 1 + ROW_SUM_TOL):
        raise ValueError(f"file {file_id}: probabilities outside [0, 1]")


def _bound_input(pi_row, waits):
    mean = np.array([w.mean if w else 0.0 for w in waits])
    var = np.array([w.variance if w else 0.0 for w in waits])
    return BoundInput(np.clip(pi_row, 0, 1), mean, var)


def file_bounds(pi, scenario: Scenario) -> list[ZMin]:
    """Per-file bounds for every file (base or parallel variant per file)."""
    pi = np.asarray(pi, dtype=float)
    loads = scenario.lam @ pi
    parallel = any(f.d is not None for f in scenario.files)
    if parallel:
        files = [f if f.d is not None else FileClass(f.id, f.k, f.lam, f.k) for f in scenario.files]
        mix = parallel_read_service_mix(pi, files, scenario.nodes)
        return [file_bound(f, pi[i], scenario.nodes, loads, "parallel", mix) for i, f in enumerate(files)]
    return [file_bound(f, pi[i], scenario.nodes, loads) for i, f in enumerate(scenario.files)]


# ---------------------------------------------------------------------------
# System objective


@dataclass(frozen=True)
class ObjectiveBreakdown:
    """Latency-plus-cost objective at a placement.

    ``latency_term`` is the full rate-weighted latency bound, i.e. it
    already includes ``z``; ``total = latency_term + theta * cost_term``.
    """

    z: float
    latency_term: float
    cost_term: float
    theta: float

    @property
    def total(self) -> float:
        return self.latency_term + self.theta * self.cost_term


def check_placement(pi, scenario: Scenario, tol: float = ROW_SUM_TOL) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (scenario.r, scenario.m):
        raise ValueError(f"pi has shape {pi.shape}, expected ({scenario.r}, {scenario.m})")
    if np.any(pi < -tol) or np.any(pi > 1 + tol):
        raise ValueError("pi entries must lie in [0, 1]")
    sums = pi.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - scenario.fanout) > tol)
    if bad.size:
        i = bad[0]
        raise ValueError(
            f"file {scenario.files[i].id}: row sums to {sums[i]}, expected {scenario.fanout[i]}")
    return pi


def node_moments(pi, scenario: Scenario):
    """Loads and sojourn moments (mean, var, dmean, dvar) per node."""
    loads = scenario.lam @ pi
    mean, var, dmean, dvar = pk_moments(loads, scenario.mu, scenario.sigma2,
                                        scenario.gamma2, scenario.gamma3)
    return loads, mean, var, dmean, dvar


def _raise_unstable(scenario: Scenario, loads):
    rho = loads / scenario.mu
    bad = np.flatnonzero(~(rho < 1))
    ids = [scenario.nodes[j].id for j in bad]
    raise UnstableError(f"unstable node(s) {ids}: rho={rho[bad].round(6).tolist()}", ids, rho[bad])


def latency_weights(loads, scenario: Scenario):
    return loads / (2 * scenario.total_rate)


def minimize_system_z(pi, scenario: Scenario) -> ZMin:
    """Shared-``z`` minimizer of the rate-weighted latency bound."""
    pi = np.asarray(pi, dtype=float)
    loads, mean, var, _, _ = node_moments(pi, scenario)
    if not np.all(np.isfinite(mean)):
        _raise_unstable(scenario, loads)
    return minimize_weighted(latency_weights(loads, scenario), mean, var)


def latency_bound_value(pi, z: float, scenario: Scenario) -> float:
    """``z + sum_j Lambda_j/(2 lam) [X_j + sqrt(X_j^2 + Y_j)]``; ``z = -inf`` uses the limit."""
    loads, mean, var, _, _ = node_moments(np.asarray(pi, float), scenario)
    if not np.all(np.isfinite(mean)):
        _raise_unstable(scenario, loads)
    w = latency_weights(loads, scenario)
    if z == -math.inf:
        return float(np.sum(2 * w * mean))
    return weighted_bound(w, mean, var, z)


def indicator_cost(pi, scenario: Scenario, pi_zero_tol: float = PI_ZERO_TOL) -> float:
    return float((np.asarray(pi) > pi_zero_tol).sum(axis=0) @ scenario.cost)


def system_objective(pi, scenario: Scenario, z: float | None = None,
                     theta: float | None = None, pi_zero_tol: float = PI_ZERO_TOL
                     ) -> ObjectiveBreakdown:
    """Latency bound plus ``theta`` times the chunk storage cost.

    ``z=None`` uses the minimizing ``z``; ``theta=None`` takes it from the
    scenario's optimizer options.  Raises :class:`UnstableError` if any
    node is saturated.
    """
    pi = check_placement(pi, scenario)
    if theta is None:
        theta = scenario.optimizer.theta
    if z is None:
        z = minimize_system_z(pi, scenario).z
    latency = latency_bound_value(pi, z, scenario)
    return ObjectiveBreakdown(z=float(z), latency_term=latency,
                              cost_term=indicator_cost(pi, scenario, pi_zero_tol), theta=theta)


def code_lengths(pi, pi_zero_tol: float = PI_ZERO_TOL) -> np.ndarray:
    """``n_i = |{j : pi[i, j] > tol}|``."""
    return (np.asarray(pi) > pi_zero_tol).sum(axis=1)


def placement_sets(pi, scenario: Scenario, pi_zero_tol: float = PI_ZERO_TOL) -> list[list[int]]:
    return [[scenario.nodes[j].id for j in np.flatnonzero(row > pi_zero_tol)] for row in np.asarray(pi)]
