"""Probabilistic scheduling: from node-selection marginals to subset draws.

Any row ``pi`` with entries in ``[0, 1]`` summing to an integer ``k`` is the
inclusion-probability vector of some distribution over ``k``-subsets.
:func:`decompose_marginals` builds one such distribution explicitly so a
dispatcher can sample it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FEASIBILITY_TOL = 1e-9
RESIDUAL_TOL = 1e-12


class InfeasibleRowError(ValueError):
    """A marginal row is outside the capped simplex."""


@dataclass(frozen=True)
class SubsetDistribution:
    """Finite distribution over ``k``-subsets of node indices (0-based)."""

    subsets: tuple[tuple[int, ...], ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "subsets", tuple(tuple(int(j) for j in s) for s in self.subsets))
        object.__setattr__(self, "probs", tuple(float(x) for x in self.probs))
        probs = np.asarray(self.probs)
        if len(self.subsets) != probs.size or not self.subsets:
            raise ValueError("need one probability per subset")
        sizes = {len(s) for s in self.subsets}
        if len(sizes) != 1:
            raise ValueError("all subsets must have the same size")
        if any(len(set(s)) != len(s) for s in self.subsets):
            raise ValueError("subsets must hold distinct nodes")
        if np.any(probs < 0) or abs(probs.sum() - 1) > FEASIBILITY_TOL:
            raise ValueError("subset probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "_cdf", np.cumsum(probs))
        object.__setattr__(self, "_table", np.array(self.subsets, dtype=np.intp))

    @property
    def k(self) -> int:
        return len(self.subsets[0])

    def __len__(self):
        return len(self.subsets)

    def atoms(self):
        return list(zip(self.subsets, self.probs))


def check_row(pi_row, k: int, tol: float = FEASIBILITY_TOL) -> np.ndarray:
    p = np.asarray(pi_row, dtype=float)
    if p.ndim != 1:
        raise InfeasibleRowError("marginal row must be one-dimensional")
    if k < 1 or k > p.size:
        raise InfeasibleRowError(f"k={k} outside [1, {p.size}]")
    if np.any(p < -tol) or np.any(p > 1 + tol):
        raise InfeasibleRowError("marginals must lie in [0, 1]")
    if abs(p.sum() - k) > tol:
        raise InfeasibleRowError(f"marginals sum to {p.sum()}, expected {k}")
    return np.clip(p, 0.0, 1.0)


def decompose_marginals(pi_row, k: int) -> SubsetDistribution:
    """Distribution over ``k``-subsets whose inclusion probabilities are ``pi_row``.

    Peels atoms greedily: with residual mass ``p`` and level ``t = sum(p)/k``
    (every ``p_j <= t`` throughout), take the ``k`` largest residuals
    (ties by index) with weight ``min(p_(k), t - p_(k+1))``.  Each step
    either empties a node or makes one tight (``p_j = t``), so at most
    ``2m`` atoms are emitted.
    """
    p = check_row(pi_row, k).copy()
    m = p.size
    subsets: list[tuple[int, ...]] = []
    weights: list[float] = []
    total = p.sum()
    while total > RESIDUAL_TOL and len(subsets) <= 2 * m:
        order = np.lexsort((np.arange(m), -p))
        top = order[:k]
        level = total / k
        nxt = p[order[k]] if k < m else 0.0
        w = min(p[top[-1]], level - nxt)
        if w <= RESIDUAL_TOL:
            break
        subsets.append(tuple(sorted(int(j) for j in top)))
        weights.append(w)
        p[top] -= w
        p[p < RESIDUAL_TOL] = 0.0
        total = p.sum()
    probs = np.asarray(weights)
    probs /= probs.sum()
    return SubsetDistribution(tuple(subsets), probs)


def marginals_of(dist: SubsetDistribution, m: int) -> np.ndarray:
    out = np.zeros(m)
    for subset, prob in zip(dist.subsets, dist.probs):
        out[list(subset)] += prob
    return out


def sample_subset(dist: SubsetDistribution, rng: np.random.Generator) -> tuple[int, ...]:
    if len(dist.subsets) == 1:
        return dist.subsets[0]
    idx = int(np.searchsorted(dist._cdf, rng.random() * dist._cdf[-1], side="right"))
    return dist.subsets[min(idx, len(dist.subsets) - 1)]


def sample_subsets(dist: SubsetDistribution, u: np.ndarray) -> np.ndarray:
    """Vectorized draw: row ``n`` is the subset selected by uniform ``u[n]``."""
    idx = np.searchsorted(dist._cdf, np.asarray(u) * dist._cdf[-1], side="right")
    return dist._table[np.minimum(idx, len(dist.subsets) - 1)]


def decompose_matrix(pi, fanout) -> list[SubsetDistribution]:
    """Decompose every row of a placement matrix."""
    pi = np.asarray(pi, dtype=float)
    return [decompose_marginals(row, int(k)) for row, k in zip(pi, fanout)]
