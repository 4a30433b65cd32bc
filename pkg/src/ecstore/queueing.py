"""Per-node load aggregation and M/G/1 sojourn-time moments.

Chunk requests reaching node ``j`` form a Poisson stream of rate
``Lambda_j = sum_i lambda_i * pi[i, j]``; each node is then analyzed as an
independent M/G/1 FIFO queue through the Pollaczek-Khinchin mean and
variance formulas.  The ``Q`` quantities here are sojourn times (waiting
plus own service).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import FileClass, StorageNode

DEFAULT_RHO_CAP = 0.999


class UnstableError(ArithmeticError):
    """A node is loaded at or beyond its service capacity."""

    def __init__(self, message: str, nodes: Sequence[int] = (), rho: Sequence[float] = ()):
        super().__init__(message)
        self.nodes = list(nodes)
        self.rho = list(rho)


@dataclass(frozen=True)
class NodeLoad:
    arrival_rate: float
    rho: float


@dataclass(frozen=True)
class WaitingMoments:
    mean: float
    variance: float


@dataclass(frozen=True)
class StabilityReport:
    ok: bool
    rho: np.ndarray = field(repr=False, compare=False)
    violations: list[tuple[int, float]]

    def __bool__(self):
        return self.ok


def arrival_rates(pi, lam) -> np.ndarray:
    """Per-node chunk arrival rates ``Lambda = lam @ pi``.

    ``lam`` may be a vector of rates or a sequence of FileClass.
    """
    pi = np.asarray(pi, dtype=float)
    lam = _rates(lam)
    if pi.ndim != 2 or pi.shape[0] != lam.shape[0]:
        raise ValueError(f"pi has shape {pi.shape}, expected ({lam.shape[0]}, m)")
    return lam @ pi


def _rates(files) -> np.ndarray:
    if len(files) and isinstance(files[0], FileClass):
        return np.array([f.lam for f in files])
    return np.asarray(files, dtype=float)


def stability_check(pi, files, nodes: Sequence[StorageNode],
                    rho_cap: float = DEFAULT_RHO_CAP) -> StabilityReport:
    """Check ``Lambda_j < rho_cap * mu_j`` at every node."""
    loads = arrival_rates(pi, files)
    mu = np.array([n.mu for n in nodes])
    if loads.shape != mu.shape:
        raise ValueError("pi column count does not match node count")
    rho = loads / mu
    bad = [(nodes[j].id, float(rho[j])) for j in np.flatnonzero(~(rho < rho_cap))]
    return StabilityReport(ok=not bad, rho=rho, violations=bad)


def _check_stable(node: StorageNode, rho: float):
    if not rho < 1:
        raise UnstableError(f"node {node.id} unstable: rho={rho:.6g}", [node.id], [rho])


def mg1_waiting_moments(node: StorageNode, load: float) -> WaitingMoments:
    """Mean and variance of the M/G/1 sojourn time at ``node`` under ``load``."""
    rho = load / node.mu
    _check_stable(node, rho)
    slack = 1.0 - rho
    mean = 1.0 / node.mu + load * node.gamma2 / (2 * slack)
    variance = (node.sigma2 + load * node.gamma3 / (3 * slack)
                + load**2 * node.gamma2**2 / (4 * slack**2))
    return WaitingMoments(mean, variance)


def batched_waiting_moments(node: StorageNode, total_load: float, x: int) -> WaitingMoments:
    """Moments of the time until the last of ``x`` co-submitted chunks leaves.

    ``total_load`` is the node's chunk arrival rate counting every chunk
    of every batch.
    """
    if x < 1:
        raise ValueError(f"batch size must be >= 1, got {x}")
    rho = total_load / node.mu
    _check_stable(node, rho)
    slack = 1.0 - rho
    mean = x / node.mu + total_load * node.gamma2 / (2 * slack)
    variance = (x * node.sigma2 + total_load * node.gamma3 / (3 * slack)
                + total_load**2 * node.gamma2**2 / (4 * slack**2))
    return WaitingMoments(mean, variance)


def batched_arrival_rates(pi_hat, lam) -> np.ndarray:
    """Total chunk rate per node for multi-chunk dispatch.

    ``pi_hat[i, j, x-1]`` is the probability that a file-``i`` request
    sends ``x`` chunk requests to node ``j``.
    """
    pi_hat = np.asarray(pi_hat, dtype=float)
    lam = _rates(lam)
    x = np.arange(1, pi_hat.shape[2] + 1)
    return np.einsum("i,ijx,x->j", lam, pi_hat, x)


@dataclass(frozen=True)
class ParallelMix:
    """Effective service statistics of a node serving ``k/d``-scaled chunks.

    ``nu`` is the mean scaled service time, ``gamma2``/``gamma3`` the
    mixture second and third raw moments.
    """

    arrival_rate: float
    nu: float
    gamma2: float
    gamma3: float

    @property
    def rho(self) -> float:
        return self.arrival_rate * self.nu


def parallel_read_service_mix(pi, files: Sequence[FileClass],
                              nodes: Sequence[StorageNode]) -> list[ParallelMix]:
    """Per-node mixture of scaled service times for ``d``-way parallel reads.

    A file-``i`` chunk request at node ``j`` takes ``(k_i/d_i) X_j``; the
    mixture weights are the shares ``lam_i pi[i, j] / Lambda_j``.  A node
    with no traffic gets the unscaled moments (they are multiplied by a
    zero load anyway).
    """
    if any(f.d is None for f in files):
        raise ValueError("parallel reads need d set on every file")
    pi = np.asarray(pi, dtype=float)
    lam = _rates(files)
    scale = np.array([f.k / f.d for f in files])
    flow = lam[:, None] * pi
    loads = flow.sum(axis=0)
    out = []
    for j, node in enumerate(nodes):
        if loads[j] > 0:
            w = flow[:, j] / loads[j]
            mix = ParallelMix(
                arrival_rate=float(loads[j]),
                nu=float(w @ scale) / node.mu,
                gamma2=float(w @ scale**2) * node.gamma2,
                gamma3=float(w @ scale**3) * node.gamma3,
            )
        else:
            mix = ParallelMix(0.0, 1.0 / node.mu, node.gamma2, node.gamma3)
        if not mix.rho < 1:
            raise UnstableError(f"node {node.id} unstable: rho={mix.rho:.6g}", [node.id], [mix.rho])
        out.append(mix)
    return out


def parallel_waiting_moments(node: StorageNode, mix: ParallelMix, k: int, d: int) -> WaitingMoments:
    """Sojourn moments of a file's ``k/d``-sized chunk at a mixed node."""
    rho = mix.rho
    _check_stable(node, rho)
    slack = 1.0 - rho
    s = k / d
    load = mix.arrival_rate
    mean = s / node.mu + load * mix.gamma2 / (2 * slack)
    variance = (s**2 * node.sigma2 + load * mix.gamma3 / (3 * slack)
                + load**2 * mix.gamma2**2 / (4 * slack**2))
    return WaitingMoments(mean, variance)


# ---------------------------------------------------------------------------
# Vectorized forms used by the optimizer


def pk_moments(loads, mu, sigma2, gamma2, gamma3):
    """Vectorized sojourn mean/variance and their derivatives in the load.

    Returns ``(mean, var, dmean, dvar)``; entries are ``inf`` where the
    node is unstable.
    """
    loads = np.asarray(loads, dtype=float)
    gap = mu - loads
    with np.errstate(divide="ignore", invalid="ignore"):
        unstable = ~(gap > 0)
        a = np.where(unstable, np.inf, mu / gap)  # 1/(1 - rho)
        mean = 1.0 / mu + loads * gamma2 * a / 2
        var = sigma2 + loads * gamma3 * a / 3 + (loads * gamma2 * a) ** 2 / 4
        da = np.where(unstable, np.inf, mu / gap**2)
        dmean = gamma2 * (a + loads * da) / 2
        dvar = gamma3 * (a + loads * da) / 3 + (gamma2**2 / 2) * loads * a * (a + loads * da)
    mean = np.where(unstable, np.inf, mean)
    var = np.where(unstable, np.inf, var)
    return mean, var, dmean, dvar
