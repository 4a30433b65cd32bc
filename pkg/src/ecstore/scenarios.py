"""Ready-made scenarios: a 12-node, three-site testbed replica and random instances."""

from __future__ import annotations

import numpy as np

from .model import (
    Exponential,
    FileClass,
    JlcmParams,
    LogNormal,
    Scenario,
    ShiftedExponential,
    SimOptions,
    StorageNode,
)

# Measured chunk service time on the testbed: mean 13.9 s, sd 4.3 s.
TESTBED_MEAN = 13.9
TESTBED_SD = 4.3
SITE_SLOWDOWN = {"NJ": 1.0, "TX": 1.05, "CA": 1.1}
SITE_PRICE = {"NJ": 1.0, "TX": 0.9, "CA": 1.1}
QUARTER_K = (6, 7, 6, 4)
AGGREGATE_RATE = 0.118


def testbed_nodes(cost_per_chunk: float = 1e-3) -> list[StorageNode]:
    nodes = []
    for site_index, site in enumerate(SITE_SLOWDOWN):
        f = SITE_SLOWDOWN[site]
        dist = LogNormal.from_mean_sd(TESTBED_MEAN * f, TESTBED_SD * f)
        for n in range(4):
            nodes.append(StorageNode.from_dist(4 * site_index + n + 1, dist,
                                               cost=cost_per_chunk * SITE_PRICE[site]))
    return nodes


def testbed_rates(r: int = 1000, aggregate: float = AGGREGATE_RATE) -> np.ndarray:
    """Three interleaved rate groups (i mod 3) with the given aggregate.

    Groups 1 and 2 use 1.25/9000 and 1.25/10000 requests/s; the third
    group's rate is solved so the total equals ``aggregate`` (scaled
    proportionally when ``r`` is small).
    """
    groups = np.arange(r) % 3
    rates = np.where(groups == 0, 1.25 / 9000, 1.25 / 10000).astype(float)
    n3 = int(np.sum(groups == 2))
    target = aggregate * r / 1000
    rest = target - rates[groups != 2].sum()
    if n3 and rest > 0:
        rates[groups == 2] = rest / n3
    else:
        rates *= target / rates.sum()
    return rates


def testbed_scenario(r: int = 1000, theta: float = 200.0, cost_per_chunk: float = 1e-3,
                     aggregate: float = AGGREGATE_RATE, **optimizer) -> Scenario:
    """Replica of the three-site, 12-node deployment with ``r`` files in four quarters."""
    rates = testbed_rates(r, aggregate)
    files = [FileClass(id=i + 1, k=QUARTER_K[min(4 * i // r, 3)], lam=float(rates[i]), size_mb=150.0)
             for i in range(r)]
    params = JlcmParams(theta=theta, **optimizer)
    return Scenario(testbed_nodes(cost_per_chunk), files, params,
                    SimOptions(horizon_sec=2e6, warmup_sec=2e4, replications=1, seed=2014))


def random_scenario(rng: np.random.Generator, m: int = 6, r: int = 4, *, k_max: int | None = None,
                    load: float = 0.5, family: str = "exponential", theta: float = 1.0,
                    **optimizer) -> Scenario:
    """Random heterogeneous instance with aggregate utilization ``load``.

    ``family`` is ``exponential``, ``shifted_exponential`` or ``mixed``.
    """
    k_max = min(m, k_max or max(1, m // 2))
    nodes = []
    for j in range(m):
        mean = rng.uniform(0.5, 2.0)
        fam = family if family != "mixed" else ("exponential", "shifted_exponential")[j % 2]
        if fam == "exponential":
            dist = Exponential(1.0 / mean)
        elif fam == "shifted_exponential":
            shift = rng.uniform(0.2, 0.8) * mean
            dist = ShiftedExponential(shift, 1.0 / (mean - shift))
        else:
            raise ValueError(f"unknown family {family!r}")
        nodes.append(StorageNode.from_dist(j + 1, dist, cost=float(rng.uniform(0.5, 2.0))))
    ks = rng.integers(1, k_max + 1, size=r)
    weights = rng.uniform(0.5, 2.0, size=r)
    capacity = sum(n.mu for n in nodes)
    scale = load * capacity / float(weights @ ks)
    files = [FileClass(id=i + 1, k=int(ks[i]), lam=float(weights[i] * scale)) for i in range(r)]
    return Scenario(nodes, files, JlcmParams(theta=theta, **optimizer))
