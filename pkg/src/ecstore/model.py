"""Domain types for erasure-coded storage scenarios.

A scenario is a set of heterogeneous storage nodes (service-time moments
plus a per-chunk storage price) and a set of file classes (MDS data-chunk
count ``k`` and Poisson request rate ``lambda``).  Everything downstream
(queueing formulas, bounds, the optimizer, the simulator) consumes the
frozen value types defined here.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from typing import Any, Mapping, Sequence

import numpy as np

MOMENT_RTOL = 1e-9


class ScenarioError(ValueError):
    """Raised when a scenario document or value violates an invariant."""


@dataclass(frozen=True)
class ServiceMoments:
    """First three raw moments of a chunk service time (seconds)."""

    mean: float
    variance: float
    m2: float
    m3: float

    def __post_init__(self):
        if not self.mean > 0:
            raise ScenarioError(f"service mean must be positive, got {self.mean}")
        if self.variance < 0:
            raise ScenarioError(f"service variance must be >= 0, got {self.variance}")
        expected_m2 = self.mean**2 + self.variance
        if not math.isclose(self.m2, expected_m2, rel_tol=MOMENT_RTOL):
            raise ScenarioError(
                f"second moment {self.m2} inconsistent with mean^2 + variance = {expected_m2}"
            )
        # E[X^3] >= E[X^2] E[X] for nonnegative X
        if self.m3 < self.m2 * self.mean * (1 - MOMENT_RTOL):
            raise ScenarioError(
                f"third moment {self.m3} below E[X^2]E[X] = {self.m2 * self.mean}"
            )

    @classmethod
    def from_mean_variance(cls, mean: float, variance: float, m3: float) -> ServiceMoments:
        return cls(mean=mean, variance=variance, m2=mean**2 + variance, m3=m3)


# ---------------------------------------------------------------------------
# Service-time distribution families


@dataclass(frozen=True)
class Exponential:
    rate: float
    family = "exponential"

    def __post_init__(self):
        if not self.rate > 0:
            raise ScenarioError(f"exponential rate must be positive, got {self.rate}")

    def raw_moment(self, n: int) -> float:
        return math.factorial(n) / self.rate**n

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.exponential(1.0 / self.rate, size)


@dataclass(frozen=True)
class Deterministic:
    t: float
    family = "deterministic"

    def __post_init__(self):
        if not self.t > 0:
            raise ScenarioError(f"deterministic service time must be positive, got {self.t}")

    def raw_moment(self, n: int) -> float:
        return self.t**n

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.full(size, float(self.t))


@dataclass(frozen=True)
class ShiftedExponential:
    shift: float
    rate: float
    family = "shifted_exponential"

    def __post_init__(self):
        if self.shift < 0:
            raise ScenarioError(f"shift must be >= 0, got {self.shift}")
        if not self.rate > 0:
            raise ScenarioError(f"rate must be positive, got {self.rate}")

    def raw_moment(self, n: int) -> float:
        # E[(s + E)^n] = sum_i C(n, i) s^(n-i) E[E^i], E[E^i] = i!/rate^i
        return sum(
            math.comb(n, i) * self.shift ** (n - i) * math.factorial(i) / self.rate**i
            for i in range(n + 1)
        )

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.shift + rng.exponential(1.0 / self.rate, size)


@dataclass(frozen=True)
class LogNormal:
    log_mean: float
    log_sd: float
    family = "lognormal"

    def __post_init__(self):
        if self.log_sd < 0:
            raise ScenarioError(f"log_sd must be >= 0, got {self.log_sd}")

    @classmethod
    def from_mean_sd(cls, mean: float, sd: float) -> LogNormal:
        s2 = math.log1p((sd / mean) ** 2)
        return cls(log_mean=math.log(mean) - s2 / 2, log_sd=math.sqrt(s2))

    def raw_moment(self, n: int) -> float:
        return math.exp(n * self.log_mean + n * n * self.log_sd**2 / 2)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.lognormal(self.log_mean, self.log_sd, size)


@dataclass(frozen=True)
class Empirical:
    samples: tuple[float, ...]
    family = "empirical"

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(float(s) for s in self.samples))
        if len(self.samples) < 1 or min(self.samples) <= 0:
            raise ScenarioError("empirical distribution needs positive samples")

    def raw_moment(self, n: int) -> float:
        return float(np.mean(np.asarray(self.samples) ** n))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.choice(np.asarray(self.samples), size)


ServiceDist = Exponential | Deterministic | ShiftedExponential | LogNormal | Empirical

_FAMILIES: dict[str, type] = {
    cls.family: cls for cls in (Exponential, Deterministic, ShiftedExponential, LogNormal, Empirical)
}


def dist_from_dict(spec: Mapping[str, Any]) -> ServiceDist:
    """Build a distribution from ``{"dist": family, **params}``."""
    spec = dict(spec)
    family = spec.pop("dist", None)
    cls = _FAMILIES.get(family)
    if cls is None:
        raise ScenarioError(f"unsupported service distribution {family!r}")
    names = {f.name for f in fields(cls)}
    if set(spec) != names:
        raise ScenarioError(
            f"{family} expects parameters {sorted(names)}, got {sorted(spec)}"
        )
    try:
        return cls(**spec)
    except TypeError as exc:
        raise ScenarioError(str(exc)) from None


def dist_to_dict(dist: ServiceDist) -> dict[str, Any]:
    out = {"dist": dist.family, **asdict(dist)}
    if isinstance(dist, Empirical):
        out["samples"] = list(dist.samples)
    return out


def moments_from_distribution(dist: ServiceDist) -> ServiceMoments:
    """Exact analytic moments of a supported service-time family."""
    if not isinstance(dist, tuple(_FAMILIES.values())):
        raise ScenarioError(f"unsupported distribution {dist!r}")
    if isinstance(dist, Empirical):
        return moments_from_samples(dist.samples, min_samples=1)
    mean = dist.raw_moment(1)
    m2 = dist.raw_moment(2)
    return ServiceMoments(mean=mean, variance=max(m2 - mean**2, 0.0), m2=m2, m3=dist.raw_moment(3))


def moments_from_samples(samples: Sequence[float], min_samples: int = 2) -> ServiceMoments:
    """Raw sample moments, variance with 1/n normalization."""
    x = np.asarray(samples, dtype=float)
    if x.ndim != 1 or x.size < min_samples:
        raise ScenarioError(f"need at least {min_samples} samples, got {x.size}")
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise ScenarioError("service-time samples must be finite and positive")
    mean = float(x.mean())
    variance = float(x.var())
    return ServiceMoments(mean=mean, variance=variance, m2=mean**2 + variance, m3=float(np.mean(x**3)))


# ---------------------------------------------------------------------------
# Nodes, files, scenario


@dataclass(frozen=True)
class StorageNode:
    """A storage node: M/G/1 server with a per-chunk storage price.

    ``gamma2`` and ``gamma3`` are the second and third raw moments of the
    chunk service time.  ``service_dist`` is optional; nodes without one
    can be analyzed but not simulated.
    """

    id: int
    mu: float
    sigma2: float
    gamma2: float
    gamma3: float
    cost: float = 0.0
    service_dist: ServiceDist | None = None

    def __post_init__(self):
        if not self.mu > 0:
            raise ScenarioError(f"node {self.id}: service rate must be positive")
        if self.sigma2 < 0:
            raise ScenarioError(f"node {self.id}: negative service variance")
        if not math.isclose(self.gamma2, self.mu**-2 + self.sigma2, rel_tol=MOMENT_RTOL):
            raise ScenarioError(f"node {self.id}: gamma2 != 1/mu^2 + sigma2")
        if self.gamma3 < self.gamma2 / self.mu * (1 - MOMENT_RTOL):
            raise ScenarioError(f"node {self.id}: third moment below E[X^2]E[X]")
        if self.cost < 0:
            raise ScenarioError(f"node {self.id}: negative storage cost")

    @classmethod
    def from_moments(cls, id: int, moments: ServiceMoments, cost: float = 0.0,
                     service_dist: ServiceDist | None = None) -> StorageNode:
        return cls(id=id, mu=1.0 / moments.mean, sigma2=moments.variance,
                   gamma2=moments.m2, gamma3=moments.m3, cost=cost, service_dist=service_dist)

    @classmethod
    def from_dist(cls, id: int, dist: ServiceDist, cost: float = 0.0) -> StorageNode:
        return cls.from_moments(id, moments_from_distribution(dist), cost, dist)

    @property
    def moments(self) -> ServiceMoments:
        mean = 1.0 / self.mu
        return ServiceMoments(mean=mean, variance=self.sigma2, m2=self.gamma2, m3=self.gamma3)


@dataclass(frozen=True)
class FileClass:
    id: int
    k: int
    lam: float
    d: int | None = None
    size_mb: float | None = None

    def __post_init__(self):
        if not (isinstance(self.k, (int, np.integer)) and self.k >= 1):
            raise ScenarioError(f"file {self.id}: k must be a positive integer")
        if not self.lam > 0:
            raise ScenarioError(f"file {self.id}: arrival rate must be positive")
        if self.d is not None and self.d < self.k:
            raise ScenarioError(f"file {self.id}: d={self.d} below k={self.k}")

    @property
    def fanout(self) -> int:
        """Number of chunk requests dispatched per file request."""
        return self.k if self.d is None else self.d


@dataclass(frozen=True)
class JlcmParams:
    """Parameters of the latency-plus-cost optimizer."""

    theta: float = 1.0
    beta: float = 1000.0
    epsilon: float = 0.01
    max_outer_iters: int = 500
    max_inner_iters: int = 200
    rho_cap: float = 0.999
    pi_zero_tol: float = 1e-6

    def __post_init__(self):
        if self.theta < 0:
            raise ScenarioError("theta must be >= 0")
        if not self.beta > 1:
            raise ScenarioError("beta must exceed 1")
        if not self.epsilon > 0:
            raise ScenarioError("epsilon must be positive")
        if not 0 < self.rho_cap < 1:
            raise ScenarioError("rho_cap must lie in (0, 1)")
        if self.max_outer_iters < 1 or self.max_inner_iters < 1:
            raise ScenarioError("iteration caps must be >= 1")


@dataclass(frozen=True)
class SimOptions:
    horizon_sec: float = 1e5
    warmup_sec: float = 1e3
    replications: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.horizon_sec > self.warmup_sec >= 0:
            raise ScenarioError("need horizon_sec > warmup_sec >= 0")
        if self.replications < 1:
            raise ScenarioError("replications must be >= 1")


@dataclass(frozen=True)
class Scenario:
    nodes: tuple[StorageNode, ...]
    files: tuple[FileClass, ...]
    optimizer: JlcmParams = field(default_factory=JlcmParams)
    simulator: SimOptions = field(default_factory=SimOptions)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "files", tuple(self.files))
        if not self.nodes:
            raise ScenarioError("scenario has no nodes")
        if not self.files:
            raise ScenarioError("scenario has no files")
        for kind, items in (("node", self.nodes), ("file", self.files)):
            ids = [x.id for x in items]
            if len(set(ids)) != len(ids):
                raise ScenarioError(f"duplicate {kind} ids")
        m = len(self.nodes)
        for f in self.files:
            if f.k > m:
                raise ScenarioError(f"file {f.id}: k exceeds node count ({f.k} > {m})")
            if f.d is not None and f.d > m:
                raise ScenarioError(f"file {f.id}: d exceeds node count ({f.d} > {m})")

    @property
    def m(self) -> int:
        return len(self.nodes)

    @property
    def r(self) -> int:
        return len(self.files)

    @cached_property
    def mu(self) -> np.ndarray:
        return np.array([n.mu for n in self.nodes])

    @cached_property
    def sigma2(self) -> np.ndarray:
        return np.array([n.sigma2 for n in self.nodes])

    @cached_property
    def gamma2(self) -> np.ndarray:
        return np.array([n.gamma2 for n in self.nodes])

    @cached_property
    def gamma3(self) -> np.ndarray:
        return np.array([n.gamma3 for n in self.nodes])

    @cached_property
    def cost(self) -> np.ndarray:
        return np.array([n.cost for n in self.nodes])

    @cached_property
    def lam(self) -> np.ndarray:
        return np.array([f.lam for f in self.files])

    @cached_property
    def k(self) -> np.ndarray:
        return np.array([f.k for f in self.files])

    @cached_property
    def fanout(self) -> np.ndarray:
        return np.array([f.fanout for f in self.files])

    @property
    def total_rate(self) -> float:
        return float(self.lam.sum())

    def with_options(self, **changes) -> Scenario:
        """Copy with optimizer options replaced, e.g. ``with_options(theta=2)``."""
        from dataclasses import replace

        return replace(self, optimizer=replace(self.optimizer, **changes))

    def to_dict(self) -> dict[str, Any]:
        nodes = []
        for n in self.nodes:
            if n.service_dist is not None:
                service = dist_to_dict(n.service_dist)
            else:
                service = {"moments": {"mean": 1.0 / n.mu, "variance": n.sigma2, "m3": n.gamma3}}
            nodes.append({"id": n.id, "cost": n.cost, "service": service})
        files = []
        for f in self.files:
            entry: dict[str, Any] = {"id": f.id, "k": int(f.k), "lambda": f.lam}
            if f.d is not None:
                entry["d"] = int(f.d)
            if f.size_mb is not None:
                entry["size_mb"] = f.size_mb
            files.append(entry)
        return {
            "nodes": nodes,
            "files": files,
            "optimizer": asdict(self.optimizer),
            "simulator": asdict(self.simulator),
        }


# ---------------------------------------------------------------------------
# Config ingestion


def _require(entry: Mapping[str, Any], key: str, what: str):
    if key not in entry:
        raise ScenarioError(f"{what}: missing field {key!r}")
    return entry[key]


def _parse_node(entry: Mapping[str, Any], index: int) -> StorageNode:
    what = f"node #{index}"
    node_id = _require(entry, "id", what)
    what = f"node {node_id}"
    cost = float(entry.get("cost", 0.0))
    service = _require(entry, "service", what)
    try:
        if "moments" in service:
            mom = service["moments"]
            moments = ServiceMoments.from_mean_variance(
                float(_require(mom, "mean", what)),
                float(_require(mom, "variance", what)),
                float(_require(mom, "m3", what)),
            )
            return StorageNode.from_moments(node_id, moments, cost)
        return StorageNode.from_dist(node_id, dist_from_dict(service), cost)
    except ScenarioError as exc:
        if str(exc).startswith("node "):
            raise
        raise ScenarioError(f"{what}: {exc}") from None


def _parse_file(entry: Mapping[str, Any], index: int) -> FileClass:
    file_id = _require(entry, "id", f"file #{index}")
    what = f"file {file_id}"
    k = _require(entry, "k", what)
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)):
        raise ScenarioError(f"{what}: k must be an integer")
    d = entry.get("d")
    return FileClass(
        id=file_id,
        k=int(k),
        lam=float(_require(entry, "lambda", what)),
        d=None if d is None else int(d),
        size_mb=entry.get("size_mb"),
    )


_OPT_KEYS = {"theta", "beta", "epsilon", "max_outer_iters", "max_inner_iters", "rho_cap", "pi_zero_tol"}
_SIM_KEYS = {"horizon_sec", "warmup_sec", "replications", "seed"}


def validate_scenario(raw: Mapping[str, Any] | Scenario) -> Scenario:
    """Parse and check a scenario document (or re-check a Scenario)."""
    if isinstance(raw, Scenario):
        raw = raw.to_dict()
    if not isinstance(raw, Mapping):
        raise ScenarioError("scenario document must be a mapping")
    nodes = [_parse_node(e, i) for i, e in enumerate(_require(raw, "nodes", "scenario"))]
    files = [_parse_file(e, i) for i, e in enumerate(_require(raw, "files", "scenario"))]

    opt = dict(raw.get("optimizer") or {})
    sim = dict(raw.get("simulator") or {})
    unknown = (set(opt) - _OPT_KEYS) | (set(sim) - _SIM_KEYS)
    if unknown:
        raise ScenarioError(f"unknown option(s): {sorted(unknown)}")
    scenario = Scenario(nodes=nodes, files=files, optimizer=JlcmParams(**opt), simulator=SimOptions(**sim))
    if not scenario.total_rate > 0:
        raise ScenarioError("aggregate arrival rate must be positive")
    return scenario
