"""Discrete-event simulation of chunk dispatch to FIFO storage nodes.

Two policies are simulated:

* probabilistic: each file request samples a node subset from its
  :class:`~ecstore.scheduling.SubsetDistribution` and enqueues one chunk
  request at each chosen node; nodes serve their local queues FIFO.
* central queue: batches wait in one shared FIFO; a freed node takes the
  earliest batch that still needs a chunk, stores a chunk of that file,
  and has not yet served that batch.

A request completes when its last chunk finishes.  Statistics cover
requests arriving after the warmup and completing before the horizon.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bound import file_bounds
from .model import Scenario, SimOptions
from .scheduling import SubsetDistribution, decompose_matrix, sample_subsets

# event kinds, in tie-breaking order
DEPARTURE = 0
ARRIVAL = 1

ARRIVAL_STREAM, DISPATCH_STREAM, SERVICE_STREAM = 0, 1, 2
_BLOCK = 4096
N_BATCHES = 20


class SimulationError(ValueError):
    """The scenario or policy cannot be simulated."""


@dataclass(frozen=True)
class SimConfig:
    horizon: float
    warmup: float = 0.0
    replications: int = 1
    seed: int = 0
    policy: str = "probabilistic"
    dists: tuple[SubsetDistribution, ...] | None = None
    keep_latencies: bool = False
    audit: bool = False

    def __post_init__(self):
        if not self.horizon > self.warmup >= 0:
            raise SimulationError("need horizon > warmup >= 0")
        if self.replications < 1:
            raise SimulationError("replications must be >= 1")
        if self.policy not in ("probabilistic", "central_queue"):
            raise SimulationError(f"unknown policy {self.policy!r}")
        if self.dists is not None:
            object.__setattr__(self, "dists", tuple(self.dists))

    @classmethod
    def from_options(cls, options: SimOptions, **kw) -> SimConfig:
        return cls(horizon=options.horizon_sec, warmup=options.warmup_sec,
                   replications=options.replications, seed=options.seed, **kw)

    @classmethod
    def for_placement(cls, pi, scenario: Scenario, **kw) -> SimConfig:
        """Config whose dispatch distributions decompose the rows of ``pi``."""
        dists = decompose_matrix(pi, scenario.fanout)
        if "horizon" not in kw:
            o = scenario.simulator
            kw = {"horizon": o.horizon_sec, "warmup": o.warmup_sec,
                  "replications": o.replications, "seed": o.seed, **kw}
        return cls(dists=tuple(dists), **kw)


@dataclass(frozen=True)
class FileStats:
    id: int
    completed: int
    mean: float
    se: float
    p50: float
    p95: float


@dataclass(frozen=True)
class NodeStats:
    id: int
    utilization: float
    utilization_se: float
    arrival_rate: float
    arrival_rate_se: float
    mean_sojourn: float
    served: int


@dataclass
class SimReport:
    policy: str
    files: list[FileStats]
    nodes: list[NodeStats]
    served: np.ndarray
    replications: int
    latencies: list[tuple[int, float, float]] | None = field(default=None, repr=False)

    @property
    def completed(self) -> int:
        return sum(f.completed for f in self.files)

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "replications": self.replications,
            "completed": self.completed,
            "files": [vars(f) for f in self.files],
            "nodes": [vars(n) for n in self.nodes],
            "served": self.served.tolist(),
        }


def _stream(seed: int, replication: int, role: int, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(replication, role, index))
    return np.random.Generator(np.random.Philox(ss))


class _ServiceSource:
    """Block-buffered i.i.d. service draws for one node."""

    def __init__(self, dist, rng: np.random.Generator):
        self.dist, self.rng = dist, rng
        self.buf = np.empty(0)
        self.pos = 0

    def next(self) -> float:
        if self.pos >= self.buf.size:
            self.buf = self.dist.sample(self.rng, _BLOCK)
            self.pos = 0
        x = self.buf[self.pos]
        self.pos += 1
        return float(x)


def _check_inputs(scenario: Scenario, config: SimConfig):
    missing = [n.id for n in scenario.nodes if n.service_dist is None]
    if missing:
        raise SimulationError(f"node(s) {missing} have no generative service distribution")
    if config.dists is None or len(config.dists) != scenario.r:
        raise SimulationError("need one subset distribution per file")
    for f, dist in zip(scenario.files, config.dists):
        if dist.k != f.fanout:
            raise SimulationError(f"file {f.id}: subsets of size {dist.k}, expected {f.fanout}")
        if max(max(s) for s in dist.subsets) >= scenario.m:
            raise SimulationError(f"file {f.id}: subset refers to unknown node")


class _Window:
    """Accumulates per-batch counters over equal slices of [warmup, horizon)."""

    def __init__(self, warmup: float, horizon: float, m: int):
        self.t0, self.t1 = warmup, horizon
        self.width = (horizon - warmup) / N_BATCHES
        self.busy = np.zeros((N_BATCHES, m))
        self.arrivals = np.zeros((N_BATCHES, m))

    def slot(self, t: float) -> int:
        return min(int((t - self.t0) / self.width), N_BATCHES - 1)

    def add_busy(self, j: int, start: float, end: float):
        start, end = max(start, self.t0), min(end, self.t1)
        while start < end:
            b = self.slot(start)
            edge = min(end, self.t0 + (b + 1) * self.width)
            if edge <= start:  # rounding at a slot edge
                edge = end
            self.busy[b, j] += edge - start
            start = edge

    def add_arrival(self, j: int, t: float):
        if self.t0 <= t < self.t1:
            self.arrivals[self.slot(t), j] += 1


class _Run:
    """State of one replication."""

    def __init__(self, scenario: Scenario, config: SimConfig, rep: int):
        self.sc, self.cfg = scenario, config
        m = scenario.m
        self.window = _Window(config.warmup, config.horizon, m)
        self.services = [_ServiceSource(n.service_dist, _stream(config.seed, rep, SERVICE_STREAM, j))
                         for j, n in enumerate(scenario.nodes)]
        self.scale = np.array([f.k / f.fanout for f in scenario.files])
        self.heap: list = []
        self.seq = 0
        self.busy = [False] * m
        self.served = np.zeros((scenario.r, m), dtype=np.int64)
        self.sojourn_sum = np.zeros(m)
        self.sojourn_n = np.zeros(m, dtype=np.int64)
        # completed requests: (file, arrival, latency)
        self.done: list[tuple[int, float, float]] = []
        self._arrivals(rep)

    def _arrivals(self, rep: int):
        times, files, subsets = [], [], []
        for i, f in enumerate(self.sc.files):
            rng = _stream(self.cfg.seed, rep, ARRIVAL_STREAM, i)
            expected = f.lam * self.cfg.horizon
            n = int(expected + 6 * math.sqrt(expected) + 16)
            t = np.cumsum(rng.exponential(1.0 / f.lam, n))
            while t[-1] < self.cfg.horizon:
                t = np.concatenate([t, t[-1] + np.cumsum(rng.exponential(1.0 / f.lam, n))])
            t = t[t < self.cfg.horizon]
            times.append(t)
            files.append(np.full(t.size, i))
            u = _stream(self.cfg.seed, rep, DISPATCH_STREAM, i).random(t.size)
            subsets.extend(sample_subsets(self.cfg.dists[i], u).tolist())
        times = np.concatenate(times)
        files = np.concatenate(files)
        order = np.lexsort((files, times))
        self.arr_time = times[order]
        self.arr_file = files[order]
        self.arr_subset = [subsets[o] for o in order]
        self.req_left = np.zeros(self.arr_time.size, dtype=np.int64)

    def _start(self, j: int, req: int, t: float):
        """Begin serving request ``req``'s chunk at node ``j`` at time ``t``."""
        i = self.arr_file[req]
        x = self.services[j].next() * self.scale[i]
        self.busy[j] = True
        self.window.add_busy(j, t, t + x)
        heapq.heappush(self.heap, (t + x, DEPARTURE, j, self.seq, req))
        self.seq += 1

    def _finish_chunk(self, j: int, req: int, t: float):
        i = self.arr_file[req]
        self.served[i, j] += 1
        a = self.arr_time[req]
        if a >= self.cfg.warmup:
            self.sojourn_sum[j] += t - a
            self.sojourn_n[j] += 1
        self.req_left[req] -= 1
        if self.req_left[req] == 0 and a >= self.cfg.warmup:
            self.done.append((int(i), float(a), float(t - a)))

    def run(self):
        n_arr = self.arr_time.size
        nxt = 0
        horizon = self.cfg.horizon
        heap = self.heap
        while True:
            t_arr = self.arr_time[nxt] if nxt < n_arr else math.inf
            if heap and heap[0][0] <= t_arr:
                t, _, j, _, req = heapq.heappop(heap)
                if t >= horizon:
                    break
                self.on_departure(j, req, t)
            else:
                if t_arr >= horizon:
                    break
                self.on_arrival(nxt, t_arr)
                nxt += 1
        return self


class _ProbabilisticRun(_Run):
    def __init__(self, *args):
        super().__init__(*args)
        self.queues = [deque() for _ in range(self.sc.m)]

    def on_arrival(self, req: int, t: float):
        subset = self.arr_subset[req]
        self.req_left[req] = len(subset)
        for j in subset:
            self.window.add_arrival(j, t)
            if self.busy[j]:
                self.queues[j].append(req)
            else:
                if self.cfg.audit:
                    assert not self.queues[j], "idle node with a nonempty queue"
                self._start(j, req, t)

    def on_departure(self, j: int, req: int, t: float):
        self._finish_chunk(j, req, t)
        if self.queues[j]:
            self._start(j, self.queues[j].popleft(), t)
        else:
            self.busy[j] = False


class _CentralRun(_Run):
    def __init__(self, *args):
        super().__init__(*args)
        self.hosts = []
        for dist in self.cfg.dists:
            support = sorted({j for s in dist.subsets for j in s})
            self.hosts.append(support)
        self.host_sets = [set(h) for h in self.hosts]
        self.pending: list[int] = []  # requests with unassigned chunks, FIFO
        self.unassigned = np.zeros(self.arr_time.size, dtype=np.int64)
        self.used: dict[int, set[int]] = {}
        mu = self.sc.mu
        # idle nodes offered work fastest first
        self.node_rank = {j: (-mu[j], j) for j in range(self.sc.m)}

    def on_arrival(self, req: int, t: float):
        i = self.arr_file[req]
        need = self.sc.files[i].fanout
        self.req_left[req] = need
        self.unassigned[req] = need
        self.used[req] = set()
        for j in sorted(self.hosts[i], key=self.node_rank.__getitem__):
            if self.unassigned[req] == 0:
                break
            if not self.busy[j]:
                self._assign(j, req, t)
        if self.unassigned[req] > 0:
            self.pending.append(req)

    def _assign(self, j: int, req: int, t: float):
        self.unassigned[req] -= 1
        self.used[req].add(j)
        # counted at request arrival so node rates match probabilistic dispatch
        self.window.add_arrival(j, self.arr_time[req])
        self._start(j, req, t)

    def on_departure(self, j: int, req: int, t: float):
        self._finish_chunk(j, req, t)
        if self.req_left[req] == 0:
            del self.used[req]
        for pos, cand in enumerate(self.pending):
            if j in self.host_sets[self.arr_file[cand]] and j not in self.used[cand]:
                self._assign(j, cand, t)
                if self.unassigned[cand] == 0:
                    del self.pending[pos]
                return
        self.busy[j] = False


def _batch_se(values: np.ndarray) -> float:
    values = values[np.isfinite(values)]
    if values.size < 2:
        return math.inf
    return float(values.std(ddof=1) / math.sqrt(values.size))


def _report(scenario: Scenario, config: SimConfig, runs: Sequence[_Run]) -> SimReport:
    width = (config.horizon - config.warmup) / N_BATCHES
    file_stats = []
    all_done = [np.array(run.done, dtype=float).reshape(-1, 3) for run in runs]
    for i, f in enumerate(scenario.files):
        lat, batch_means = [], []
        for run, done in zip(runs, all_done):
            sel = done[done[:, 0] == i]
            lat.append(sel[:, 2])
            slots = np.minimum(((sel[:, 1] - config.warmup) / width).astype(int), N_BATCHES - 1)
            sums = np.bincount(slots, sel[:, 2], N_BATCHES)
            counts = np.bincount(slots, minlength=N_BATCHES)
            batch_means.append(sums[counts > 0] / counts[counts > 0])
        lat = np.concatenate(lat)
        if lat.size:
            file_stats.append(FileStats(f.id, int(lat.size), float(lat.mean()),
                                        _batch_se(np.concatenate(batch_means)),
                                        float(np.percentile(lat, 50)), float(np.percentile(lat, 95))))
        else:
            file_stats.append(FileStats(f.id, 0, math.nan, math.inf, math.nan, math.nan))

    busy = np.concatenate([run.window.busy for run in runs]) / width
    rates = np.concatenate([run.window.arrivals for run in runs]) / width
    served = sum(run.served for run in runs)
    soj_sum = sum(run.sojourn_sum for run in runs)
    soj_n = sum(run.sojourn_n for run in runs)
    node_stats = []
    for j, n in enumerate(scenario.nodes):
        node_stats.append(NodeStats(
            id=n.id,
            utilization=float(busy[:, j].mean()),
            utilization_se=_batch_se(busy[:, j]),
            arrival_rate=float(rates[:, j].mean()),
            arrival_rate_se=_batch_se(rates[:, j]),
            mean_sojourn=float(soj_sum[j] / soj_n[j]) if soj_n[j] else math.nan,
            served=int(served[:, j].sum()),
        ))
    latencies = None
    if config.keep_latencies:
        latencies = [(scenario.files[int(i)].id, a, x) for done in all_done for i, a, x in done]
    return SimReport(config.policy, file_stats, node_stats, served, config.replications, latencies)


def _simulate(scenario: Scenario, config: SimConfig, run_cls) -> SimReport:
    _check_inputs(scenario, config)
    runs = [run_cls(scenario, config, rep).run() for rep in range(config.replications)]
    return _report(scenario, config, runs)


def simulate(scenario: Scenario, config: SimConfig) -> SimReport:
    """Simulate the configured policy (probabilistic by default)."""
    if config.policy == "central_queue":
        return _simulate(scenario, config, _CentralRun)
    return _simulate(scenario, config, _ProbabilisticRun)


def simulate_central_queue(scenario: Scenario, config: SimConfig) -> SimReport:
    from dataclasses import replace

    return _simulate(scenario, replace(config, policy="central_queue"), _CentralRun)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundCheck:
    file_id: int
    sim_mean: float
    se: float
    bound: float

    @property
    def slack(self) -> float:
        return self.bound - self.sim_mean

    @property
    def violated(self) -> bool:
        return self.sim_mean - 3 * self.se > self.bound


@dataclass
class BoundComparison:
    rows: list[BoundCheck]
    report: SimReport

    @property
    def violations(self) -> list[BoundCheck]:
        return [r for r in self.rows if r.violated]

    def to_dict(self) -> dict:
        return {
            "rows": [dict(vars(r), slack=r.slack, violated=r.violated) for r in self.rows],
            "violations": len(self.violations),
        }


def compare_bound_vs_sim(scenario: Scenario, pi, config: SimConfig) -> BoundComparison:
    """Simulate ``pi`` under probabilistic dispatch and set each file's mean against its bound."""
    from dataclasses import replace

    pi = np.asarray(pi, dtype=float)
    if config.dists is None:
        config = replace(config, dists=tuple(decompose_matrix(pi, scenario.fanout)))
    report = simulate(scenario, replace(config, policy="probabilistic"))
    bounds = file_bounds(pi, scenario)
    rows = [BoundCheck(fs.id, fs.mean, fs.se, b.bound) for fs, b in zip(report.files, bounds)]
    return BoundComparison(rows, report)
