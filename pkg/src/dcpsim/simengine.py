"""Lock-step decode simulation of a DP-EP cluster.

One decode layer is simulated per iteration and scaled by ``layers_per_iter``.
Per layer every instance runs, in order::

    QRoute -> Attn -> ResRoute -> Merge -> DS | DR -> MLP -> CS | CR

where ``|`` is a cluster-wide barrier (all dispatch sends finish before any
dispatch receive starts, likewise for combine). Attention additionally waits
for inbound queries and merging waits for inbound partial results, so a slow
instance stalls everyone that depends on it. The waits are the bubbles.
"""

from __future__ import annotations

import csv
import enum
import heapq
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence, TextIO

import numpy as np

from .core import ClusterState, ClusterTopology, Placement, Request, RequestState
from .scheduler import Policy, Scheduler, policy_label


class Phase(enum.IntEnum):
    QROUTE = 0
    ATTN = 1
    RESROUTE = 2
    MERGE = 3
    DS = 4
    DR = 5
    MLP = 6
    CS = 7
    CR = 8


PHASES = tuple(Phase)
MOE_COMM = (Phase.DS, Phase.DR, Phase.CS, Phase.CR)
CP_COMM = (Phase.QROUTE, Phase.RESROUTE, Phase.MERGE)


@dataclass(frozen=True)
class LatencyModel:
    """Linear per-layer cost model; times in microseconds.

    The shipped defaults are an order-of-magnitude calibration: attention is
    memory-bound in resident KV tokens plus a per-request-shard overhead,
    MoE all-to-all phases grow with the MoE-bound batch, and CP routing pays
    a fixed cost per transfer plus payload bandwidth.
    """

    attn_fixed: float = 15.0
    attn_per_shard: float = 0.3
    attn_per_ktok: float = 0.5
    ds_fixed: float = 5.0
    ds_per_req: float = 1.2
    dr_fixed: float = 5.0
    dr_per_req: float = 1.2
    cs_fixed: float = 5.0
    cs_per_req: float = 1.2
    cr_fixed: float = 5.0
    cr_per_req: float = 1.2
    route_fixed: float = 8.0
    route_per_kb: float = 0.002
    q_payload_kb: float = 144.0
    res_payload_kb: float = 144.0
    merge_per_partial: float = 0.2
    mlp_fixed: float = 20.0
    mlp_per_req: float = 0.3
    layers_per_iter: int = 61
    migration_delay_ms: float = 5.0
    iter_overhead_us: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")
        if self.layers_per_iter < 1:
            raise ValueError("layers_per_iter must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InstanceLoads:
    """Per-instance inputs to the latency model (arrays of length W)."""

    shards: np.ndarray  # R_i: resident request-shards attended
    tokens: np.ndarray  # T_i: local KV tokens
    batch: np.ndarray  # B_i: MoE-bound requests
    q_send: np.ndarray  # remote query transfers issued
    res_send: np.ndarray  # remote partial-result transfers issued
    partials_in: np.ndarray  # partials merged at this MoE binding
    edges: np.ndarray  # W x W, edges[m, s] > 0 iff m routes queries to s (m != s)

    @classmethod
    def zeros(cls, world: int) -> InstanceLoads:
        z = lambda: np.zeros(world, dtype=np.int64)  # noqa: E731
        return cls(z(), z(), z(), z(), z(), z(), np.zeros((world, world), dtype=np.int64))

    def copy(self) -> InstanceLoads:
        return InstanceLoads(*(getattr(self, f.name).copy() for f in fields(self)))

    def add(self, p: Placement, sign: int = 1) -> None:
        m = p.moe_binding
        self.batch[m] += sign
        k = len(p.kv_binding)
        for s in p.kv_binding:
            self.shards[s] += sign
            if s != m:
                self.q_send[m] += sign
                self.res_send[s] += sign
                self.edges[m, s] += sign
        if k > 1:
            self.partials_in[m] += sign * k

    @classmethod
    def from_placements(cls, placements: Mapping[int, Placement], cluster: ClusterState) -> InstanceLoads:
        loads = cls.zeros(cluster.world_size)
        for p in placements.values():
            loads.add(p)
        loads.tokens[:] = [cluster.instances[s].kv_load for s in range(cluster.world_size)]
        return loads


def phase_durations(model: LatencyModel, loads: InstanceLoads) -> np.ndarray:
    """Durations (W x 9, microseconds) of every phase on every instance."""
    B = loads.batch.astype(float)
    q_cost = model.route_fixed + model.route_per_kb * model.q_payload_kb
    r_cost = model.route_fixed + model.route_per_kb * model.res_payload_kb
    d = np.empty((len(B), len(PHASES)))
    d[:, Phase.QROUTE] = loads.q_send * q_cost
    d[:, Phase.ATTN] = model.attn_fixed + model.attn_per_shard * loads.shards + model.attn_per_ktok * loads.tokens / 1000.0
    d[:, Phase.RESROUTE] = loads.res_send * r_cost
    d[:, Phase.MERGE] = model.merge_per_partial * loads.partials_in
    d[:, Phase.DS] = model.ds_fixed + model.ds_per_req * B
    d[:, Phase.DR] = model.dr_fixed + model.dr_per_req * B
    d[:, Phase.MLP] = model.mlp_fixed + model.mlp_per_req * B
    d[:, Phase.CS] = model.cs_fixed + model.cs_per_req * B
    d[:, Phase.CR] = model.cr_fixed + model.cr_per_req * B
    return d


def eval_phase_latency(model: LatencyModel, phase: Phase, **load) -> float:
    """Latency of one phase on one instance.

    Keyword loads: ``shards`` and ``tokens`` (Attn), ``batch`` (MoE phases and
    MLP), ``messages`` (QRoute/ResRoute), ``partials`` (Merge).
    """
    phase = Phase(phase)
    if phase == Phase.ATTN:
        return model.attn_fixed + model.attn_per_shard * load.get("shards", 0) + model.attn_per_ktok * load.get("tokens", 0) / 1000.0
    if phase in (Phase.QROUTE, Phase.RESROUTE):
        kb = model.q_payload_kb if phase == Phase.QROUTE else model.res_payload_kb
        return load.get("messages", 0) * (model.route_fixed + model.route_per_kb * kb)
    if phase == Phase.MERGE:
        return model.merge_per_partial * load.get("partials", 0)
    b = load.get("batch", 0)
    coef = {
        Phase.DS: (model.ds_fixed, model.ds_per_req),
        Phase.DR: (model.dr_fixed, model.dr_per_req),
        Phase.CS: (model.cs_fixed, model.cs_per_req),
        Phase.CR: (model.cr_fixed, model.cr_per_req),
        Phase.MLP: (model.mlp_fixed, model.mlp_per_req),
    }[phase]
    return coef[0] + coef[1] * b


@dataclass
class IterationTimeline:
    start: np.ndarray  # W x 9, microseconds within one layer
    finish: np.ndarray
    durations: np.ndarray
    layers: int
    overhead_us: float = 0.0

    @property
    def layer_latency(self) -> float:
        return float(self.finish.max()) if self.finish.size else 0.0

    @property
    def iteration_latency(self) -> float:
        """Microseconds for one decode iteration across all layers."""
        return self.layers * self.layer_latency + self.overhead_us

    def waits(self) -> np.ndarray:
        """Idle gap before each phase (W x 9), per layer."""
        prev = np.zeros_like(self.start)
        prev[:, 1:] = self.finish[:, :-1]
        return self.start - prev

    def bubble(self) -> np.ndarray:
        """Per-instance idle time inside one layer, including the tail wait."""
        tail = self.layer_latency - self.finish[:, -1]
        return self.waits().sum(axis=1) + tail


def simulate_timeline(loads: InstanceLoads, model: LatencyModel) -> IterationTimeline:
    d = phase_durations(model, loads)
    W = d.shape[0]
    start = np.zeros_like(d)
    fin = np.zeros_like(d)
    edges = loads.edges > 0

    fin[:, Phase.QROUTE] = d[:, Phase.QROUTE]
    q_done = fin[:, Phase.QROUTE]
    # attention waits for its own sends and every inbound query
    inbound = np.where(edges, q_done[:, None], 0.0).max(axis=0) if W else q_done
    start[:, Phase.ATTN] = np.maximum(q_done, inbound)
    fin[:, Phase.ATTN] = start[:, Phase.ATTN] + d[:, Phase.ATTN]
    start[:, Phase.RESROUTE] = fin[:, Phase.ATTN]
    fin[:, Phase.RESROUTE] = start[:, Phase.RESROUTE] + d[:, Phase.RESROUTE]
    r_done = fin[:, Phase.RESROUTE]
    partial_in = np.where(edges, r_done[None, :], 0.0).max(axis=1) if W else r_done
    start[:, Phase.MERGE] = np.maximum(r_done, partial_in)
    fin[:, Phase.MERGE] = start[:, Phase.MERGE] + d[:, Phase.MERGE]
    start[:, Phase.DS] = fin[:, Phase.MERGE]
    fin[:, Phase.DS] = start[:, Phase.DS] + d[:, Phase.DS]
    start[:, Phase.DR] = fin[:, Phase.DS].max()
    fin[:, Phase.DR] = start[:, Phase.DR] + d[:, Phase.DR]
    start[:, Phase.MLP] = fin[:, Phase.DR]
    fin[:, Phase.MLP] = start[:, Phase.MLP] + d[:, Phase.MLP]
    start[:, Phase.CS] = fin[:, Phase.MLP]
    fin[:, Phase.CS] = start[:, Phase.CS] + d[:, Phase.CS]
    start[:, Phase.CR] = fin[:, Phase.CS].max()
    fin[:, Phase.CR] = start[:, Phase.CR] + d[:, Phase.CR]
    return IterationTimeline(start, fin, d, model.layers_per_iter, model.iter_overhead_us)


def simulate_iteration(
    placements: Mapping[int, Placement],
    routing_tables,
    cluster: ClusterState,
    model: LatencyModel,
) -> IterationTimeline:
    """Timeline of one decode iteration for the given committed placements.

    When ``routing_tables`` are given, transfer counts are read off the masks
    and must agree with the placements.
    """
    loads = InstanceLoads.from_placements(placements, cluster)
    if routing_tables is not None:
        from .routing import route_counts

        counts = route_counts(routing_tables)
        if not (np.array_equal(counts["q_send"], loads.q_send)
                and np.array_equal(counts["res_send"], loads.res_send)
                and np.array_equal(counts["partials_in"], loads.partials_in)):
            raise ValueError("routing tables disagree with placements")
    return simulate_timeline(loads, model)


def imbalance_metrics(samples: Sequence[float]) -> tuple[float, float]:
    """(imbalance %, reduction potential %) of per-instance samples.

    imbalance = (max - mean) / mean, reduction potential = (max - mean) / max.
    """
    a = np.asarray(samples, dtype=float)
    if a.size == 0:
        raise ValueError("imbalance_metrics needs at least one sample")
    mx, mean = float(a.max()), float(a.mean())
    imb = (mx - mean) / mean * 100.0 if mean > 0 else 0.0
    red = (mx - mean) / mx * 100.0 if mx > 0 else 0.0
    return imb, red


# ---------------------------------------------------------------------------
# Full runs


@dataclass(frozen=True)
class ClusterConfig:
    n_nodes: int = 2
    instances_per_node: int = 4
    page_size: int = 64
    capacity_tokens: int = 1_200_000
    n_sched_steps: int = 1
    reserve_decode: bool = True

    def __post_init__(self):
        for name in ("n_nodes", "instances_per_node", "page_size", "capacity_tokens", "n_sched_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.capacity_tokens < self.page_size:
            raise ValueError("capacity_tokens must hold at least one page")

    @property
    def capacity_pages(self) -> int:
        return self.capacity_tokens // self.page_size

    def build(self) -> ClusterState:
        topo = ClusterTopology.uniform(self.n_nodes, self.instances_per_node, self.page_size)
        return ClusterState(topo, self.capacity_pages)


@dataclass
class RequestRecord:
    id: int
    arrival_ms: float
    seq_len: int
    output_len: int
    admit_ms: float
    decode_start_ms: float
    finish_ms: float
    tpot_ms: float
    normalized_latency_ms: float
    cp_degree: int


@dataclass
class RunMetrics:
    policy: str = ""
    n_requests: int = 0
    n_finished: int = 0
    n_unschedulable: int = 0
    iterations: int = 0
    sim_time_ms: float = 0.0
    tokens_decoded: int = 0
    mean_tpot_ms: float = 0.0
    p50_tpot_ms: float = 0.0
    p99_tpot_ms: float = 0.0
    p99_normalized_ms: float = 0.0
    slo_ms: float = 50.0
    slo_attainment: float = 0.0
    attn_imbalance: float = 0.0
    attn_reduction_potential: float = 0.0
    moe_comm_imbalance: float = 0.0
    moe_comm_reduction_potential: float = 0.0
    kv_imbalance: float = 0.0
    batch_imbalance: float = 0.0
    hol_events: int = 0
    max_cp_fraction: float = 0.0
    mean_iteration_ms: float = 0.0
    mean_bubble_us: float = 0.0
    mean_active: float = 0.0
    cp_histogram: dict = field(default_factory=dict)
    slowest_breakdown_us: dict = field(default_factory=dict)
    requests: list = field(default_factory=list)

    SUMMARY_KEYS = (
        "policy", "n_requests", "n_finished", "n_unschedulable", "iterations", "sim_time_ms",
        "tokens_decoded", "mean_tpot_ms", "p50_tpot_ms", "p99_tpot_ms", "p99_normalized_ms",
        "slo_ms", "slo_attainment", "attn_imbalance", "attn_reduction_potential",
        "moe_comm_imbalance", "moe_comm_reduction_potential", "kv_imbalance", "batch_imbalance",
        "hol_events", "max_cp_fraction", "mean_iteration_ms", "mean_bubble_us", "mean_active",
    )

    def summary(self) -> dict:
        out = {k: getattr(self, k) for k in self.SUMMARY_KEYS}
        out["cp_histogram"] = dict(sorted(self.cp_histogram.items()))
        out["slowest_breakdown_us"] = dict(self.slowest_breakdown_us)
        return out


def fmt6(x) -> str:
    """Fixed 6-significant-digit rendering for reproducible CSVs."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.6g}"
    return str(x)


REQUEST_COLUMNS = ("id", "arrival", "admit", "finish", "tpot_ms", "cp_degree")


def write_requests_csv(metrics: RunMetrics, fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(REQUEST_COLUMNS)
    for r in metrics.requests:
        w.writerow([fmt6(r.id), fmt6(r.arrival_ms), fmt6(r.admit_ms), fmt6(r.finish_ms), fmt6(r.tpot_ms), fmt6(r.cp_degree)])


def write_summary(metrics: RunMetrics, fh: TextIO) -> None:
    for k, v in metrics.summary().items():
        if isinstance(v, dict):
            v = " ".join(f"{a}={fmt6(b)}" for a, b in v.items())
        else:
            v = fmt6(v)
        fh.write(f"{k}: {v}\n")


class _Accum:
    """Running (optionally weighted) mean."""

    def __init__(self):
        self.n = 0
        self.weight = 0.0
        self.total = 0.0

    def add(self, v: float, w: float = 1.0) -> None:
        self.n += 1
        self.weight += w
        self.total += w * v

    @property
    def mean(self) -> float:
        return self.total / self.weight if self.weight else 0.0


def _clone(requests: Sequence[Request]) -> list[Request]:
    return [Request(r.id, r.seq_len, r.arrival_time, r.output_len) for r in requests]


def run_simulation(
    trace: Sequence[Request],
    policy: Policy,
    cluster_config: ClusterConfig,
    model: LatencyModel,
    slo_ms: float = 50.0,
    horizon_ms: float | None = None,
    record_timeline: bool = False,
    warmup_frac: float = 0.1,
) -> RunMetrics:
    """Drive the trace through scheduling and lock-step decode.

    Requests still unfinished at ``horizon_ms`` count as SLO misses. The
    default horizon is the last arrival plus the time the longest request
    needs at exactly the SLO pace (``max output_len * slo_ms``) plus one
    migration delay: a system that keeps up with the offered load finishes
    everything by then, while a growing backlog shows up as misses.

    Per-iteration statistics (imbalance, CP fraction, breakdowns) are taken
    over the steady window: from ``warmup_frac`` of the last arrival time up
    to the last arrival. Ramp-up and drain, where only a handful of requests
    are resident, are excluded. Request-level metrics cover the whole run.
    """
    reqs = sorted(_clone(trace), key=lambda r: (r.arrival_time, r.id))
    cluster = cluster_config.build()
    sched = Scheduler(policy, reserve_decode=cluster_config.reserve_decode)
    W = cluster.world_size
    ps = cluster.page_size
    metrics = RunMetrics(policy=policy_label(policy), n_requests=len(reqs), slo_ms=slo_ms)
    if not reqs:
        return metrics
    if horizon_ms is None:
        horizon_ms = (reqs[-1].arrival_time + max(r.output_len for r in reqs) * slo_ms
                      + model.migration_delay_ms)
    steady = (warmup_frac * reqs[-1].arrival_time, reqs[-1].arrival_time)

    loads = InstanceLoads.zeros(W)
    single_counts = np.zeros(W, dtype=np.int64)  # committed single-instance requests per m
    multi: dict[int, Request] = {}  # committed requests spanning several instances
    in_loads: dict[int, Placement] = {}  # decoding requests, with the placement counted in loads
    decoding: dict[int, Request] = {}
    ready_heap: list[tuple[float, int]] = []
    by_id = {r.id: r for r in reqs}
    growth_inst: dict[int, int] = {}
    flushed: dict[int, int] = {}
    page_events: dict[int, list[int]] = defaultdict(list)
    finish_events: dict[int, list[int]] = defaultdict(list)
    growth_count = np.zeros(W, dtype=np.int64)
    waiting: list[Request] = []
    next_arrival = 0
    now = 0.0
    it = 0
    multi_decoding = 0
    cp_hist: dict[int, int] = defaultdict(int)

    attn_imb, attn_red = _Accum(), _Accum()
    moe_imb, moe_red = _Accum(), _Accum()
    kv_imb, b_imb = _Accum(), _Accum()
    iter_ms, bubble, active_acc = _Accum(), _Accum(), _Accum()
    max_cp_frac = 0.0
    slow_sum = np.zeros(len(PHASES))
    timeline_log = [] if record_timeline else None
    finished_count = 0

    def snapshot(p: Placement) -> Placement:
        return Placement(p.kv_binding, p.moe_binding, p.split)

    def flush_growth(rid: int) -> None:
        r = by_id[rid]
        n = r.generated - flushed[rid]
        if n > 0:
            cluster.page_table.extend(rid, growth_inst[rid], n, cluster, update_load=False)
            flushed[rid] = r.generated

    while True:
        # arrivals up to now enter the global queue
        while next_arrival < len(reqs) and reqs[next_arrival].arrival_time <= now:
            waiting.append(reqs[next_arrival])
            next_arrival += 1
        # migrated requests start decoding
        while ready_heap and ready_heap[0][0] <= now:
            _, rid = heapq.heappop(ready_heap)
            r = by_id[rid]
            snap = snapshot(r.placement)
            in_loads[rid] = snap
            loads.add(snap)
            decoding[rid] = r
            g = r.placement.growth_instance()
            growth_inst[rid] = g
            growth_count[g] += 1
            flushed[rid] = 0
            held = r.placement.split[g]
            first = (-held) % ps + 1  # generation index that opens a new page
            if first <= r.output_len:
                page_events[it + first - 1].append(rid)
            finish_events[it + r.output_len - 1].append(rid)
            if len(r.placement.kv_binding) > 1:
                multi_decoding += 1
            cp_hist[len(r.placement.kv_binding)] += 1

        if (waiting and (it % cluster_config.n_sched_steps == 0 or not decoding)):
            before = {rid: r.placement.moe_binding for rid, r in multi.items()}
            res = sched.step(waiting, list(multi.values()), cluster, single_counts=single_counts)
            for rid, old in before.items():
                p = multi[rid].placement
                if rid in in_loads and p.moe_binding != old:
                    loads.add(in_loads[rid], -1)
                    in_loads[rid] = snapshot(p)
                    loads.add(in_loads[rid])
            for r, p in res.committed:
                r.admit_time = now
                r.decode_start = now + model.migration_delay_ms
                if len(p.kv_binding) == 1:
                    single_counts[p.moe_binding] += 1
                else:
                    multi[r.id] = r
                heapq.heappush(ready_heap, (r.decode_start, r.id))
            for r in res.unschedulable:
                r.state = RequestState.FINISHED
                metrics.n_unschedulable += 1
            if res.hol_event:
                metrics.hol_events += 1
            waiting = res.deferred

        if not decoding:
            upcoming = []
            if next_arrival < len(reqs):
                upcoming.append(reqs[next_arrival].arrival_time)
            if ready_heap:
                upcoming.append(ready_heap[0][0])
            if not upcoming:
                break
            nxt = min(upcoming)
            if nxt > horizon_ms:
                break
            now = max(now, nxt)
            continue
        if now > horizon_ms:
            break

        # one lock-step decode iteration
        loads.tokens[:] = [cluster.instances[s].kv_load for s in range(W)]
        tl = simulate_timeline(loads, model)
        dt_us = tl.iteration_latency
        d = tl.durations
        active_mask = loads.batch > 0
        in_window = steady[0] <= now <= steady[1]
        if in_window and active_mask.any():
            a = d[:, Phase.ATTN]
            i1, r1 = imbalance_metrics(a)
            attn_imb.add(i1)
            attn_red.add(r1)
            mc = d[:, list(MOE_COMM)].sum(axis=1)
            i2, r2 = imbalance_metrics(mc)
            moe_imb.add(i2)
            moe_red.add(r2)
            kv_imb.add(imbalance_metrics(loads.tokens)[0] if loads.tokens.sum() else 0.0)
            b_imb.add(imbalance_metrics(loads.batch)[0])
            busy = d.sum(axis=1)
            slow_sum += d[int(np.argmax(busy))]
            bubble.add(float(tl.bubble().mean()) * tl.layers)
        n_dec = len(decoding)
        if in_window:
            iter_ms.add(dt_us / 1000.0)
            active_acc.add(n_dec)
            max_cp_frac = max(max_cp_frac, multi_decoding / n_dec)
        if timeline_log is not None:
            timeline_log.append(tl)

        now += dt_us / 1000.0
        # every decoding request emits one token
        for s in range(W):
            if growth_count[s]:
                cluster.instances[s].kv_load += int(growth_count[s])
        for rid in decoding:
            by_id[rid].generated += 1
        metrics.tokens_decoded += n_dec
        for rid in page_events.pop(it, ()):
            flush_growth(rid)
            r = by_id[rid]
            nxt = r.generated + ps
            if nxt <= r.output_len:
                page_events[it + ps].append(rid)
        for rid in finish_events.pop(it, ()):
            r = by_id[rid]
            flush_growth(rid)
            cluster.page_table.free(rid, cluster)
            p = in_loads.pop(rid)
            loads.add(p, -1)
            del decoding[rid]
            g = growth_inst.pop(rid)
            growth_count[g] -= 1
            if len(r.placement.kv_binding) > 1:
                multi_decoding -= 1
                del multi[rid]
            else:
                single_counts[r.placement.moe_binding] -= 1
            r.state = RequestState.FINISHED
            r.finish_time = now
            finished_count += 1
        it += 1

    metrics.iterations = it
    metrics.sim_time_ms = now
    metrics.n_finished = finished_count
    metrics.attn_imbalance = attn_imb.mean
    metrics.attn_reduction_potential = attn_red.mean
    metrics.moe_comm_imbalance = moe_imb.mean
    metrics.moe_comm_reduction_potential = moe_red.mean
    metrics.kv_imbalance = kv_imb.mean
    metrics.batch_imbalance = b_imb.mean
    metrics.max_cp_fraction = max_cp_frac
    metrics.mean_iteration_ms = iter_ms.mean
    metrics.mean_bubble_us = bubble.mean
    metrics.mean_active = active_acc.mean
    metrics.cp_histogram = dict(cp_hist)
    if attn_imb.n:
        metrics.slowest_breakdown_us = {p.name: float(v) for p, v in zip(PHASES, slow_sum / attn_imb.n)}
    _finalize_requests(metrics, reqs, slo_ms)
    if timeline_log is not None:
        metrics.timelines = timeline_log
    return metrics


def _finalize_requests(metrics: RunMetrics, reqs: Sequence[Request], slo_ms: float) -> None:
    tpots, norms = [], []
    met = 0
    counted = 0
    for r in reqs:
        if r.finish_time is not None:
            tpot = (r.finish_time - r.decode_start) / r.output_len
            norm = (r.finish_time - r.arrival_time) / r.output_len
        else:
            tpot = norm = math.inf
        cp = r.placement.cp_degree if r.placement else 0
        metrics.requests.append(RequestRecord(
            r.id, r.arrival_time, r.seq_len, r.output_len,
            r.admit_time if r.admit_time is not None else math.inf,
            r.decode_start if r.decode_start is not None else math.inf,
            r.finish_time if r.finish_time is not None else math.inf,
            tpot, norm, cp,
        ))
        counted += 1
        tpots.append(tpot)
        norms.append(norm)
        if tpot <= slo_ms:
            met += 1
    if counted:
        t = np.array(tpots)
        fin = t[np.isfinite(t)]
        metrics.mean_tpot_ms = float(fin.mean()) if fin.size else math.inf
        metrics.p50_tpot_ms = float(np.percentile(t, 50, method="higher"))
        metrics.p99_tpot_ms = float(np.percentile(t, 99, method="higher"))
        metrics.p99_normalized_ms = float(np.percentile(np.array(norms), 99, method="higher"))
        metrics.slo_attainment = met / counted


@dataclass
class SweepResult:
    max_rate: float | None
    rates: list[float]
    attainment: list[float]
    p99_tpot_ms: list[float]
    metrics: list[RunMetrics] = field(default_factory=list, repr=False)


def _sweep_point(args):
    trace_config, rate, policy, cluster_config, model, slo_ms = args
    from .workload import gen_trace

    return run_simulation(gen_trace(trace_config.with_rate(rate)), policy, cluster_config, model, slo_ms)


def slo_sweep(
    trace_config,
    policy: Policy,
    cluster_config: ClusterConfig,
    model: LatencyModel,
    slo_ms: float,
    rate_grid: Sequence[float],
    target: float = 0.99,
    stop_at_first_failure: bool = True,
    workers: int = 1,
) -> SweepResult:
    """Largest grid rate whose run meets ``target`` SLO attainment.

    The sweep stops at the first failing rate; ``max_rate`` is None when even
    the first rate fails. With ``workers > 1`` all grid points run in a
    process pool and the same truncation is applied afterwards, so the result
    does not depend on the worker count.
    """
    rates = list(rate_grid)
    if any(b <= a for a, b in zip(rates, rates[1:])):
        raise ValueError("rate_grid must be strictly ascending")
    jobs = [(trace_config, r, policy, cluster_config, model, slo_ms) for r in rates]
    if workers > 1 and len(rates) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = iter(list(ex.map(_sweep_point, jobs)))
    else:
        results = map(_sweep_point, jobs)
    out = SweepResult(None, [], [], [])
    for rate, m in zip(rates, results):
        out.rates.append(rate)
        out.attainment.append(m.slo_attainment)
        out.p99_tpot_ms.append(m.p99_tpot_ms)
        out.metrics.append(m)
        if m.slo_attainment >= target:
            out.max_rate = rate
        elif stop_at_first_failure:
            break
    return out


# ---------------------------------------------------------------------------
# Offline CP-degree calibration


def cp_attention_latency(model: LatencyModel, seq_len: int, degree: int) -> float:
    """Per-layer critical path of one request's attention at a given CP degree.

    The MoE binding issues ``degree - 1`` query transfers back to back, every
    holder attends its ``seq_len / degree`` slice, the partials return in
    parallel and are merged. Background load is common to all degrees and
    therefore left out.
    """
    if degree < 1:
        raise ValueError("degree must be >= 1")
    q_cost = model.route_fixed + model.route_per_kb * model.q_payload_kb
    r_cost = model.route_fixed + model.route_per_kb * model.res_payload_kb
    attn = model.attn_per_shard * degree + model.attn_per_ktok * (seq_len / degree) / 1000.0
    if degree == 1:
        return attn
    return (degree - 1) * q_cost + attn + r_cost + model.merge_per_partial * degree


def calibrate_bucket(
    model: LatencyModel,
    degrees: Sequence[int] = (1, 2, 4, 8),
    max_len: int = 1_048_576,
    step: int = 4096,
):
    """Sweep (length, degree) and tabulate the latency-minimizing degree.

    Lengths are probed on a ``step`` grid; each table row covers lengths up
    to and including its probe. Ties go to the smaller degree.
    """
    from .scheduler import BucketFn

    degrees = sorted(set(int(d) for d in degrees))
    if not degrees or degrees[0] < 1:
        raise ValueError("degrees must be positive")
    best = []
    for ell in range(step, max_len + 1, step):
        lat = [cp_attention_latency(model, ell, d) for d in degrees]
        best.append((ell, degrees[int(np.argmin(lat))]))
    rows: list[tuple[int | None, int]] = []
    for (ell, d), nxt in zip(best, best[1:] + [(None, None)]):
        if nxt[1] != d:
            rows.append((ell, d))
    # the largest degree reached is open-ended
    rows[-1] = (None, rows[-1][1])
    # keep the table monotone even if a custom model is not
    out: list[tuple[int | None, int]] = []
    for ell, d in rows:
        if out and d <= out[-1][1]:
            out[-1] = (ell, out[-1][1])
        else:
            out.append((ell, d))
    return BucketFn(tuple(out))
