"""Per-instance binding configuration, Q-Route / Res-Route masks and shape buckets.

Given committed placements, each instance learns which requests it runs MoE
dispatch/combine for (its ``M`` requests) and which requests it holds a KV
shard of (its ``N`` requests). Two binary masks follow from that:

* ``q_route`` (N x W): row per shard request, a single 1 at the column of the
  request's MoE binding, i.e. where the query comes from.
* ``res_route`` (M x W): row per MoE-bound request, a 1 at every instance of
  its KV binding, i.e. who returns partial results.
"""

from __future__ import annotations

import bisect
import csv
import itertools
from dataclasses import dataclass, field
from typing import Mapping, TextIO

import numpy as np

from .core import DcpError, Placement


class InconsistentPlacement(DcpError):
    pass


class ShapeOverflow(DcpError):
    pass


@dataclass
class BindingConfig:
    instance: int
    moe_bound_requests: list[int] = field(default_factory=list)
    shard_requests: list[int] = field(default_factory=list)
    # shard request -> its MoE binding (where the query comes from)
    shard_source: dict[int, int] = field(default_factory=dict)
    # MoE-bound request -> its KV binding (who sends partials back)
    shard_holders: dict[int, tuple[int, ...]] = field(default_factory=dict)
    shard_tokens: dict[int, int] = field(default_factory=dict)

    @property
    def M(self) -> int:
        return len(self.moe_bound_requests)

    @property
    def N(self) -> int:
        return len(self.shard_requests)


@dataclass
class RoutingTables:
    instance: int
    q_route: np.ndarray  # uint8, N x W
    res_route: np.ndarray  # uint8, M x W
    q_rows: list[int]
    res_rows: list[int]


def build_binding_config(placements: Mapping[int, Placement], world_size: int) -> list[BindingConfig]:
    configs = [BindingConfig(s) for s in range(world_size)]
    for rid in sorted(placements):
        p = placements[rid]
        if p.moe_binding not in p.kv_binding:
            raise InconsistentPlacement(f"request {rid}: moe_binding {p.moe_binding} not in {p.kv_binding}")
        cfg = configs[p.moe_binding]
        cfg.moe_bound_requests.append(rid)
        cfg.shard_holders[rid] = tuple(p.kv_binding)
        for s in p.kv_binding:
            c = configs[s]
            c.shard_requests.append(rid)
            c.shard_source[rid] = p.moe_binding
            c.shard_tokens[rid] = p.split.get(s, 0)
    return configs


def derive_routing_tables(configs: list[BindingConfig]) -> list[RoutingTables]:
    world = len(configs)
    out = []
    for cfg in configs:
        q = np.zeros((cfg.N, world), dtype=np.uint8)
        for i, rid in enumerate(cfg.shard_requests):
            q[i, cfg.shard_source[rid]] = 1
        res = np.zeros((cfg.M, world), dtype=np.uint8)
        for i, rid in enumerate(cfg.moe_bound_requests):
            res[i, list(cfg.shard_holders[rid])] = 1
        out.append(RoutingTables(cfg.instance, q, res, list(cfg.shard_requests), list(cfg.moe_bound_requests)))
    return out


def check_consistency(tables: list[RoutingTables], placements: Mapping[int, Placement]) -> None:
    """Raise AssertionError unless the cluster-wide table invariants hold."""
    q_index = [{rid: i for i, rid in enumerate(t.q_rows)} for t in tables]
    r_index = [{rid: i for i, rid in enumerate(t.res_rows)} for t in tables]
    for t in tables:
        if t.q_route.size and not (t.q_route.sum(axis=1) == 1).all():
            raise AssertionError(f"instance {t.instance}: q_route row sum != 1")
        for i, rid in enumerate(t.res_rows):
            if int(t.res_route[i].sum()) != len(placements[rid].kv_binding):
                raise AssertionError(f"instance {t.instance}: res_route row of {rid} has wrong sum")
    for rid, p in placements.items():
        m = p.moe_binding
        for s in p.kv_binding:
            if tables[s].q_route[q_index[s][rid], m] != 1:
                raise AssertionError(f"q_route[{s}] misses ({rid}, {m})")
            if tables[m].res_route[r_index[m][rid], s] != 1:
                raise AssertionError(f"res_route[{m}] misses ({rid}, {s})")


def route_counts(tables: list[RoutingTables]) -> dict[str, np.ndarray]:
    """Per-instance remote transfer counts read off the masks.

    Self-routes (diagonal entries) are local and excluded.
    """
    world = len(tables)
    q_send = np.zeros(world, dtype=np.int64)
    res_send = np.zeros(world, dtype=np.int64)
    partials_in = np.zeros(world, dtype=np.int64)
    for t in tables:
        s = t.instance
        if t.q_route.size:
            per_src = t.q_route.sum(axis=0).astype(np.int64)
            per_src[s] = 0
            q_send += per_src
            res_send[s] = int(t.q_route.sum()) - int(t.q_route[:, s].sum())
        if t.res_route.size:
            rows = t.res_route.sum(axis=1)
            partials_in[s] = int(rows[rows > 1].sum())
    return {"q_send": q_send, "res_send": res_send, "partials_in": partials_in}


def _bitstring(row: np.ndarray) -> str:
    return "".join("1" if v else "0" for v in row)


def tables_to_csv(tables: list[RoutingTables], fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["instance", "table", "row", "request_id", "columns"])
    for t in tables:
        for i, rid in enumerate(t.q_rows):
            w.writerow([t.instance, "q_route", i, rid, _bitstring(t.q_route[i])])
        for i, rid in enumerate(t.res_rows):
            w.writerow([t.instance, "res_route", i, rid, _bitstring(t.res_route[i])])


# ---------------------------------------------------------------------------
# Shape bucketing for pre-built static graphs


@dataclass(frozen=True)
class ShapeSpace:
    buckets: tuple[tuple[int, int], ...]
    m_max: int
    n_max: int
    world_size: int = 8
    heads: int = 128
    head_size: int = 576
    hidden: int = 7168
    max_blocks: int = 16384
    element_bytes: int = 2
    index_bytes: int = 4

    def __post_init__(self):
        b = tuple(sorted(tuple(x) for x in self.buckets))
        object.__setattr__(self, "buckets", b)
        if b and (self.m_max, self.n_max) not in b:
            raise ValueError("(m_max, n_max) must be one of the buckets")
        if any(m > self.m_max or n > self.n_max for m, n in b):
            raise ValueError("bucket exceeds (m_max, n_max)")


DEFAULT_M_BUCKETS = (8, 16, 32, 64, 128, 256)
DEFAULT_N_BUCKETS = (8, 16, 32, 64, 128, 256, 384, 512)


def default_shape_space(world_size: int = 8, **dims) -> ShapeSpace:
    buckets = tuple(itertools.product(DEFAULT_M_BUCKETS, DEFAULT_N_BUCKETS))
    return ShapeSpace(buckets, DEFAULT_M_BUCKETS[-1], DEFAULT_N_BUCKETS[-1], world_size, **dims)


def bucket_shape(m: int, n: int, space: ShapeSpace) -> tuple[int, int]:
    """Smallest bucket (lexicographic) that dominates (m, n) componentwise."""
    if m > space.m_max or n > space.n_max:
        raise ShapeOverflow(f"shape ({m}, {n}) exceeds ({space.m_max}, {space.n_max})")
    buckets = space.buckets
    for bm, bn in buckets[bisect.bisect_left(buckets, (m, -1)):]:
        if bn >= n:
            return bm, bn
    raise ShapeOverflow(f"no bucket covers ({m}, {n})")


def graph_memory_footprint(space: ShapeSpace) -> tuple[int, int]:
    """(graph count, bytes of the shared pool all captured graphs slice into)."""
    w, mm, nm = space.world_size, space.m_max, space.n_max
    hh = space.heads * space.head_size
    e = space.element_bytes
    payload = e * (w * mm * hh + w * nm * hh + w * nm * space.head_size + mm * space.hidden)
    tables = space.index_bytes * (mm * space.max_blocks + mm)
    return len(space.buckets), payload + tables
