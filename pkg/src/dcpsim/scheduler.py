"""Dual-balanced DCP scheduling and the request-level / uniform-CP baselines.

Every policy turns a FIFO waiting queue into committed placements, one
scheduling round at a time. All argmin ties break toward the lowest id.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, Union

from .core import ClusterState, Placement, Request, RequestState, pages_for


@dataclass(frozen=True)
class BucketFn:
    """Length-to-CP-degree lookup.

    ``thresholds`` holds ``(max_len, degree)`` pairs with strictly increasing
    lengths; the last entry's ``max_len`` is ``None`` (open-ended).
    """

    thresholds: tuple[tuple[int | None, int], ...]

    def __post_init__(self):
        th = tuple((None if m is None else int(m), int(d)) for m, d in self.thresholds)
        object.__setattr__(self, "thresholds", th)
        if not th or th[-1][0] is not None:
            raise ValueError("last bucket must be open-ended (max_len None)")
        lens = [m for m, _ in th[:-1]]
        if any(b <= a for a, b in zip(lens, lens[1:])):
            raise ValueError("bucket lengths must be strictly increasing")
        degs = [d for _, d in th]
        if any(d < 1 for d in degs) or any(b < a for a, b in zip(degs, degs[1:])):
            raise ValueError("degrees must be >= 1 and non-decreasing")
        object.__setattr__(self, "_lens", lens)

    def __call__(self, seq_len: int) -> int:
        i = bisect.bisect_left(self._lens, seq_len)
        return self.thresholds[i][1]

    def to_list(self) -> list[list]:
        return [[m, d] for m, d in self.thresholds]

    @classmethod
    def from_list(cls, rows: Iterable[Sequence]) -> BucketFn:
        return cls(tuple((r[0], r[1]) for r in rows))


# Output of calibrate_bucket() on the default LatencyModel; regenerate with
# ``dcpsim --mode calibrate-bucket`` after changing the coefficients.
DEFAULT_BUCKET = BucketFn(((65_536, 1), (139_264, 2), (561_152, 4), (None, 8)))


@dataclass(frozen=True)
class DualBalancedDCP:
    bucket: BucketFn = DEFAULT_BUCKET
    hol_strict: bool = True
    name = "dcp"


@dataclass(frozen=True)
class LeastBatch:
    hol_strict: bool = True
    name = "least_batch"


@dataclass(frozen=True)
class LeastCache:
    hol_strict: bool = True
    name = "least_cache"


@dataclass(frozen=True)
class UniformCP:
    degree: int = 2
    hol_strict: bool = True
    name = "uniform_cp"

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("degree must be >= 1")


Policy = Union[DualBalancedDCP, LeastBatch, LeastCache, UniformCP]


def policy_label(policy: Policy) -> str:
    if isinstance(policy, UniformCP):
        return f"uniform_cp{policy.degree}"
    return policy.name


# ---------------------------------------------------------------------------
# Algorithm building blocks


def rebalance_active(
    active: Sequence[Request],
    cluster: ClusterState,
    single_counts: Sequence[int] | None = None,
) -> dict[int, int]:
    """Reassign each active request's MoE binding within its KV binding.

    Requests with fewer KV-binding instances have fewer choices and go first.
    Returns the new per-instance MoE-bound counts; no KV moves.

    Single-instance requests have no choice and sort first, so a caller that
    tracks them may pass their per-instance counts as ``single_counts`` and
    list only the multi-instance requests in ``active``.
    """
    batch = {s: 0 for s in cluster.instances}
    if single_counts is not None:
        for s in batch:
            batch[s] = int(single_counts[s])
    for r in sorted(active, key=lambda r: (len(r.placement.kv_binding), r.id)):
        p = r.placement
        m = min(p.kv_binding, key=lambda s: (batch[s], s))
        p.moe_binding = m
        batch[m] += 1
    for s, b in batch.items():
        cluster.instances[s].moe_batch = b
    return batch


def cp_degree(seq_len: int, bucket_fn: BucketFn, node_instance_count: int) -> int:
    return min(bucket_fn(seq_len), node_instance_count)


def water_fill(participants: Sequence[int], seq_len: int, kv_loads: Mapping[int, int]) -> dict[int, int]:
    """Integer split of ``seq_len`` tokens minimizing the peak post-allocation load.

    Raises the lowest-loaded instances to a common level first. Leftover
    single tokens go to eligible participants in their given order.
    """
    if not participants:
        raise ValueError("water_fill needs at least one participant")
    loads = [int(kv_loads[s]) for s in participants]
    order = sorted(range(len(loads)), key=lambda i: loads[i])
    # smallest level t with sum(max(0, t - K_i)) >= seq_len
    level, prefix = None, 0
    for j, i in enumerate(order):
        prefix += loads[i]
        nxt = loads[order[j + 1]] if j + 1 < len(order) else None
        cnt = j + 1
        # capacity up to level nxt using the cnt lowest instances
        t = -(-(seq_len + prefix) // cnt)
        if nxt is None or t <= nxt:
            level = t
            break
    split = {s: max(0, level - 1 - k) for s, k in zip(participants, loads)}
    left = seq_len - sum(split.values())
    for s, k in zip(participants, loads):
        if left == 0:
            break
        if k <= level - 1:
            split[s] += 1
            left -= 1
    return split


def frame_demand(placement: Placement, page_size: int, output_len: int = 0) -> dict[int, int]:
    """Frames each instance must supply, including decode-growth reservation."""
    need = {s: pages_for(placement.split[s], page_size) for s in placement.kv_binding}
    if output_len:
        g = placement.growth_instance()
        held = placement.split[g]
        need[g] += pages_for(held + output_len, page_size) - pages_for(held, page_size)
    return need


def can_allocate(
    participants: Sequence[int],
    split: Mapping[int, int],
    cluster: ClusterState,
    extra: Mapping[int, int] | None = None,
) -> bool:
    """True iff every participant has enough unreserved free frames; pure."""
    ps = cluster.page_size
    for s in participants:
        need = pages_for(split[s], ps) + (extra.get(s, 0) if extra else 0)
        if need > cluster.instances[s].available_frames:
            return False
    return True


# ---------------------------------------------------------------------------
# Scheduling rounds


@dataclass
class ScheduleResult:
    committed: list[tuple[Request, Placement]] = field(default_factory=list)
    deferred: list[Request] = field(default_factory=list)
    unschedulable: list[Request] = field(default_factory=list)
    # queue head blocked although aggregate free memory would hold it
    hol_event: bool = False
    head_demand: int = 0


class Scheduler:
    """Stateful wrapper around a policy (UniformCP keeps a round-robin cursor)."""

    def __init__(self, policy: Policy, reserve_decode: bool = True):
        self.policy = policy
        self.reserve_decode = reserve_decode
        self._rr: dict[tuple[int, ...], int] = {}

    # -- placement candidates -------------------------------------------------

    def _growth(self, r: Request) -> int:
        return r.output_len if self.reserve_decode else 0

    def _fits(self, p: Placement, r: Request, cluster: ClusterState) -> bool:
        extra = None
        if self.reserve_decode:
            full = frame_demand(p, cluster.page_size, r.output_len)
            base = frame_demand(p, cluster.page_size)
            extra = {s: full[s] - base[s] for s in full}
        return can_allocate(p.kv_binding, p.split, cluster, extra)

    def _candidate(self, r: Request, cluster: ClusterState) -> Placement | None:
        pol = self.policy
        topo = cluster.topology
        inst = cluster.instances
        if isinstance(pol, DualBalancedDCP):
            node = min(topo.nodes, key=lambda n: (cluster.node_batch(n), n))
            members = topo.instances_per_node[node]
            k = cp_degree(r.seq_len, pol.bucket, len(members))
            m = min(members, key=lambda s: (inst[s].moe_batch, s))
            others = sorted((s for s in members if s != m), key=lambda s: (inst[s].kv_load, s))
            binding = [m] + others[: k - 1]
            split = water_fill(binding, r.seq_len, {s: inst[s].kv_load for s in binding})
            binding = [s for s in binding if s == m or split[s] > 0]
            return Placement(tuple(binding), m, {s: split[s] for s in binding})
        if isinstance(pol, LeastBatch):
            s = min(inst, key=lambda s: (inst[s].moe_batch, s))
            return Placement((s,), s, {s: r.seq_len})
        if isinstance(pol, LeastCache):
            s = min(inst, key=lambda s: (inst[s].kv_load, s))
            return Placement((s,), s, {s: r.seq_len})
        if isinstance(pol, UniformCP):
            groups = uniform_groups(cluster, pol.degree)
            g = min(groups, key=lambda g: (sum(inst[s].moe_batch for s in g), g))
            return self._uniform_placement(r, g, commit=False)
        raise TypeError(f"unknown policy {pol!r}")

    def _uniform_placement(self, r: Request, group: tuple[int, ...], commit: bool) -> Placement:
        d = len(group)
        base, rem = divmod(r.seq_len, d)
        split = {s: base + (1 if i < rem else 0) for i, s in enumerate(group)}
        cursor = self._rr.get(group, 0)
        if commit:
            self._rr[group] = cursor + 1
        return Placement(group, group[cursor % d], split)

    def _ever_fits(self, r: Request, cluster: ClusterState) -> bool:
        """Whether the request could be placed on an otherwise empty cluster."""
        ps = cluster.page_size
        caps = {s: i.capacity_pages for s, i in cluster.instances.items()}
        growth = pages_for(self._growth(r), ps) + 1 if self._growth(r) else 0
        pol = self.policy
        if isinstance(pol, (LeastBatch, LeastCache)):
            return pages_for(r.seq_len, ps) + growth <= max(caps.values())
        if isinstance(pol, UniformCP):
            per = pages_for(-(-r.seq_len // pol.degree), ps)
            return any(all(per + growth <= caps[s] for s in g) for g in uniform_groups(cluster, pol.degree))
        topo = cluster.topology
        for n in topo.nodes:
            members = sorted((caps[s] for s in topo.instances_per_node[n]), reverse=True)
            k = cp_degree(r.seq_len, pol.bucket, len(members))
            per = pages_for(-(-r.seq_len // k), ps)
            if all(per + growth <= c for c in members[:k]):
                return True
        return False

    # -- one round ------------------------------------------------------------

    def refresh_batches(
        self, active: Sequence[Request], cluster: ClusterState, single_counts: Sequence[int] | None = None
    ) -> None:
        if isinstance(self.policy, DualBalancedDCP):
            rebalance_active(active, cluster, single_counts)
            return
        for s, i in cluster.instances.items():
            i.moe_batch = 0 if single_counts is None else int(single_counts[s])
        for r in active:
            cluster.instances[r.placement.moe_binding].moe_batch += 1

    def step(
        self,
        waiting: Sequence[Request],
        active: Sequence[Request],
        cluster: ClusterState,
        single_counts: Sequence[int] | None = None,
    ) -> ScheduleResult:
        """One FIFO round. See :func:`rebalance_active` for ``single_counts``."""
        self.refresh_batches(active, cluster, single_counts)
        res = ScheduleResult()
        blocked = False
        for r in waiting:
            if blocked:
                res.deferred.append(r)
                continue
            if not self._ever_fits(r, cluster):
                res.unschedulable.append(r)
                continue
            p = self._candidate(r, cluster)
            if self._fits(p, r, cluster):
                self._commit(r, p, cluster)
                res.committed.append((r, p))
                continue
            res.deferred.append(r)
            if len(res.deferred) == 1:
                demand = sum(frame_demand(p, cluster.page_size, self._growth(r)).values())
                res.head_demand = demand
                res.hol_event = cluster.total_available_frames() >= demand
            if self.policy.hol_strict:
                blocked = True
        return res

    def _commit(self, r: Request, p: Placement, cluster: ClusterState) -> None:
        if isinstance(self.policy, UniformCP):
            p = self._uniform_placement(r, p.kv_binding, commit=True)
        p.validate(r.seq_len)
        cluster.page_table.allocate(r, p, cluster)
        if self.reserve_decode:
            g = p.growth_instance()
            held = p.split[g]
            cluster.reserve(r.id, g, pages_for(held + r.output_len, cluster.page_size) - pages_for(held, cluster.page_size))
        cluster.instances[p.moe_binding].moe_batch += 1
        r.placement = p
        r.state = RequestState.ACTIVE


def uniform_groups(cluster: ClusterState, degree: int) -> list[tuple[int, ...]]:
    groups = []
    for n in cluster.topology.nodes:
        members = cluster.topology.instances_per_node[n]
        if len(members) % degree:
            raise ValueError(f"UniformCP degree {degree} does not divide node size {len(members)}")
        groups.extend(tuple(members[i:i + degree]) for i in range(0, len(members), degree))
    return groups


def schedule_step(
    waiting: Sequence[Request],
    active: Sequence[Request],
    cluster: ClusterState,
    policy: Policy,
    reserve_decode: bool = False,
) -> ScheduleResult:
    """Run one scheduling round with a fresh :class:`Scheduler`."""
    return Scheduler(policy, reserve_decode=reserve_decode).step(waiting, active, cluster)
