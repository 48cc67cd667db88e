"""Domain types and the global KV page table.

A cluster is a set of nodes, each owning an ordered list of DP instances.
Every instance has a fixed pool of KV frames (``capacity_pages`` frames of
``page_size`` tokens). Requests hold a :class:`Placement` that decouples the
instance running their MoE dispatch/combine (``moe_binding``) from the set of
instances holding their KV shards (``kv_binding``).
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping, TextIO


class DcpError(Exception):
    """Base class for library errors."""


class InsufficientFrames(DcpError):
    pass


class UnknownRequest(DcpError, KeyError):
    pass


class UnknownPage(DcpError, KeyError):
    pass


class RequestState(enum.Enum):
    WAITING = "waiting"
    ACTIVE = "active"
    FINISHED = "finished"


def pages_for(tokens: int, page_size: int) -> int:
    return -(-tokens // page_size) if tokens > 0 else 0


@dataclass
class Placement:
    kv_binding: tuple[int, ...]
    moe_binding: int
    split: dict[int, int]

    def __post_init__(self):
        self.kv_binding = tuple(self.kv_binding)

    @property
    def cp_degree(self) -> int:
        return len(self.kv_binding)

    @property
    def seq_len(self) -> int:
        return sum(self.split.values())

    def growth_instance(self) -> int:
        """Instance holding the request's last logical page.

        Decode-generated tokens are appended there so each shard stays a
        contiguous token range.
        """
        last = self.kv_binding[-1]
        for s in self.kv_binding:
            if self.split.get(s, 0) > 0:
                last = s
        return last

    def validate(self, seq_len: int | None = None) -> None:
        if self.moe_binding not in self.kv_binding:
            raise ValueError(f"moe_binding {self.moe_binding} not in kv_binding {self.kv_binding}")
        if len(set(self.kv_binding)) != len(self.kv_binding):
            raise ValueError("kv_binding has duplicates")
        if set(self.split) != set(self.kv_binding):
            raise ValueError("split keys must equal kv_binding")
        if any(v < 0 for v in self.split.values()):
            raise ValueError("negative split")
        if seq_len is not None and self.seq_len != seq_len:
            raise ValueError(f"split sums to {self.seq_len}, expected {seq_len}")


@dataclass
class Request:
    id: int
    seq_len: int
    arrival_time: float  # ms
    output_len: int
    generated: int = 0
    state: RequestState = RequestState.WAITING
    placement: Placement | None = None
    # lifecycle timestamps (ms), filled in by the simulator
    admit_time: float | None = None
    decode_start: float | None = None
    finish_time: float | None = None

    def __post_init__(self):
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if self.output_len < 1:
            raise ValueError("output_len must be >= 1")

    @property
    def cp_degree(self) -> int:
        return self.placement.cp_degree if self.placement else 0

    @property
    def context_len(self) -> int:
        """Current KV length: prompt plus generated tokens."""
        return self.seq_len + self.generated


@dataclass
class ClusterTopology:
    nodes: list[int]
    instances_per_node: dict[int, list[int]]
    page_size: int = 64

    def __post_init__(self):
        if self.page_size < 1:
            raise ValueError("page_size must be >= 1")
        seen = [s for n in self.nodes for s in self.instances_per_node[n]]
        if len(seen) != len(set(seen)):
            raise ValueError("instance ids must be globally unique")
        self.node_of = {s: n for n in self.nodes for s in self.instances_per_node[n]}

    @classmethod
    def uniform(cls, n_nodes: int, per_node: int, page_size: int = 64) -> ClusterTopology:
        nodes = list(range(n_nodes))
        inst = {n: list(range(n * per_node, (n + 1) * per_node)) for n in nodes}
        return cls(nodes, inst, page_size)

    @property
    def world_size(self) -> int:
        return len(self.node_of)

    @property
    def instance_ids(self) -> list[int]:
        return [s for n in self.nodes for s in self.instances_per_node[n]]


@dataclass
class InstanceState:
    id: int
    node: int
    capacity_pages: int
    kv_load: int = 0
    moe_batch: int = 0
    shard_count: int = 0
    # frames set aside for decode growth of admitted requests
    reserved_frames: int = 0
    free_frames: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.free_frames and self.capacity_pages:
            # popped from the end, so low frame ids are handed out first
            self.free_frames = list(range(self.capacity_pages - 1, -1, -1))

    @property
    def available_frames(self) -> int:
        return len(self.free_frames) - self.reserved_frames

    @property
    def allocated_frames(self) -> int:
        return self.capacity_pages - len(self.free_frames)


@dataclass
class _PageRecord:
    instances: list[int]
    frames: list[int]
    tokens: dict[int, int]  # tokens resident per instance


class GlobalPageTable:
    """Maps (request id, logical page) to (instance id, frame id) cluster-wide."""

    def __init__(self):
        self._records: dict[int, _PageRecord] = {}

    def __contains__(self, request_id: int) -> bool:
        return request_id in self._records

    def __len__(self) -> int:
        return sum(len(r.frames) for r in self._records.values())

    def request_ids(self) -> list[int]:
        return sorted(self._records)

    def allocate(self, request: Request, placement: Placement, cluster: ClusterState) -> list[tuple[int, int]]:
        if request.id in self._records:
            raise DcpError(f"request {request.id} already has page-table entries")
        ps = cluster.page_size
        need = {s: pages_for(placement.split[s], ps) for s in placement.kv_binding}
        for s, n in need.items():
            if n > len(cluster.instances[s].free_frames):
                raise InsufficientFrames(
                    f"instance {s} has {len(cluster.instances[s].free_frames)} free frames, need {n}")
        rec = _PageRecord([], [], {})
        for s in placement.kv_binding:
            inst = cluster.instances[s]
            n = need[s]
            if n:
                taken = inst.free_frames[-n:][::-1]
                del inst.free_frames[-n:]
                rec.frames.extend(taken)
                rec.instances.extend([s] * n)
            rec.tokens[s] = placement.split[s]
            inst.kv_load += placement.split[s]
        self._records[request.id] = rec
        return list(zip(rec.instances, rec.frames))

    def append_token(self, request_id: int, instance: int, cluster: ClusterState) -> bool:
        """Grow a request's KV by one token on ``instance``.

        Returns True when a new frame had to be taken. A new frame is charged
        against the request's decode reservation when it has one there.
        """
        rec = self._records.get(request_id)
        if rec is None:
            raise UnknownRequest(request_id)
        inst = cluster.instances[instance]
        held = rec.tokens.get(instance, 0)
        new_page = held % cluster.page_size == 0
        if new_page:
            if not inst.free_frames:
                raise InsufficientFrames(f"instance {instance} has no free frame for decode growth")
            rec.frames.append(inst.free_frames.pop())
            rec.instances.append(instance)
            res = cluster.reservations.get(request_id)
            if res is not None and res[0] == instance and res[1] > 0:
                res[1] -= 1
                inst.reserved_frames -= 1
        rec.tokens[instance] = held + 1
        inst.kv_load += 1
        return new_page

    def extend(self, request_id: int, instance: int, n: int, cluster: ClusterState, update_load: bool = True) -> int:
        """Grow by ``n`` tokens on ``instance`` in one step; returns frames taken.

        Equivalent to ``n`` calls of :meth:`append_token`. With
        ``update_load=False`` the instance's ``kv_load`` is left to the caller.
        """
        rec = self._records.get(request_id)
        if rec is None:
            raise UnknownRequest(request_id)
        inst = cluster.instances[instance]
        held = rec.tokens.get(instance, 0)
        ps = cluster.page_size
        new = pages_for(held + n, ps) - pages_for(held, ps)
        if new > len(inst.free_frames):
            raise InsufficientFrames(f"instance {instance} has no free frame for decode growth")
        res = cluster.reservations.get(request_id)
        for _ in range(new):
            rec.frames.append(inst.free_frames.pop())
            rec.instances.append(instance)
            if res is not None and res[0] == instance and res[1] > 0:
                res[1] -= 1
                inst.reserved_frames -= 1
        rec.tokens[instance] = held + n
        if update_load:
            inst.kv_load += n
        return new

    def free(self, request_id: int, cluster: ClusterState) -> dict[int, int]:
        rec = self._records.pop(request_id, None)
        if rec is None:
            raise UnknownRequest(request_id)
        released: dict[int, int] = {}
        for s, f in zip(rec.instances, rec.frames):
            cluster.instances[s].free_frames.append(f)
            released[s] = released.get(s, 0) + 1
        for s, t in rec.tokens.items():
            cluster.instances[s].kv_load -= t
        res = cluster.reservations.pop(request_id, None)
        if res is not None:
            cluster.instances[res[0]].reserved_frames -= res[1]
        return released

    def lookup(self, request_id: int, logical_page: int) -> tuple[int, int]:
        rec = self._records.get(request_id)
        if rec is None:
            raise UnknownPage((request_id, logical_page))
        if not 0 <= logical_page < len(rec.frames):
            raise UnknownPage((request_id, logical_page))
        return rec.instances[logical_page], rec.frames[logical_page]

    def num_pages(self, request_id: int) -> int:
        rec = self._records.get(request_id)
        if rec is None:
            raise UnknownRequest(request_id)
        return len(rec.frames)

    def frame_counts(self, request_id: int) -> dict[int, int]:
        rec = self._records.get(request_id)
        if rec is None:
            raise UnknownRequest(request_id)
        out: dict[int, int] = {}
        for s in rec.instances:
            out[s] = out.get(s, 0) + 1
        return out

    def tokens(self, request_id: int) -> dict[int, int]:
        return dict(self._records[request_id].tokens)

    def entries(self) -> Iterable[tuple[int, int, int, int]]:
        """Yield (request_id, logical_page, instance_id, frame_id) rows."""
        for rid in sorted(self._records):
            rec = self._records[rid]
            for lp, (s, f) in enumerate(zip(rec.instances, rec.frames)):
                yield rid, lp, s, f

    def to_csv(self, fh: TextIO) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["request_id", "logical_page", "instance_id", "frame_id"])
        w.writerows(self.entries())


class ClusterState:
    """Mutable per-instance load plus the global page table."""

    def __init__(self, topology: ClusterTopology, capacity_pages: int | Mapping[int, int]):
        self.topology = topology
        self.page_table = GlobalPageTable()
        # request id -> [instance, frames still reserved for decode growth]
        self.reservations: dict[int, list[int]] = {}
        self.instances: dict[int, InstanceState] = {}
        for s in topology.instance_ids:
            cap = capacity_pages if isinstance(capacity_pages, int) else capacity_pages[s]
            self.instances[s] = InstanceState(s, topology.node_of[s], cap)

    @property
    def page_size(self) -> int:
        return self.topology.page_size

    @property
    def world_size(self) -> int:
        return self.topology.world_size

    def reserve(self, request_id: int, instance: int, frames: int) -> None:
        if frames <= 0:
            return
        self.reservations[request_id] = [instance, frames]
        self.instances[instance].reserved_frames += frames

    def kv_loads(self) -> dict[int, int]:
        return {s: i.kv_load for s, i in self.instances.items()}

    def node_batch(self, node: int) -> int:
        return sum(self.instances[s].moe_batch for s in self.topology.instances_per_node[node])

    def total_available_frames(self) -> int:
        return sum(i.available_frames for i in self.instances.values())

    def check_invariants(self) -> None:
        seen: set[tuple[int, int]] = set()
        allocated: dict[int, int] = {s: 0 for s in self.instances}
        for _, _, s, f in self.page_table.entries():
            if (s, f) in seen:
                raise AssertionError(f"frame ({s},{f}) mapped twice")
            seen.add((s, f))
            allocated[s] += 1
        for s, inst in self.instances.items():
            if allocated[s] + len(inst.free_frames) != inst.capacity_pages:
                raise AssertionError(f"frame conservation broken on instance {s}")
            if inst.kv_load > inst.capacity_pages * self.page_size:
                raise AssertionError(f"instance {s} over capacity")
            if len(set(inst.free_frames)) != len(inst.free_frames):
                raise AssertionError(f"duplicate free frames on instance {s}")


def pt_allocate(request: Request, placement: Placement, cluster: ClusterState) -> list[tuple[int, int]]:
    return cluster.page_table.allocate(request, placement, cluster)


def pt_free(request_id: int, cluster: ClusterState) -> dict[int, int]:
    return cluster.page_table.free(request_id, cluster)


def pt_lookup(request_id: int, logical_page: int, cluster: ClusterState) -> tuple[int, int]:
    return cluster.page_table.lookup(request_id, logical_page)
