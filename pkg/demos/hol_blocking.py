"""Head-of-line blocking when KV memory is fragmented across instances.

With 1.2M tokens of KV per instance, a 700K request cannot land on any
instance that already holds a long request, even though the cluster as a
whole has plenty of free memory. Single-instance placement then blocks the
FIFO queue; splitting the request over several instances does not.

    python3 demos/hol_blocking.py
"""

from dcpsim import ClusterConfig, ClusterState, ClusterTopology, DualBalancedDCP, LeastBatch, Request, Scheduler
from dcpsim.config import load_config
from dcpsim.workload import gen_trace
from dcpsim import run_simulation
from pathlib import Path

PAGE = 64
CAP = 1_200_000 // PAGE


def fragmented_cluster():
    c = ClusterState(ClusterTopology.uniform(1, 4, PAGE), CAP)
    # every instance already holds a 600K request
    old = []
    for s in range(4):
        r = Request(s, 600_000, 0.0, 1)
        Scheduler(LeastBatch(), reserve_decode=False).step([r], old, c)
        old.append(r)
    return c, old


for policy in (LeastBatch(), DualBalancedDCP()):
    c, old = fragmented_cluster()
    free = c.total_available_frames() * PAGE
    head = Request(10, 700_000, 1.0, 1)
    tail = Request(11, 2_000, 1.1, 1)
    res = Scheduler(policy, reserve_decode=False).step([head, tail], old, c)
    print(f"{type(policy).__name__:<16} free KV {free / 1e6:.1f}M tokens; "
          f"committed {[r.id for r, _ in res.committed]}, deferred {[r.id for r in res.deferred]}, "
          f"HoL event: {res.hol_event}")
    if head.placement:
        print(f"{'':<16} 700K request split: {head.placement.split}")

cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "hol_2x4.yaml")
trace = gen_trace(cfg.trace.build(cfg.seed))
print(f"\nseeded trace, {len(trace)} requests at {cfg.trace.rate:g} req/s:")
for spec in cfg.policies:
    m = run_simulation(trace, spec.build(), cfg.cluster, cfg.model, cfg.slo_ms)
    print(f"  {m.policy:<12} HoL events {m.hol_events:4d}  SLO attainment {m.slo_attainment:.3f}  p99 TPOT {m.p99_tpot_ms:.1f} ms")
