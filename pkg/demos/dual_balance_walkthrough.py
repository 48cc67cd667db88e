"""Walk through a few scheduling rounds on a 1-node x 4-instance cluster.

Shows how each policy places a burst of short requests followed by one
long one, what the per-instance batch (B) and KV load (K) look like after
each round, and which routing masks the long request produces.

    python3 demos/dual_balance_walkthrough.py
"""

import numpy as np

from dcpsim import (
    BucketFn,
    ClusterState,
    ClusterTopology,
    DualBalancedDCP,
    LeastBatch,
    LeastCache,
    Request,
    Scheduler,
    UniformCP,
)
from dcpsim.routing import build_binding_config, derive_routing_tables

BUCKET = BucketFn(((32_768, 1), (131_072, 2), (393_216, 4), (None, 8)))


def show(cluster, title):
    B = [cluster.instances[s].moe_batch for s in cluster.instances]
    K = [cluster.instances[s].kv_load for s in cluster.instances]
    print(f"  {title:<22} B={B}  K={K}")


def run(policy):
    print(f"\n{type(policy).__name__}")
    cluster = ClusterState(ClusterTopology.uniform(1, 4, page_size=64), 20_000)
    sched = Scheduler(policy, reserve_decode=False)
    active = []
    rng = np.random.default_rng(7)
    shorts = [Request(i, int(n), float(i), 32) for i, n in enumerate(rng.integers(500, 8000, 6))]
    res = sched.step(shorts, active, cluster)
    active += [r for r, _ in res.committed]
    show(cluster, "after 6 short")

    long_req = Request(100, 600_000, 10.0, 32)
    res = sched.step([long_req], active, cluster)
    active += [r for r, _ in res.committed]
    show(cluster, "after 600K request")
    p = long_req.placement
    print(f"  long request: kv_binding={p.kv_binding} moe_binding={p.moe_binding} split={p.split}")

    placements = {r.id: r.placement for r in active}
    tables = derive_routing_tables(build_binding_config(placements, cluster.world_size))
    t = tables[p.moe_binding]
    row = t.res_rows.index(long_req.id)
    print(f"  res_route row at instance {p.moe_binding}: {t.res_route[row].tolist()}")
    remote = sum(int(x.q_route.sum()) - int(x.q_route[:, x.instance].sum()) for x in tables)
    print(f"  remote query transfers per layer: {remote}")


if __name__ == "__main__":
    for pol in (LeastBatch(), LeastCache(), UniformCP(2), DualBalancedDCP(BUCKET)):
        run(pol)
