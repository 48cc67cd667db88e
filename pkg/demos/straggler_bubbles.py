"""Where lock-step decode loses time.

Part 1 builds two hand-made two-instance iterations: one with skewed batch
sizes and balanced KV, one with balanced batches and skewed KV. It prints
the per-phase schedule so you can see which instance idles and in front of
which barrier.

Part 2 runs the shipped 2x4 straggler experiment and compares the
per-iteration imbalance of the three request placement policies.

    python3 demos/straggler_bubbles.py
"""

from pathlib import Path

import numpy as np

from dcpsim.config import load_config
from dcpsim.simengine import PHASES, InstanceLoads, LatencyModel, simulate_timeline
from dcpsim.workload import gen_trace
from dcpsim import run_simulation

MODEL = LatencyModel()


def timeline(batch, tokens, title):
    loads = InstanceLoads.zeros(2)
    loads.batch[:] = batch
    loads.shards[:] = batch
    loads.tokens[:] = tokens
    tl = simulate_timeline(loads, MODEL)
    waits = tl.waits()
    print(f"\n{title}  (B={batch}, K={tokens})")
    print("  phase     " + "".join(f"{'inst ' + str(i):>22}" for i in range(2)))
    for p in PHASES:
        cells = []
        for i in range(2):
            w = f" wait {waits[i, p]:.0f}" if waits[i, p] > 1e-9 else ""
            cells.append(f"{tl.start[i, p]:7.1f}-{tl.finish[i, p]:7.1f}{w}")
        print(f"  {p.name:<9} " + "".join(f"{c:>22}" for c in cells))
    print(f"  per-layer bubble (us): {np.round(tl.bubble(), 1).tolist()}")


def policy_comparison():
    cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "straggler_2x4.yaml")
    trace = gen_trace(cfg.trace.build(cfg.seed))
    print(f"\n{len(trace)} requests, {sum(r.seq_len >= 100_000 for r in trace)} of them long")
    print(f"  {'policy':<12}{'attn RP %':>11}{'DS..CR RP %':>13}{'KV imb %':>10}{'B imb %':>9}{'p99 TPOT ms':>13}")
    for spec in cfg.policies:
        m = run_simulation(trace, spec.build(), cfg.cluster, cfg.model, cfg.slo_ms)
        print(f"  {m.policy:<12}{m.attn_reduction_potential:11.1f}{m.moe_comm_reduction_potential:13.1f}"
              f"{m.kv_imbalance:10.1f}{m.batch_imbalance:9.1f}{m.p99_tpot_ms:13.2f}")


if __name__ == "__main__":
    timeline([2, 98], [100_000, 100_000], "Batch skew")
    timeline([10, 10], [100_000, 300_000], "KV skew")
    policy_comparison()
