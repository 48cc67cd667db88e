"""Decode-time scheduling for DP-EP mixture-of-experts serving with dynamic
context parallelism, plus a lock-step cluster simulator to compare policies."""

from .attn_merge import distributed_attention, lse_merge, reference_attention, shard_attention
from .core import ClusterState, ClusterTopology, GlobalPageTable, Placement, Request, RequestState
from .routing import build_binding_config, derive_routing_tables, graph_memory_footprint
from .scheduler import (
    DEFAULT_BUCKET,
    BucketFn,
    DualBalancedDCP,
    LeastBatch,
    LeastCache,
    Scheduler,
    UniformCP,
    schedule_step,
    water_fill,
)
from .simengine import (
    ClusterConfig,
    LatencyModel,
    RunMetrics,
    calibrate_bucket,
    imbalance_metrics,
    run_simulation,
    simulate_iteration,
    slo_sweep,
)
from .workload import TraceConfig, gen_trace

__version__ = "0.1.0"
