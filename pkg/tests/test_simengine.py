import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcpsim.core import ClusterState, ClusterTopology, Placement, Request
from dcpsim.routing import build_binding_config, derive_routing_tables
from dcpsim.scheduler import DEFAULT_BUCKET, DualBalancedDCP, LeastBatch, LeastCache, Scheduler, UniformCP
from dcpsim.simengine import (
    ClusterConfig,
    InstanceLoads,
    LatencyModel,
    Phase,
    calibrate_bucket,
    cp_attention_latency,
    eval_phase_latency,
    imbalance_metrics,
    run_simulation,
    simulate_iteration,
    simulate_timeline,
    slo_sweep,
    write_requests_csv,
    write_summary,
)
from dcpsim.workload import ConstantRate, Poisson, TraceConfig, gen_trace

MODEL = LatencyModel()


def loads_for(batch, tokens, shards=None):
    W = len(batch)
    L = InstanceLoads.zeros(W)
    L.batch[:] = batch
    L.tokens[:] = tokens
    L.shards[:] = batch if shards is None else shards
    return L


# -- latency model -------------------------------------------------------------


def test_attention_intercept():
    m = LatencyModel(attn_fixed=10, attn_per_shard=0.5, attn_per_ktok=0.3)
    assert eval_phase_latency(m, Phase.ATTN, shards=0, tokens=0) == 10


def test_attention_grows_with_shards_at_fixed_tokens():
    lat = [eval_phase_latency(MODEL, Phase.ATTN, shards=r, tokens=200_000) for r in range(0, 50, 5)]
    assert all(b > a for a, b in zip(lat, lat[1:]))


def test_dispatch_skew():
    m = LatencyModel(ds_fixed=20, ds_per_req=2)
    assert eval_phase_latency(m, Phase.DS, batch=98) == 216
    assert eval_phase_latency(m, Phase.DS, batch=2) == 24


def test_routing_and_merge_costs():
    m = LatencyModel(route_fixed=4, route_per_kb=0.5, q_payload_kb=10, res_payload_kb=2, merge_per_partial=1.5)
    assert eval_phase_latency(m, Phase.QROUTE, messages=3) == 27
    assert eval_phase_latency(m, Phase.RESROUTE, messages=2) == 10
    assert eval_phase_latency(m, Phase.MERGE, partials=4) == 6
    assert eval_phase_latency(m, Phase.QROUTE, messages=0) == 0


def test_model_rejects_negative_coefficients():
    with pytest.raises(ValueError):
        LatencyModel(attn_fixed=-1)
    with pytest.raises(ValueError):
        LatencyModel(layers_per_iter=0)


# -- timelines -----------------------------------------------------------------


def test_symmetric_load_has_no_bubbles():
    tl = simulate_timeline(loads_for([5, 5, 5, 5], [1000] * 4), MODEL)
    assert np.allclose(tl.bubble(), 0.0)


def test_batch_skew_stalls_light_instance_before_combine_receive():
    tl = simulate_timeline(loads_for([2, 98], [100_000, 100_000]), MODEL)
    w = tl.waits()
    assert w[0, Phase.CR] > 0 and w[1, Phase.CR] == 0
    assert w[0, Phase.DR] > 0 and w[1, Phase.DR] == 0
    assert tl.bubble()[0] > 0 and tl.bubble()[1] == pytest.approx(0.0)


def test_kv_skew_stalls_light_instance_before_dispatch_receive():
    tl = simulate_timeline(loads_for([10, 10], [100_000, 300_000]), MODEL)
    w = tl.waits()
    gap = eval_phase_latency(MODEL, Phase.ATTN, shards=10, tokens=300_000) - eval_phase_latency(
        MODEL, Phase.ATTN, shards=10, tokens=100_000)
    assert w[0, Phase.DR] == pytest.approx(gap)
    assert w[1, Phase.DR] == 0 and w[0, Phase.CR] == 0


def test_iteration_latency_scales_with_layers():
    m = LatencyModel(layers_per_iter=7, iter_overhead_us=3.0)
    tl = simulate_timeline(loads_for([1], [10]), m)
    assert tl.iteration_latency == pytest.approx(7 * tl.layer_latency + 3.0)


def test_cp_request_waits_for_remote_partials():
    c = ClusterState(ClusterTopology.uniform(1, 2, 16), 10_000)
    p = {0: Placement((0, 1), 0, {0: 50_000, 1: 50_000})}
    c.instances[0].kv_load = c.instances[1].kv_load = 50_000
    tables = derive_routing_tables(build_binding_config(p, 2))
    tl = simulate_iteration(p, tables, c, MODEL)
    q = MODEL.route_fixed + MODEL.route_per_kb * MODEL.q_payload_kb
    # instance 1 cannot attend before the query arrives
    assert tl.start[1, Phase.ATTN] == pytest.approx(q)
    assert tl.start[0, Phase.MERGE] >= tl.finish[1, Phase.RESROUTE]
    assert tl.durations[0, Phase.MERGE] == pytest.approx(2 * MODEL.merge_per_partial)


def test_tables_must_match_placements():
    c = ClusterState(ClusterTopology.uniform(1, 2, 16), 100)
    p = {0: Placement((0, 1), 0, {0: 5, 1: 5})}
    other = derive_routing_tables(build_binding_config({0: Placement((0,), 0, {0: 10})}, 2))
    with pytest.raises(ValueError):
        simulate_iteration(p, other, c, MODEL)


def random_loads(rng, world, n_req):
    loads = InstanceLoads.zeros(world)
    for _ in range(n_req):
        k = int(rng.integers(1, world + 1))
        b = tuple(int(s) for s in rng.choice(world, k, replace=False))
        loads.add(Placement(b, b[0], {s: 1 for s in b}))
    loads.tokens[:] = rng.integers(0, 500_000, world)
    return loads


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(0, 60))
def test_barriers_and_phase_order(seed, world, n_req):
    tl = simulate_timeline(random_loads(np.random.default_rng(seed), world, n_req), MODEL)
    assert np.all(tl.start[:, Phase.DR] == tl.finish[:, Phase.DS].max())
    assert np.all(tl.start[:, Phase.CR] == tl.finish[:, Phase.CS].max())
    assert np.all(tl.waits() >= -1e-9)
    assert np.allclose(tl.finish - tl.start, tl.durations)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(0, 40), st.integers(0, 7), st.integers(0, 400_000))
def test_adding_a_request_never_lowers_latency(seed, world, n_req, where, ell):
    loads = random_loads(np.random.default_rng(seed), world, n_req)
    before = simulate_timeline(loads, MODEL).iteration_latency
    s = where % world
    loads.add(Placement((s,), s, {s: ell}))
    loads.tokens[s] += ell
    assert simulate_timeline(loads, MODEL).iteration_latency >= before


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 5000), min_size=1, max_size=40), st.sampled_from([2, 4]))
def test_uniform_cp_attends_full_group_batch(lengths, d):
    c = ClusterState(ClusterTopology.uniform(2, 4, 16), 100_000)
    res = Scheduler(UniformCP(d), reserve_decode=False).step(
        [Request(i, n, 0.0, 1) for i, n in enumerate(lengths)], [], c)
    placements = {r.id: p for r, p in res.committed}
    loads = InstanceLoads.from_placements(placements, c)
    for g0 in range(0, 8, d):
        group = range(g0, g0 + d)
        for s in group:
            assert loads.shards[s] == sum(loads.batch[t] for t in group)


# -- imbalance -----------------------------------------------------------------


def spread(mx, mean, n=32):
    rest = (mean * n - mx) / (n - 1)
    return [mx] + [rest] * (n - 1)


def test_reduction_potential_examples():
    assert imbalance_metrics(spread(1020.6, 354.7))[1] == pytest.approx(65.2, abs=0.1)
    assert imbalance_metrics(spread(539.5, 184.3))[1] == pytest.approx(65.8, abs=0.1)
    assert imbalance_metrics([7.0] * 5) == (0.0, 0.0)
    imb, red = imbalance_metrics([1.0, 3.0])
    assert imb == pytest.approx(50.0) and red == pytest.approx(100 / 3)
    with pytest.raises(ValueError):
        imbalance_metrics([])


# -- full runs -----------------------------------------------------------------

ONE = ClusterConfig(n_nodes=1, instances_per_node=1, page_size=16, capacity_tokens=100_000)


def test_empty_trace():
    m = run_simulation([], LeastBatch(), ONE, MODEL)
    assert (m.n_requests, m.iterations, m.tokens_decoded, m.n_finished) == (0, 0, 0, 0)
    assert m.slo_attainment == 0.0 and m.requests == []


def test_single_request_closed_form():
    ell, out = 1000, 10
    m = run_simulation([Request(0, ell, 0.0, out)], LeastBatch(), ONE, MODEL)
    per_layer_fixed = (
        MODEL.attn_fixed + MODEL.attn_per_shard
        + MODEL.ds_fixed + MODEL.ds_per_req + MODEL.dr_fixed + MODEL.dr_per_req
        + MODEL.mlp_fixed + MODEL.mlp_per_req + MODEL.cs_fixed + MODEL.cs_per_req
        + MODEL.cr_fixed + MODEL.cr_per_req
    )
    total_us = sum(MODEL.layers_per_iter * (per_layer_fixed + MODEL.attn_per_ktok * (ell + i) / 1000) for i in range(out))
    rec = m.requests[0]
    assert rec.tpot_ms == pytest.approx(total_us / 1000 / out, rel=1e-12)
    assert rec.decode_start_ms == pytest.approx(MODEL.migration_delay_ms)
    assert m.hol_events == 0 and m.mean_bubble_us == 0.0
    assert m.iterations == out and m.tokens_decoded == out
    assert m.slo_attainment == 1.0


def test_unfinished_requests_count_as_misses():
    m = run_simulation([Request(0, 100, 0.0, 50)], LeastBatch(), ONE, MODEL, horizon_ms=20.0)
    assert m.n_finished == 0 and m.slo_attainment == 0.0
    assert m.requests[0].tpot_ms == float("inf")


def test_unschedulable_request_is_reported():
    m = run_simulation([Request(0, 10**6, 0.0, 5), Request(1, 100, 1.0, 5)], LeastBatch(), ONE, MODEL)
    assert m.n_unschedulable == 1 and m.n_finished == 1


SMALL = ClusterConfig(n_nodes=2, instances_per_node=2, page_size=64, capacity_tokens=600_000)
POLICIES = [LeastBatch(), LeastCache(), DualBalancedDCP(), UniformCP(2)]


@pytest.mark.parametrize("policy", POLICIES, ids=lambda p: type(p).__name__)
def test_token_conservation(policy):
    trace = gen_trace(TraceConfig(long_ratio=0.2, arrival=Poisson(20.0), duration=3.0, output_len_dist=(4, 40), seed=9))
    m = run_simulation(trace, policy, SMALL, MODEL, horizon_ms=1e9)
    assert m.n_finished + m.n_unschedulable == m.n_requests
    finished = {r.id for r in m.requests if np.isfinite(r.finish_ms)}
    assert m.tokens_decoded == sum(r.output_len for r in trace if r.id in finished)
    for r in m.requests:
        assert r.finish_ms >= r.admit_ms >= r.arrival_ms


def _run_csv(policy, seed):
    trace = gen_trace(TraceConfig(long_ratio=0.1, arrival=Poisson(30.0), duration=2.0, output_len_dist=(4, 30), seed=seed))
    m = run_simulation(trace, policy, SMALL, MODEL)
    a, b = io.StringIO(), io.StringIO()
    write_requests_csv(m, a)
    write_summary(m, b)
    return a.getvalue() + b.getvalue()


@settings(max_examples=8, deadline=None)
@given(st.sampled_from(POLICIES), st.integers(0, 1000))
def test_runs_are_bit_reproducible(policy, seed):
    assert _run_csv(policy, seed) == _run_csv(policy, seed)


def test_request_csv_header():
    text = _run_csv(LeastBatch(), 1)
    assert text.splitlines()[0] == "id,arrival,admit,finish,tpot_ms,cp_degree"


def test_metrics_invariants():
    trace = gen_trace(TraceConfig(long_ratio=0.1, arrival=Poisson(40.0), duration=3.0, output_len_dist=(4, 60), seed=2))
    m = run_simulation(trace, DualBalancedDCP(), SMALL, MODEL)
    assert 0.0 <= m.slo_attainment <= 1.0
    assert m.p99_tpot_ms >= m.p50_tpot_ms
    assert 0.0 <= m.max_cp_fraction <= 1.0
    assert sum(m.cp_histogram.values()) == m.n_requests - m.n_unschedulable
    assert set(m.slowest_breakdown_us) == {p.name for p in Phase}


# -- sweeps --------------------------------------------------------------------

SWEEP_TC = TraceConfig(long_ratio=0.0, arrival=ConstantRate(1.0), duration=2.0, output_len_dist=(4, 8), seed=3)


def test_sweep_all_pass_returns_last_rate():
    res = slo_sweep(SWEEP_TC, LeastBatch(), SMALL, MODEL, 1e6, [2.0, 4.0, 8.0])
    assert res.max_rate == 8.0 and res.attainment == [1.0, 1.0, 1.0]


def test_sweep_first_failure_means_none():
    res = slo_sweep(SWEEP_TC, LeastBatch(), SMALL, MODEL, 1e-3, [2.0, 4.0, 8.0])
    assert res.max_rate is None and res.rates == [2.0]


def test_sweep_rejects_unsorted_grid():
    with pytest.raises(ValueError):
        slo_sweep(SWEEP_TC, LeastBatch(), SMALL, MODEL, 50.0, [4.0, 2.0])


def test_sweep_worker_count_does_not_matter():
    tc = TraceConfig(long_ratio=0.0, arrival=Poisson(1.0), duration=2.0, output_len_dist=(4, 8), seed=3)
    grid = [5.0, 50.0, 200.0, 800.0, 3200.0]
    serial = slo_sweep(tc, DualBalancedDCP(), SMALL, MODEL, 10.0, grid)
    pooled = slo_sweep(tc, DualBalancedDCP(), SMALL, MODEL, 10.0, grid, workers=2)
    assert serial.max_rate == 200.0 and len(serial.rates) == 4  # stops after the first miss
    assert (serial.max_rate, serial.rates, serial.attainment) == (pooled.max_rate, pooled.rates, pooled.attainment)


# -- CP-degree calibration ---------------------------------------------------------


def test_shipped_bucket_is_calibration_output():
    assert calibrate_bucket(LatencyModel()) == DEFAULT_BUCKET


def test_bucket_degree_minimizes_latency_on_probe_grid():
    for ell in range(4096, 1_048_577, 4096):
        lat = {d: cp_attention_latency(MODEL, ell, d) for d in (1, 2, 4, 8)}
        assert lat[DEFAULT_BUCKET(ell)] == min(lat.values())


def test_free_routing_favours_maximal_split():
    m = LatencyModel(route_fixed=0, route_per_kb=0, merge_per_partial=0, attn_per_shard=0)
    assert calibrate_bucket(m).thresholds == ((None, 8),)
