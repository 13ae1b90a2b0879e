"""Acceptance suite: nine end-to-end claims the package must hold, each with
a pinned tolerance and a runtime budget. Every check records a one-line
verdict that pytest echoes after the test table."""

import time

import numpy as np
import pytest

import conftest
from test_ops import GRAD_CASES, check_gradients
from test_scheduling import random_stages, uniform_fleet
from test_simulation import chain_fleet, chain_job

from dagmesh import hardware as hw
from dagmesh import ops, pipeline, reference, scheduling
from dagmesh.sim import SimConfig, load_scenario, run_simulation
from dagmesh.sim.loop import EventKind


def record(n, ok, detail, elapsed, budget):
    timed_ok = elapsed < budget
    verdict = "PASS" if (ok and timed_ok) else "FAIL"
    line = (f"criterion {n} {verdict}: {detail} "
            f"[{elapsed:.2f}s, budget {budget:g}s]")
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok and timed_ok, line


def test_criterion_1_fleet_throughput_parity():
    # fifty consumer cards against four datacenter cards: equal aggregate-FLOP
    # splits at zero communication differ only by the peak-rate ratio, and the
    # finite-bandwidth sweep keeps the two fleets within ten percent
    t0 = time.perf_counter()
    total = 1.0
    consumer = [pipeline.StageProfile(str(i), total / (50 * 59.5e12), 0.0)
                for i in range(50)]
    dc = [pipeline.StageProfile(str(i), total / (4 * 756e12), 0.0)
          for i in range(4)]
    ratio = (pipeline.asymptotic_throughput(dc, 8)
             / pipeline.asymptotic_throughput(consumer, 8))
    anchor_ok = ratio == pytest.approx(1.016470588235294, rel=1e-12)

    model = pipeline.build_bert_large()
    result = pipeline.sweep(model, pipeline.reference_fleets(),
                            [1.0, 2.0, 5.0, 10.0], [0.0, 5e-3, 1e-2], 512)
    assert not result.infeasible
    by_point = {}
    for row in result.rows:
        by_point.setdefault((row.bandwidth_gbps, row.alpha_ms), []).append(row)
    gaps = []
    for point, rows in sorted(by_point.items()):
        assert len(rows) == 2, point
        a, b = (r.throughput for r in rows)
        gaps.append(abs(a - b) / min(a, b))
    max_gap = max(gaps)
    record(1, anchor_ok and max_gap <= 0.10,
           f"zero-comm throughput ratio {ratio:.9f}; fleets within "
           f"{max_gap:.2%} <= 10% over {len(gaps)} sweep points",
           time.perf_counter() - t0, 5.0)


def test_criterion_2_latency_ordering_across_grid():
    # many hops pay the per-stage message cost many times: the 50-peer fleet
    # must show the larger single-batch latency at every grid point
    t0 = time.perf_counter()
    model = pipeline.build_bert_large()
    bandwidths = [float(b) for b in np.geomspace(0.1, 10.0, 10)]
    alphas = [float(a) for a in np.linspace(0.0, 9e-3, 10)]
    result = pipeline.sweep(model, pipeline.reference_fleets(),
                            bandwidths, alphas, 2)
    assert not result.infeasible
    by_point = {}
    for row in result.rows:
        by_point[(row.bandwidth_gbps, row.alpha_ms, row.fleet)] = row.latency_s
    min_gap = float("inf")
    for bw in bandwidths:
        for alpha in alphas:
            wide = by_point[(bw, alpha * 1e3, "rtx3080-x50")]
            narrow = by_point[(bw, alpha * 1e3, "h100-x4")]
            min_gap = min(min_gap, wide - narrow)
    record(2, min_gap > 0.0,
           f"50-peer latency exceeds 4-peer latency at all 100 grid points "
           f"(smallest margin {min_gap:.4g}s)",
           time.perf_counter() - t0, 5.0)


def test_criterion_3_single_batch_identity():
    # with one batch in flight there is no steady state: the pipeline closed
    # form must collapse to the latency sum exactly, not approximately
    t0 = time.perf_counter()
    rng = np.random.default_rng(33)
    exact = 0
    for _ in range(1000):
        n = int(rng.integers(1, 20))
        profiles = [pipeline.StageProfile(str(i), float(rng.uniform(1e-3, 1.0)),
                                          float(rng.uniform(0.0, 0.5)))
                    for i in range(n)]
        if pipeline.pipeline_time(profiles, 1) == pipeline.fp_latency(profiles):
            exact += 1
    record(3, exact == 1000,
           f"pipeline time at one batch equals latency exactly on "
           f"{exact}/1000 random profiles",
           time.perf_counter() - t0, 1.0)


def test_criterion_4_distributed_matches_centralized(demo_graph, trio_fleet):
    # ten batches across three peers, then the same job trained in-process:
    # the final parameters must agree bit for bit
    t0 = time.perf_counter()
    sim = run_simulation(demo_graph, trio_fleet,
                         config=SimConfig(n_batches=10, seed=0))
    params, losses = reference.centralized_train(demo_graph, 10, seed=0)
    assert sim.losses == losses
    assert set(sim.final_params) == set(params)
    max_diff = 0.0
    for op in params:
        for pname in params[op]:
            a = sim.final_params[op][pname]
            b = params[op][pname]
            assert a.shape == b.shape and a.dtype == b.dtype, (op, pname)
            max_diff = max(max_diff, float(np.max(np.abs(a - b))))
    record(4, max_diff == 0.0,
           f"3-peer 10-batch run reproduces centralized parameters, "
           f"max abs diff {max_diff}",
           time.perf_counter() - t0, 10.0)


def test_criterion_5_gradients_match_finite_differences():
    t0 = time.perf_counter()
    assert set(GRAD_CASES) == set(ops.CATALOG)
    worst = {op: check_gradients(op) for op in sorted(ops.CATALOG)}
    top = max(worst.values())
    record(5, top <= 1e-4,
           f"all {len(worst)} catalog ops match central differences at h=1e-4 "
           f"(worst relative error {top:.3g} <= 1e-4)",
           time.perf_counter() - t0, 10.0)


def test_criterion_6_scheduler_within_ten_percent_of_brute_force():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    feasible = 0
    worst_ratio = 0.0
    for trial in range(200):
        n = int(rng.integers(2, 13))
        p = int(rng.integers(2, 5))
        stages = random_stages(rng, n)
        link = hw.Link(float(rng.uniform(0, 1e-3)), float(rng.uniform(0, 1e-7)))
        cap_gb = float(rng.uniform(0.7, 1.6)) * sum(
            s.gpu_bytes for s in stages) / 2**30
        fleet = uniform_fleet(list(rng.uniform(1e8, 1e9, p)), link=link,
                              gpu_gb=cap_gb)
        got = scheduling.schedule(stages, fleet)
        want = scheduling.brute_force_schedule(stages, fleet)
        assert got.feasible == want.feasible, trial
        if not want.feasible:
            continue
        feasible += 1
        assert scheduling.verify_assignment(stages, fleet, got.runs) == "", trial
        worst_ratio = max(worst_ratio, got.makespan / want.makespan)
    record(6, feasible >= 100 and worst_ratio <= 1.10,
           f"{feasible}/200 feasible instances all verified, worst "
           f"makespan ratio {worst_ratio:.6f} <= 1.10",
           time.perf_counter() - t0, 30.0)


def test_criterion_7_single_failure_recovery(demo_graph, trio_fleet,
                                             quit_scenario_path):
    # one worker quits mid-run with a backup standing by: checkpoints at every
    # step make the recovered run land on identical parameters, via exactly
    # one replacement dispatch
    t0 = time.perf_counter()
    config = SimConfig(n_batches=10, seed=0, checkpoint_interval=1)
    clean = run_simulation(demo_graph, trio_fleet, config=config)
    wounded = run_simulation(demo_graph, trio_fleet,
                             scenario=load_scenario(quit_scenario_path),
                             config=config)
    assert wounded.status == "completed"
    max_diff = 0.0
    for op in clean.final_params:
        for pname in clean.final_params[op]:
            max_diff = max(max_diff, float(np.max(np.abs(
                clean.final_params[op][pname]
                - wounded.final_params[op][pname]))))
    dispatches = [e for e in wounded.events
                  if e.kind is EventKind.DISPATCH and "replacement" in e.detail]
    record(7, max_diff == 0.0 and len(dispatches) == 1
           and wounded.stats["replacements"] == 1,
           f"recovered run matches failure-free parameters (max abs diff "
           f"{max_diff}) with {len(dispatches)} replacement dispatch",
           time.perf_counter() - t0, 10.0)


def test_criterion_8_lambda_fit_recovery():
    t0 = time.perf_counter()
    true_lam = 0.45
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(800 + seed)
        peer = hw.Peer("p", peak_flops=float(rng.uniform(1e12, 1e14)))
        flops = rng.uniform(1e9, 1e12, size=200)
        times = (flops / (peer.peak_flops * true_lam)
                 * (1 + rng.uniform(-0.01, 0.01, 200)))
        lam = hw.fit_lambda(list(zip(flops, times)), peer)
        worst = max(worst, abs(lam - true_lam) / true_lam)
    record(8, worst <= 0.05,
           f"efficiency fits on 10 noisy profiles within {worst:.2%} "
           f"of 0.45 (<= 5%)",
           time.perf_counter() - t0, 1.0)


def test_criterion_9_simulation_matches_pipeline_equation():
    # event-by-event streaming of a placed chain against the closed form
    t0 = time.perf_counter()
    worst = 0.0
    for trial in range(20):
        rng = np.random.default_rng(5000 + trial)
        n_peers = int(rng.integers(2, 6))
        graph = chain_job(2 * n_peers)
        fleet = chain_fleet(rng, n_peers)
        cells = [["x0", "s1", "s2"]] + [[f"s{2 * k + 1}", f"s{2 * k + 2}"]
                                        for k in range(1, n_peers)]
        placement = {n: str(i + 1) for i, cell in enumerate(cells) for n in cell}
        stages = scheduling.build_stages(graph, cells)
        runs = tuple((str(i + 1), (i,)) for i in range(n_peers))
        profiles = pipeline.profiles_from_report(
            scheduling.evaluate_runs(stages, fleet, runs))
        n_batches = int(rng.integers(2, 9))
        want = pipeline.pipeline_time(profiles, n_batches)
        got = run_simulation(graph, fleet, placement=placement,
                             config=SimConfig(n_batches=n_batches,
                                              mode="inference"))
        assert got.status == "completed", trial
        worst = max(worst, abs(got.end_time - want) / want)
    record(9, worst <= 0.01,
           f"20 streamed chains end within {worst:.3g} relative of the "
           f"closed-form pipeline time (<= 1%)",
           time.perf_counter() - t0, 10.0)
