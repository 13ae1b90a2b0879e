"""Event-driven runtime simulation: completion, bitwise agreement with the
single-host path, determinism of the event log, failure recovery, and the
match between simulated chains and the pipeline timing equation."""

import numpy as np
import pytest

from dagmesh import hardware as hw
from dagmesh import ir, pipeline, reference, scheduling
from dagmesh.errors import SimulationError
from dagmesh.sim import (SimConfig, default_scenario, events_to_csv,
                         load_scenario, parse_scenario, placement_report,
                         run_simulation)
from dagmesh.sim.dht import DhtStore
from dagmesh.sim.loop import EventKind


def chain_job(n_ops, batch=2, width=3):
    """A straight line of add nodes; placeholder at the head, no loss."""
    nodes = [{"name": "x0", "type": "placeholder", "shape": [batch, width],
              "users": ["s1"]}]
    for i in range(1, n_ops + 1):
        nodes.append({"name": f"s{i}", "type": "non_parametric",
                      "op_class": "add", "kwargs": {"constant": 1.0},
                      "args": [f"s{i - 1}" if i > 1 else "x0"],
                      "users": [f"s{i + 1}"] if i < n_ops else []})
    return ir.parse_job_definition({"meta": {}, "nodes": nodes})


def chain_fleet(rng, n_peers):
    peers = {}
    for i in range(1, n_peers + 1):
        peers[str(i)] = hw.Peer(str(i), peak_flops=float(rng.uniform(2e3, 2e5)))
    link = hw.Link(float(rng.uniform(0.0, 0.01)), float(rng.uniform(1e-6, 1e-4)))
    return hw.Fleet(peers=peers, default_link=link)


class TestScenarios:
    def test_parse_sorts_by_time(self):
        events = parse_scenario([
            {"time_s": 1.0, "action": "quit", "peer_id": "2"},
            {"time_s": 0.0, "action": "join", "peer_id": "2"},
        ])
        assert [e.action for e in events] == ["join", "quit"]

    def test_parse_rejects_bad_entries(self):
        with pytest.raises(SimulationError, match="unknown scenario action"):
            parse_scenario([{"time_s": 0, "action": "dance", "peer_id": "1"}])
        with pytest.raises(SimulationError, match="bad scenario entry"):
            parse_scenario([{"action": "join"}])
        with pytest.raises(SimulationError, match="must be a list"):
            parse_scenario({"action": "join"})
        with pytest.raises(SimulationError, match="not valid JSON"):
            parse_scenario("{nope")

    def test_load_scenario_file(self, quit_scenario_path):
        events = load_scenario(quit_scenario_path)
        assert [e.action for e in events] == ["join"] * 4 + ["quit"]
        assert events[-1].peer_id == "2"
        assert events[-1].time_s == 0.25

    def test_default_scenario_joins_everyone(self, trio_fleet):
        events = default_scenario(trio_fleet)
        assert sorted(e.peer_id for e in events) == ["1", "2", "3", "4"]
        assert all(e.time_s == 0.0 and e.action == "join" for e in events)


class TestPlacementReport:
    def test_demo_placement_scores(self, demo_graph, trio_fleet):
        report, cells = placement_report(demo_graph, trio_fleet,
                                         demo_graph.placement)
        assert report.feasible
        assert [len(c) for c in cells] == [4, 2, 4]
        assert report.assignment == {0: "1", 1: "2", 2: "3"}

    def test_cyclic_placement_rejected(self, demo_graph, trio_fleet):
        tangled = dict(demo_graph.placement)
        # peer 1 waits on Conv from peer 2, peer 2 waits on Add from peer 1
        tangled["Conv"] = "2"
        tangled["TensorA"] = "2"
        with pytest.raises(SimulationError, match="depend on each other"):
            placement_report(demo_graph, trio_fleet, tangled)

    def test_missing_nodes_rejected(self, demo_graph, trio_fleet):
        partial = dict(demo_graph.placement)
        del partial["Pool"]
        with pytest.raises(SimulationError, match="placement misses"):
            placement_report(demo_graph, trio_fleet, partial)


class TestTraining:
    def test_demo_runs_to_completion(self, demo_graph, trio_fleet):
        report = run_simulation(demo_graph, trio_fleet,
                                config=SimConfig(n_batches=3))
        assert report.status == "completed"
        assert report.mode == "train"
        assert sorted(report.batch_done) == [0, 1, 2]
        assert report.end_time == max(report.batch_done.values())
        assert len(report.losses) == 3

    def test_matches_centralized_training_bitwise(self, demo_graph, trio_fleet):
        sim = run_simulation(demo_graph, trio_fleet,
                             config=SimConfig(n_batches=5, seed=0))
        params, losses = reference.centralized_train(demo_graph, 5, seed=0)
        assert sim.losses == losses
        assert set(sim.final_params) == set(params)
        for op in params:
            for pname in params[op]:
                assert np.array_equal(sim.final_params[op][pname],
                                      params[op][pname]), (op, pname)

    def test_event_log_is_deterministic(self, demo_graph, trio_fleet, tmp_path):
        a = run_simulation(demo_graph, trio_fleet, config=SimConfig(n_batches=2))
        b = run_simulation(demo_graph, trio_fleet, config=SimConfig(n_batches=2))
        assert a.events == b.events
        assert a.end_time == b.end_time
        pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
        events_to_csv(a.events, pa)
        events_to_csv(b.events, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_event_log_shape(self, demo_graph, trio_fleet):
        report = run_simulation(demo_graph, trio_fleet, config=SimConfig(n_batches=1))
        kinds = {e.kind for e in report.events}
        assert {EventKind.JOIN, EventKind.DISPATCH, EventKind.MSG_SEND,
                EventKind.MSG_ARRIVE, EventKind.COMPUTE_DONE,
                EventKind.CHECKPOINT_SYNC} <= kinds
        times = [e.time_s for e in report.events]
        assert times == sorted(times)
        sync = [e for e in report.events if e.kind is EventKind.CHECKPOINT_SYNC]
        assert any("Conv step 0 on" in e.detail for e in sync)

    def test_different_seeds_change_the_data(self, demo_graph, trio_fleet):
        a = run_simulation(demo_graph, trio_fleet, config=SimConfig(n_batches=2, seed=0))
        b = run_simulation(demo_graph, trio_fleet, config=SimConfig(n_batches=2, seed=7))
        assert a.losses != b.losses

    def test_empty_scenario_cannot_dispatch(self, demo_graph, trio_fleet):
        with pytest.raises(SimulationError, match="no peers joined"):
            run_simulation(demo_graph, trio_fleet, scenario=[])

    def test_absent_stage_owner_is_an_error(self, demo_graph, trio_fleet):
        scenario = parse_scenario([
            {"time_s": 0.0, "action": "join", "peer_id": "1"},
            {"time_s": 0.0, "action": "join", "peer_id": "2"},
        ])
        with pytest.raises(SimulationError, match="not online at dispatch"):
            run_simulation(demo_graph, trio_fleet, scenario=scenario)

    def test_placement_required(self, trio_fleet):
        g = chain_job(2)
        with pytest.raises(SimulationError, match="no placement given"):
            run_simulation(g, trio_fleet)

    def test_training_needs_a_loss(self, trio_fleet):
        g = chain_job(2)
        placement = {n: "1" for n in g.topo_order}
        with pytest.raises(SimulationError, match="no loss node"):
            run_simulation(g, trio_fleet, placement=placement,
                           config=SimConfig(mode="train"))


class TestRecovery:
    def run_pair(self, demo_graph, trio_fleet, quit_scenario_path, **cfg):
        config = SimConfig(n_batches=10, seed=0, **cfg)
        clean = run_simulation(demo_graph, trio_fleet, config=config)
        wounded = run_simulation(demo_graph, trio_fleet,
                                 scenario=load_scenario(quit_scenario_path),
                                 config=config)
        return clean, wounded

    def test_backup_replaces_quitter(self, demo_graph, trio_fleet,
                                     quit_scenario_path):
        clean, wounded = self.run_pair(demo_graph, trio_fleet, quit_scenario_path)
        assert wounded.status == "completed"
        assert wounded.stats["replacements"] == 1
        replacement = [e for e in wounded.events
                       if e.kind is EventKind.DISPATCH and "replacement" in e.detail]
        assert len(replacement) == 1
        assert "replacement for 2" in replacement[0].detail
        assert replacement[0].dst == "4"

    def test_recovered_run_matches_failure_free_params(self, demo_graph,
                                                       trio_fleet,
                                                       quit_scenario_path):
        clean, wounded = self.run_pair(demo_graph, trio_fleet, quit_scenario_path)
        assert set(clean.final_params) == set(wounded.final_params)
        for op in clean.final_params:
            for pname in clean.final_params[op]:
                assert np.array_equal(clean.final_params[op][pname],
                                      wounded.final_params[op][pname]), (op, pname)
        assert clean.losses == wounded.losses

    def test_recovery_costs_time(self, demo_graph, trio_fleet, quit_scenario_path):
        clean, wounded = self.run_pair(demo_graph, trio_fleet, quit_scenario_path)
        # detection waits out the ping timeout, so the wounded run ends later
        assert wounded.end_time > clean.end_time
        assert wounded.stats["detections"] == 1
        assert wounded.stats.get("discarded", 0) >= 0

    def test_unreplicated_checkpoint_loss_aborts(self, demo_graph, trio_fleet):
        # the ring makes peer 1 the sole r=1 holder of Conv's first checkpoint;
        # batch 0 lands at ~0.094 s and batch 1 at ~0.188 s, so a quit at 0.12 s
        # hits while that checkpoint is still the live one
        probe = DhtStore(replication=1)
        for pid in ("1", "2", "3", "4"):
            probe.join(pid)
        assert probe.put("ckpt/Conv/0", b"x") == ("1",)
        scenario = parse_scenario(
            [{"time_s": 0.0, "action": "join", "peer_id": p}
             for p in ("1", "2", "3", "4")]
            + [{"time_s": 0.12, "action": "quit", "peer_id": "1"}])
        with pytest.raises(SimulationError, match="checkpoint data lost") as info:
            run_simulation(demo_graph, trio_fleet, scenario=scenario,
                           config=SimConfig(n_batches=10, seed=0, replication=1))
        assert info.value.report is not None
        assert info.value.report.status == "data_lost"


class TestInference:
    def test_streams_all_batches(self, demo_graph, trio_fleet):
        report = run_simulation(demo_graph, trio_fleet,
                                config=SimConfig(n_batches=4, mode="inference"))
        assert report.status == "completed"
        assert report.mode == "inference"
        assert report.losses is None
        assert sorted(report.batch_done) == [0, 1, 2, 3]

    def test_chain_matches_pipeline_equation(self):
        rng = np.random.default_rng(909)
        n_peers = 4
        graph = chain_job(2 * n_peers)
        fleet = chain_fleet(rng, n_peers)
        cells = [["x0", "s1", "s2"]] + [[f"s{2 * k + 1}", f"s{2 * k + 2}"]
                                        for k in range(1, n_peers)]
        placement = {n: str(i + 1) for i, cell in enumerate(cells) for n in cell}
        stages = scheduling.build_stages(graph, cells)
        runs = tuple((str(i + 1), (i,)) for i in range(n_peers))
        analytic = scheduling.evaluate_runs(stages, fleet, runs)
        profiles = pipeline.profiles_from_report(analytic)
        n_batches = 6
        want = pipeline.pipeline_time(profiles, n_batches)
        got = run_simulation(graph, fleet, placement=placement,
                             config=SimConfig(n_batches=n_batches,
                                              mode="inference"))
        assert got.status == "completed"
        assert got.end_time == pytest.approx(want, rel=1e-12)

    def test_single_batch_chain_equals_latency(self):
        rng = np.random.default_rng(31)
        graph = chain_job(6)
        fleet = chain_fleet(rng, 3)
        cells = [["x0", "s1", "s2"], ["s3", "s4"], ["s5", "s6"]]
        placement = {n: str(i + 1) for i, cell in enumerate(cells) for n in cell}
        stages = scheduling.build_stages(graph, cells)
        runs = tuple((str(i + 1), (i,)) for i in range(3))
        profiles = pipeline.profiles_from_report(
            scheduling.evaluate_runs(stages, fleet, runs))
        got = run_simulation(graph, fleet, placement=placement,
                             config=SimConfig(n_batches=1, mode="inference"))
        assert got.end_time == pytest.approx(pipeline.fp_latency(profiles),
                                             rel=1e-12)
