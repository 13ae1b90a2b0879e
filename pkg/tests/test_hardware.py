"""Performance model tests: link costs, effective speed, the efficiency-factor
fit, per-op and per-cell timing, memory footprints, and fleet file parsing."""

import math

import numpy as np
import pytest

from dagmesh import hardware as hw
from dagmesh import ir
from dagmesh.errors import FleetError


class TestLinksAndSpeed:
    def test_bandwidth_to_beta(self):
        assert hw.bandwidth_to_beta(1.0) == 8.0 / 1e9
        assert hw.bandwidth_to_beta(0.02) == 8.0 / 2e7
        with pytest.raises(FleetError):
            hw.bandwidth_to_beta(0.0)

    def test_comm_time_is_affine(self):
        link = hw.Link(0.002, 8e-9)
        assert hw.comm_time(link, 16_777_216) == 0.002 + 8e-9 * 16_777_216
        assert hw.comm_time(link, 16_777_216) == pytest.approx(0.136217728, abs=0)
        assert hw.comm_time(link, 0) == 0.002
        with pytest.raises(FleetError):
            hw.comm_time(link, -1)

    def test_effective_speed(self):
        peer = hw.Peer("p", peak_flops=59.5e12, lam=0.5)
        assert hw.effective_speed(peer) == 29.75e12

    def test_message_bytes(self, demo_graph):
        node = demo_graph.node("Conv")  # (4, 3, 8, 8) -> 768 float32 elements
        assert hw.message_bytes(node) == 3072
        assert hw.message_bytes(node, msg_ratio=0.5) == 1536

    def test_peer_validation(self):
        with pytest.raises(FleetError, match="lambda"):
            hw.Peer("p", lam=1.5)
        with pytest.raises(FleetError, match="peak_flops"):
            hw.Peer("p", peak_flops=0)
        with pytest.raises(FleetError, match="nonnegative"):
            hw.Link(-0.1, 0)


class TestGpuTable:
    def test_published_peaks(self):
        t = hw.GPU_TABLE
        assert (t["rtx4090"].tflops_fp32, t["rtx4090"].tflops_tensor) == (82.58, 82.58)
        assert (t["rtx4080"].tflops_fp32, t["rtx4080"].tflops_tensor) == (48.74, 97.5)
        assert (t["rtx3080"].tflops_fp32, t["rtx3080"].tflops_tensor) == (29.77, 59.5)
        assert (t["h100"].tflops_fp32, t["h100"].tflops_tensor) == (51.22, 756.0)
        assert (t["a100"].tflops_fp32, t["a100"].tflops_tensor) == (19.49, 155.92)

    def test_published_memory(self):
        mem = {k: v.memory_gb for k, v in hw.GPU_TABLE.items()}
        assert mem == {"rtx4090": 24, "rtx4080": 16, "rtx3080": 10,
                       "h100": 80, "a100": 80}

    def test_peak_flops_column_select(self):
        assert hw.gpu_peak_flops(hw.GPU_TABLE["h100"], "tensor") == 756e12
        assert hw.gpu_peak_flops(hw.GPU_TABLE["h100"], "fp32") == 51.22e12
        with pytest.raises(FleetError, match="compute column"):
            hw.gpu_peak_flops(hw.GPU_TABLE["h100"], "int8")


class TestLambdaFit:
    def test_single_exact_sample(self):
        peer = hw.Peer("p", peak_flops=1e12)
        f = 1e10
        lam = hw.fit_lambda([(f, f / (1e12 * 0.45))], peer)
        assert lam == pytest.approx(0.45, rel=1e-12)

    def test_noisy_recovery_within_five_percent(self):
        # 1% multiplicative timing noise on 200 probe measurements
        peer = hw.Peer("p", peak_flops=2e13)
        rng = np.random.default_rng(5)
        true_lam = 0.45
        flops = rng.uniform(1e9, 1e12, size=200)
        times = flops / (peer.peak_flops * true_lam) * (1 + rng.uniform(-0.01, 0.01, 200))
        lam = hw.fit_lambda(list(zip(flops, times)), peer)
        assert abs(lam - true_lam) / true_lam <= 0.05

    def test_clamped_to_one(self):
        peer = hw.Peer("p", peak_flops=1e12)
        assert hw.fit_lambda([(1e12, 0.1)], peer) == 1.0

    def test_rejects_bad_samples(self):
        peer = hw.Peer("p", peak_flops=1e12)
        with pytest.raises(FleetError, match="at least one sample"):
            hw.fit_lambda([], peer)
        with pytest.raises(FleetError, match="positive measured times"):
            hw.fit_lambda([(1e9, 0.0)], peer)
        with pytest.raises(FleetError, match="degenerate"):
            hw.fit_lambda([(0.0, 1.0)], peer)


class TestOpAndCellTiming:
    def test_op_time_remote_parent(self, demo_graph, trio_fleet):
        placement = demo_graph.placement
        cost = hw.op_time(demo_graph, "Multiply", trio_fleet, placement)
        # Add arrives from peer 1 over the overridden 0.02 Gbit/s link
        assert cost.read_s == pytest.approx(0.001 + (8.0 / 2e7) * 3072, abs=0)
        assert cost.compute_s == pytest.approx(768 / (1e6 * 0.9), rel=1e-12)
        assert cost.write_s == 0.0  # infinite write bandwidth by default
        assert cost.total_s == cost.read_s + cost.compute_s + cost.write_s

    def test_op_time_local_parents_cost_nothing(self, demo_graph, trio_fleet):
        cost = hw.op_time(demo_graph, "Conv", trio_fleet, demo_graph.placement)
        assert cost.read_s == 0.0
        assert cost.compute_s == pytest.approx(41472 / 2e6, rel=1e-12)

    def test_op_time_write_term(self, demo_graph, trio_fleet):
        slow_writer = hw.Peer("1", peak_flops=2e6, write_bandwidth=1024.0)
        fleet = hw.Fleet(dict(trio_fleet.peers, **{"1": slow_writer}),
                         default_link=trio_fleet.default_link,
                         links=trio_fleet.links)
        cost = hw.op_time(demo_graph, "Pool", fleet, demo_graph.placement)
        # Pool output (4, 3, 4, 4) leaves peer 1 for Concat on peer 3
        assert cost.write_s == pytest.approx(192 * 4 / 1024.0, abs=0)

    def test_subgraph_time_bounds(self, demo_graph, trio_fleet):
        t = hw.subgraph_time(demo_graph, ("TensorA", "Multiply"),
                             trio_fleet, demo_graph.placement)
        multiply = hw.op_time(demo_graph, "Multiply", trio_fleet, demo_graph.placement)
        assert t.lower_s == pytest.approx(multiply.total_s, abs=0)
        assert t.upper_s == t.sequential_s == pytest.approx(multiply.total_s, abs=0)
        assert hw.subgraph_time(demo_graph, (), trio_fleet, {}) == (0.0, 0.0, 0.0)


class TestMemoryFootprint:
    def test_single_add_node(self):
        doc = {"nodes": [
            {"name": "X", "type": "placeholder", "shape": [4, 32, 32], "users": ["S"]},
            {"name": "Y", "type": "placeholder", "shape": [4, 32, 32], "users": ["S"]},
            {"name": "S", "type": "non_parametric", "op_class": "add",
             "args": ["X", "Y"], "users": []},
        ]}
        g = ir.parse_job_definition(doc)
        fp = hw.memory_footprint(g, ["S"])
        # output plus both retained inputs, 4 bytes per element, no params
        assert fp.gpu_bytes == 4 * (4096 * 3)
        assert fp.disk_bytes == 0
        assert fp.cpu_bytes > 0  # cell description is serialized to host memory

    def test_parametric_cell(self, demo_graph):
        fp = hw.memory_footprint(demo_graph, ("Input", "Conv", "Add", "Pool"))
        assert fp.gpu_bytes == 22608
        assert fp.disk_bytes == 4 * 84  # conv weight 81 + bias 3
        assert fp.cpu_bytes > fp.disk_bytes

    def test_footprint_is_additive_in_params(self, demo_graph):
        solo = hw.memory_footprint(demo_graph, ("Linear",))
        # weight (240, 2) + bias (2,)
        assert solo.disk_bytes == 4 * (240 * 2 + 2)


class TestFleetFile:
    def test_trio_round_trip(self, trio_fleet):
        assert trio_fleet.name == "trio"
        assert trio_fleet.peer_ids() == ("1", "2", "3", "4")
        assert trio_fleet.worker_ids() == ("1", "2", "3")  # 4 is held in reserve
        assert trio_fleet.peer("1").peak_flops == pytest.approx(2e6)
        assert trio_fleet.peer("2").lam == 0.9
        assert trio_fleet.peer("3").gpu_bytes == 2**30

    def test_link_lookup_order(self, trio_fleet):
        override = trio_fleet.link_between("1", "2")
        assert (override.alpha, override.beta) == (0.001, 8.0 / 2e7)
        assert trio_fleet.link_between("2", "1") == override  # reversed pair
        default = trio_fleet.link_between("1", "3")
        assert (default.alpha, default.beta) == (0.002, 8.0 / 1e7)
        assert trio_fleet.link_between("2", "2") == hw.ZERO_LINK

    def test_with_default_link_clears_overrides(self, trio_fleet):
        flat = trio_fleet.with_default_link(hw.Link(0.0, 1e-9))
        assert flat.links == {}
        assert flat.link_between("1", "2") == hw.Link(0.0, 1e-9)
        assert trio_fleet.links  # original untouched

    def test_gpu_key_fills_peer_fields(self):
        fleet = hw.parse_fleet({"peers": [{"id": "g", "gpu": "rtx3080"}]})
        peer = fleet.peer("g")
        assert peer.peak_flops == 59.5e12  # tensor column by default
        assert peer.gpu_bytes == 10 * 2**30
        fp32 = hw.parse_fleet({"peers": [{"id": "g", "gpu": "rtx3080"}]},
                              compute_column="fp32")
        assert fp32.peer("g").peak_flops == 29.77e12

    def test_explicit_tflops_beats_gpu_key(self):
        fleet = hw.parse_fleet(
            {"peers": [{"id": "g", "gpu": "rtx3080", "tflops_tensor": 1.0}]})
        assert fleet.peer("g").peak_flops == 1e12

    def test_duplicate_peer_rejected(self):
        with pytest.raises(FleetError, match="duplicate peer id"):
            hw.parse_fleet({"peers": [{"id": "1", "tflops_tensor": 1.0},
                                      {"id": "1", "tflops_tensor": 1.0}]})

    def test_unknown_gpu_rejected(self):
        with pytest.raises(FleetError, match="unknown gpu"):
            hw.parse_fleet({"peers": [{"id": "1", "gpu": "rtx9999"}]})

    def test_backup_pool_must_exist(self):
        with pytest.raises(FleetError, match="backup pool"):
            hw.parse_fleet({"peers": [{"id": "1", "tflops_tensor": 1.0}],
                            "backup_pool": ["9"]})

    def test_link_override_endpoints_checked(self):
        doc = {"peers": [{"id": "1", "tflops_tensor": 1.0}],
               "links": {"overrides": [{"src": "1", "dst": "9"}]}}
        with pytest.raises(FleetError, match="unknown peer '9'"):
            hw.parse_fleet(doc)

    def test_bandwidth_in_bytes_per_second(self):
        doc = {"peers": [{"id": "1", "tflops_tensor": 1.0}],
               "links": {"default_alpha_s": 0.01, "default_beta_bytes_per_s": 1e8}}
        fleet = hw.parse_fleet(doc)
        assert fleet.default_link == hw.Link(0.01, 1e-8)

    def test_pinned_runs_are_one_based_in_the_file(self):
        doc = {"peers": [{"id": "1", "tflops_tensor": 1.0}],
               "pinned_runs": [[1, 2], [3]]}
        fleet = hw.parse_fleet(doc)
        assert fleet.pinned_runs == ((0, 1), (2,))

    def test_write_bandwidth_parsed(self):
        doc = {"peers": [{"id": "1", "tflops_tensor": 1.0,
                          "write_bandwidth_bytes_per_s": 5e8}]}
        assert hw.parse_fleet(doc).peer("1").write_bandwidth == 5e8
        assert hw.parse_fleet({"peers": [{"id": "1", "tflops_tensor": 1.0}]}
                              ).peer("1").write_bandwidth == math.inf
