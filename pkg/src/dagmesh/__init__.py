"""Planner and simulator for DAG jobs spread across a fleet of peers.

The package splits into layers: `ops` (operator catalog), `ir` (graph
representation and job files), `hardware` (peers, links, timing, memory),
`scheduling` (stage assignment), `pipeline` (latency and throughput,
reference models), `reference` (single-host execution), `sim` (the
event-level runtime), and `cli`.
"""

from .errors import (CatalogError, DagmeshError, FleetError, JobError,
                     SchedulingError, SimulationError)
from .hardware import (GPU_TABLE, Fleet, GpuSpec, Link, Peer, Role,
                       bandwidth_to_beta, comm_time, effective_speed,
                       fit_lambda, load_fleet, memory_footprint, op_time,
                       parse_fleet, subgraph_time)
from .ir import (Graph, OpKind, OpNode, SubGraph, decompose,
                 derive_backward_view, load_job, parse_job_definition)
from .pipeline import (MODELS, ReferenceModel, StageProfile,
                       asymptotic_throughput, build_bert_large, build_gpt3_24,
                       fp_latency, pipeline_time, profiles_from_report, sweep,
                       throughput)
from .reference import centralized_train, init_params
from .scheduling import (ScheduleReport, Stage, brute_force_schedule,
                         build_stages, reschedule_on_failure, schedule,
                         topological_cells, verify_assignment)
from .sim import SimConfig, SimReport, run_simulation

__version__ = "0.1.0"

__all__ = [
    "CatalogError", "DagmeshError", "FleetError", "JobError",
    "SchedulingError", "SimulationError",
    "GPU_TABLE", "Fleet", "GpuSpec", "Link", "Peer", "Role",
    "bandwidth_to_beta", "comm_time", "effective_speed", "fit_lambda",
    "load_fleet", "memory_footprint", "op_time", "parse_fleet",
    "subgraph_time",
    "Graph", "OpKind", "OpNode", "SubGraph", "decompose",
    "derive_backward_view", "load_job", "parse_job_definition",
    "MODELS", "ReferenceModel", "StageProfile", "asymptotic_throughput",
    "build_bert_large", "build_gpt3_24", "fp_latency", "pipeline_time",
    "profiles_from_report", "sweep", "throughput",
    "centralized_train", "init_params",
    "ScheduleReport", "Stage", "brute_force_schedule", "build_stages",
    "reschedule_on_failure", "schedule", "topological_cells",
    "verify_assignment",
    "SimConfig", "SimReport", "run_simulation",
    "__version__",
]
