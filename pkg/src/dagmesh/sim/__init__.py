"""Runtime simulation: event loop, per-peer executors, checkpoint store."""

from .dht import DhtStore
from .executor import PeerRuntime
from .loop import (EventKind, LoggedEvent, ScenarioEvent, SimConfig, SimReport,
                   default_scenario, events_to_csv, load_scenario,
                   parse_scenario, placement_from_cells, placement_report,
                   run_simulation)

__all__ = [
    "DhtStore", "PeerRuntime", "EventKind", "LoggedEvent", "ScenarioEvent",
    "SimConfig", "SimReport", "default_scenario", "events_to_csv",
    "load_scenario", "parse_scenario", "placement_from_cells",
    "placement_report", "run_simulation",
]
