"""Shared fixtures: the demo job and small fleets used across test modules."""

import json
import pathlib

import pytest

from dagmesh import hardware, ir

ROOT = pathlib.Path(__file__).resolve().parent.parent
DEMO_JOB = ROOT / "jobs" / "demo.json"
TRIO_FLEET = ROOT / "fleets" / "trio.json"
QUIT_SCENARIO = ROOT / "scenarios" / "quit_and_recover.json"

# one verdict line per acceptance check, echoed after the test table
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def demo_path() -> pathlib.Path:
    return DEMO_JOB


@pytest.fixture(scope="session")
def trio_path() -> pathlib.Path:
    return TRIO_FLEET


@pytest.fixture(scope="session")
def quit_scenario_path() -> pathlib.Path:
    return QUIT_SCENARIO


@pytest.fixture()
def demo_graph() -> ir.Graph:
    return ir.load_job(DEMO_JOB)


@pytest.fixture()
def demo_dict() -> dict:
    with open(DEMO_JOB) as fh:
        return json.load(fh)


@pytest.fixture()
def trio_fleet() -> hardware.Fleet:
    return hardware.load_fleet(TRIO_FLEET)
