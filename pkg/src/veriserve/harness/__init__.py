"""Deterministic end-to-end simulation: scenarios, runner, traces, reports."""

from .scenario import Scenario, ScenarioError, load_scenario, scenario_from_dict, scenario_path
from .runner import ScenarioRunner, run_scenario
from .trace import TraceLog, diff_traces
from .report import RunReport, write_outputs

__all__ = [
    "Scenario",
    "ScenarioError",
    "load_scenario",
    "scenario_from_dict",
    "scenario_path",
    "ScenarioRunner",
    "run_scenario",
    "TraceLog",
    "diff_traces",
    "RunReport",
    "write_outputs",
]
