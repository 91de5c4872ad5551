"""Scenario DSL, runner, ownership oracle, fuzzer and command line."""

from .dsl import ArityMismatch, Expect, ParseError, Scenario, Step, UnknownOp, parse_scenario
from .runner import Outcome, Report, replay_trace, run_scenario, scenario_from_trace

__all__ = [
    "ArityMismatch", "Expect", "ParseError", "Scenario", "Step", "UnknownOp", "parse_scenario",
    "Outcome", "Report", "replay_trace", "run_scenario", "scenario_from_trace",
]
