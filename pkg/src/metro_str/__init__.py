"""Service-oriented regulation of a single-direction metro line.

A passenger-flow module re-optimises the line headway whenever a platform
overcrowds, and a train-operation module regulates departure-time
deviations with a box-constrained quadratic program. ``run`` drives both on
a deterministic departure-event simulation.
"""

from metro_str.model_core import (
    RevertPolicy,
    Scenario,
    ScenarioError,
    Timetable,
    build_nominal_timetable,
    delay_rate_from_demand,
    run_bounds_from_fractions,
    validate_scenario,
)
from metro_str.engine import FIXED, STR, EventTrace, RunOptions, compare_modes, run
from metro_str.scenario_io import load_scenario, save_scenario

__all__ = [
    "FIXED",
    "STR",
    "EventTrace",
    "RunOptions",
    "RevertPolicy",
    "Scenario",
    "ScenarioError",
    "Timetable",
    "build_nominal_timetable",
    "compare_modes",
    "delay_rate_from_demand",
    "load_scenario",
    "run",
    "run_bounds_from_fractions",
    "save_scenario",
    "validate_scenario",
]

__version__ = "0.1.0"
