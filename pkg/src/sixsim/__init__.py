"""Discrete-event 6TiSCH network simulator with MSF and cross-layer PB cell scheduling."""

from .config import ConfigError, ScenarioConfig, load_scenario, parse_scenario
from .engine import InvariantViolation, RunResult, Simulation, run

__all__ = ["ConfigError", "InvariantViolation", "RunResult", "ScenarioConfig", "Simulation",
           "load_scenario", "parse_scenario", "run"]
__version__ = "0.1.0"
