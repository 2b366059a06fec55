"""Two-step partially synchronous BFT consensus with a deterministic simulator and trace auditor."""

from .auditor import audit, load_trace, parse_trace
from .client import Client
from .core import Config
from .replica import Replica
from .scenario import bundled_scenarios, load_scenario, loads_scenario, resolve
from .simnet import NetModel, Scenario, World, run

__all__ = [
    "Client",
    "Config",
    "NetModel",
    "Replica",
    "Scenario",
    "World",
    "audit",
    "bundled_scenarios",
    "load_scenario",
    "load_trace",
    "loads_scenario",
    "parse_trace",
    "resolve",
    "run",
]
__version__ = "0.1.0"
