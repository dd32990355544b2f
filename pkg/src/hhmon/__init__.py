"""Hand-hygiene monitoring: controller, simulator, telemetry and ingest."""

from .core import (
    ConfigError,
    Controller,
    ControllerConfig,
    CounterState,
    DataPoint,
    EventKind,
    HygieneRate,
    OrderingError,
    compute_rate,
    controller_init,
)
from .detect import DetectorConfig, Direction, DoorDetector, classify, pair_trips
from .sim import Scenario, ScenarioError, generate_trace, load_scenario, oracle_counters, run

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "Controller",
    "ControllerConfig",
    "CounterState",
    "DataPoint",
    "DetectorConfig",
    "Direction",
    "DoorDetector",
    "EventKind",
    "HygieneRate",
    "OrderingError",
    "Scenario",
    "ScenarioError",
    "classify",
    "compute_rate",
    "controller_init",
    "generate_trace",
    "load_scenario",
    "oracle_counters",
    "pair_trips",
    "run",
]
