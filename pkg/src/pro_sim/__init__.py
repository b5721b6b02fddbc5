"""Simulation of programmable ring-oscillator on-chip sensing: supply-mesh
modelling, counter-based frequency readout, fault localization, and
side-channel hiding evaluation.

The usual entry points:

- scenario.load_scenario / scenario.scenario_from_dict for configuration
- engine.run_* for the sensing and fault experiments
- sca.synthesize_traces and friends for the hiding evaluation
- cli.main for the command-line surface
"""

__version__ = "0.1.0"

from .errors import (
    CalibrationError,
    ConvergenceError,
    InputError,
    InternalError,
    OscillatorStalled,
    ProSimError,
)
from .scenario import Scenario, load_scenario, packaged_scenario_path, scenario_from_dict

__all__ = [
    "__version__",
    "CalibrationError",
    "ConvergenceError",
    "InputError",
    "InternalError",
    "OscillatorStalled",
    "ProSimError",
    "Scenario",
    "load_scenario",
    "packaged_scenario_path",
    "scenario_from_dict",
]
