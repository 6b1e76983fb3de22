"""Joint transceiver and RIS phase-shift optimization for multi-RIS
assisted cell-free uplink MIMO, with a Monte-Carlo WMMSE engine and a
statistics-only deterministic-equivalent engine that cross-validate."""

from .config import SystemConfig, ConfigError, dbm_to_watt, watt_to_dbm
from .scenario import make_scenario, generate_layout, generate_statistics
from .detection import TransceiverState, identity_state, achievable_rate_mc
from .wmmse_mc import ao_loop, McAoOptions
from .asym_ao import algorithm1, AsymAoOptions
from .freeprob import CauchySolver, SolverConfig, cauchy_transform
from .experiments import ExperimentConfig, presets, run

__version__ = "0.1.0"

__all__ = [
    "SystemConfig", "ConfigError", "dbm_to_watt", "watt_to_dbm",
    "make_scenario", "generate_layout", "generate_statistics",
    "TransceiverState", "identity_state", "achievable_rate_mc",
    "ao_loop", "McAoOptions", "algorithm1", "AsymAoOptions",
    "CauchySolver", "SolverConfig", "cauchy_transform",
    "ExperimentConfig", "presets", "run",
]
