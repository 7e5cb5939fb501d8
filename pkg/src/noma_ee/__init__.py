"""Energy-efficient semi-grant-free NOMA uplink with multi-agent deep RL.

Modules: ``system_model`` (cell, channels, rates, constraints), ``power_opt``
(Dinkelbach power control), ``nn`` (NumPy MLP and Adam), ``agents`` (MADQN
and tabular Q-learning), ``trainer`` (episode loop) and ``experiment``/``cli``
(spec files, sweeps, CSV output).
"""

from .agents import ActionSpace, Scheme, decode_action, power_levels
from .experiment import ExperimentSpec, load_config, parse_spec, run_experiment
from .nn import NetConfig, NetworkParams
from .power_opt import dinkelbach_allocate, optimize_embb_power, optimize_mmtc_power, optimize_urllc_power
from .system_model import (
    AllocationState,
    Cell,
    ChannelRealization,
    NetworkConfig,
    check_constraints,
    ee_factor,
    generate_channels,
)
from .trainer import EpisodeConfig, detect_convergence, run_training

__version__ = "0.1.0"

__all__ = [
    "ActionSpace", "AllocationState", "Cell", "ChannelRealization", "EpisodeConfig", "ExperimentSpec",
    "NetConfig", "NetworkConfig", "NetworkParams", "Scheme", "check_constraints", "decode_action",
    "detect_convergence", "dinkelbach_allocate", "ee_factor", "generate_channels", "load_config",
    "optimize_embb_power", "optimize_mmtc_power", "optimize_urllc_power", "parse_spec",
    "power_levels", "run_experiment", "run_training",
]
