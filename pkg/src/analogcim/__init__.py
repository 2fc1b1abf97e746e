"""Train, deploy and cost tiny networks on a simulated PCM compute-in-memory array.

The main entry points:

* :mod:`analogcim.tensor_net` - network description, reference forward pass, IM2COL;
* :mod:`analogcim.pcm` - programming noise, drift, read noise and drift compensation;
* :mod:`analogcim.converters` - DAC/ADC quantizers and the shared ADC gain;
* :mod:`analogcim.mapper` - weight-to-conductance mapping and tile placement;
* :mod:`analogcim.perf` - latency, energy, area and energy-constant calibration;
* :mod:`analogcim.train` - hardware-aware two-stage training;
* :mod:`analogcim.simulator` - multi-run deployment and evaluation.
"""

from .errors import (AnalogCimError, CalibrationError, ConfigurationError, DegenerateLayerError, DimensionError,
                     DomainError, FixtureError, MappingError, TrainingError)
from .mapper import CrossbarConfig, MappingPlan, place
from .pcm import ConductanceState, NoiseParams
from .perf import EnergyParams, TimingParams, calibrate_energy, model_perf, peak_throughput
from .simulator import DeploymentTimes, EvalProtocol, evaluate, prepare_converters
from .tensor_net import LayerSpec, NetworkSpec, forward, load_network, save_network

__version__ = "0.1.0"

__all__ = [
    "AnalogCimError", "CalibrationError", "ConductanceState", "ConfigurationError", "CrossbarConfig",
    "DegenerateLayerError", "DeploymentTimes", "DimensionError", "DomainError", "EnergyParams", "EvalProtocol",
    "FixtureError", "LayerSpec", "MappingError", "MappingPlan", "NetworkSpec", "NoiseParams", "TimingParams",
    "TrainingError", "calibrate_energy", "evaluate", "forward", "load_network", "model_perf",
    "peak_throughput", "place", "prepare_converters", "save_network",
]
