"""Simulator for LLM inference split between a GPU cluster and PIM-enabled DIMM host memory."""

from .config import MODELS, SimConfig, default_config, load_config
from .sim import POLICIES, RunMetrics, run_simulation
from .trace import Trace, load_trace, named_trace, synth_trace

__all__ = [
    "MODELS", "POLICIES", "RunMetrics", "SimConfig", "Trace", "default_config", "load_config", "load_trace",
    "named_trace", "run_simulation", "synth_trace",
]
__version__ = "0.1.0"
