"""Pulsed EDMR simulator for weakly coupled spin pairs."""
from .config import VERSION as __version__
from .ensemble import QuadratureSpec, SpectralLine, SpectralModel, Species, average_q
from .experiments import ExperimentResult, ExperimentRunner
from .models import RunConfig, load_run_config
from .spin_core import PairParams, PairState

__all__ = [
    "ExperimentResult",
    "ExperimentRunner",
    "PairParams",
    "PairState",
    "QuadratureSpec",
    "RunConfig",
    "SpectralLine",
    "SpectralModel",
    "Species",
    "__version__",
    "average_q",
    "load_run_config",
]
