"""Exception types shared by the simulator modules.

The command line maps each family to an exit code (see ``pedmr_sim.main``).
"""
from typing import List, Sequence


class PedmrError(Exception):
    """Base class for every error raised by pedmr_sim."""


class InvalidArgumentError(PedmrError, ValueError):
    """Non-finite matrices, negative durations or unphysical parameters."""


class DegenerateStateError(PedmrError, ValueError):
    """A state that cannot be normalised (zero trace)."""


class ConfigurationError(PedmrError, ValueError):
    """Invalid run configuration, spectral model or missing input file."""


class SequenceParseError(PedmrError, ValueError):
    """Raised by the DSL parser; carries every diagnostic it collected."""

    def __init__(self, diagnostics: Sequence["object"]):
        self.diagnostics: List[object] = list(diagnostics)
        lines = "; ".join(str(d) for d in self.diagnostics)
        super().__init__(f"{len(self.diagnostics)} sequence diagnostic(s): {lines}")


class SequenceCompileError(PedmrError, ValueError):
    """A parsed sequence that cannot be turned into a timeline."""


class FitError(PedmrError, RuntimeError):
    """Fit failed (singular Jacobian or no convergence) in strict mode."""

    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result
