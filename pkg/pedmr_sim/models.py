"""
Run configuration: pydantic models for the key=value config files.
"""
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Union

import numpy as np
from pydantic import BaseModel, Extra, Field, ValidationError, root_validator, validator

from .config import DEFAULT_POINTS, OUTPUT_DIR, read_key_values
from .detector import BoxcarWindow, TransientKernel
from .ensemble import QuadratureSpec
from .errors import ConfigurationError
from .spin_core import PairParams

logger = logging.getLogger(__name__)

EXPERIMENTS = ("rabi", "echo-map", "echo-decay", "spectrum", "inversion-recovery", "sequence")


class _Settings(BaseModel):
    class Config:
        extra = Extra.forbid
        validate_assignment = True


def _finite_non_negative(value: float) -> float:
    if not math.isfinite(value) or value < 0:
        raise ValueError(f"must be finite and >= 0, got {value}")
    return value


def _positive(value: float) -> float:
    if not math.isfinite(value) or value <= 0:
        raise ValueError(f"must be finite and > 0, got {value}")
    return value


def grid(start: float, stop: float, step: float) -> np.ndarray:
    """Inclusive start..stop grid; stop is kept when it lies on the lattice."""
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return np.round(start + step * np.arange(count), 15)


class PairSettings(_Settings):
    """Rates in 1/s, exchange in rad/s."""

    r_s: float = 2.3e6
    r_t: float = 1 / 140e-6
    gamma_phi: float = 0.0
    j_ex: float = 0.0

    _rates = validator("r_s", "r_t", "gamma_phi", allow_reuse=True)(_finite_non_negative)

    @validator("j_ex")
    def _finite(cls, value):
        if not math.isfinite(value):
            raise ValueError("must be finite")
        return value

    def to_params(self) -> PairParams:
        return PairParams(r_s=self.r_s, r_t=self.r_t, gamma_phi=self.gamma_phi, j_ex=self.j_ex).validate()


class QuadratureSettings(_Settings):
    scheme: Literal["gauss-hermite", "monte-carlo", "uniform"] = "gauss-hermite"
    points_per_spin: int = Field(DEFAULT_POINTS, ge=1)
    weight_floor: float = Field(1e-12, ge=0, lt=1)
    points_spin_b: Optional[int] = Field(None, ge=1)
    # re-run the largest-|Q| point with doubled nodes and report the change
    convergence_check: bool = True

    def to_spec(self, seed: int) -> QuadratureSpec:
        return QuadratureSpec(
            self.scheme, self.points_per_spin, seed, self.weight_floor, points_spin_b=self.points_spin_b
        ).validate()


class KernelSettings(_Settings):
    tau_rise: float = 3e-6
    tau_fall: float = 11e-6
    tau_slow: float = 140e-6
    overshoot: float = 0.3
    gain: float = 1.0
    repetition_time: float = 350e-6

    _times = validator("tau_rise", "tau_fall", "tau_slow", "repetition_time", allow_reuse=True)(_positive)

    @root_validator(skip_on_failure=True)
    def _ordered(cls, values):
        if not values["tau_rise"] < values["tau_fall"] < values["tau_slow"]:
            raise ValueError("need tau_rise < tau_fall < tau_slow")
        return values

    def to_kernel(self) -> TransientKernel:
        return TransientKernel(self.tau_rise, self.tau_fall, self.tau_slow, self.overshoot, self.gain).validate()


class BoxcarSettings(_Settings):
    t_start: float = 2e-6
    t_end: float = 22e-6

    def to_window(self) -> BoxcarWindow:
        return BoxcarWindow(self.t_start, self.t_end).validate()


class FieldGrid(_Settings):
    """Static-field sweep in tesla."""

    b0_start: float = 345e-3
    b0_stop: float = 353e-3
    b0_step: float = 0.1e-3

    @root_validator(skip_on_failure=True)
    def _range(cls, values):
        if not (values["b0_start"] > 0 and values["b0_stop"] >= values["b0_start"] and values["b0_step"] > 0):
            raise ValueError("need 0 < b0_start <= b0_stop and b0_step > 0")
        return values

    def fields(self) -> np.ndarray:
        return grid(self.b0_start, self.b0_stop, self.b0_step)


class RabiSettings(_Settings):
    b0: float = 351.2e-3
    t_max: float = 600e-9
    step: float = 2e-9
    phase: Literal["x", "y", "-x", "-y"] = "x"

    _b0 = validator("b0", "step", allow_reuse=True)(_positive)


class EchoMapSettings(FieldGrid):
    tau1: float = 200e-9
    tau2_start: float = 0.0
    tau2_stop: float = 900e-9
    tau2_step: float = 10e-9
    # points with tau2 >= tau1 + plateau_margin define the reference level
    plateau_margin: float = 150e-9

    _tau2_step = validator("tau2_step", "plateau_margin", allow_reuse=True)(_positive)


class EchoDecaySettings(_Settings):
    b0: float = 351.2e-3
    tau_start: float = 100e-9
    tau_stop: float = 2.5e-6
    tau_step: float = 100e-9
    offset_stop: float = 300e-9
    offset_step: float = 50e-9
    baseline_offset: float = 200e-9

    _steps = validator("b0", "tau_step", "offset_step", allow_reuse=True)(_positive)

    @root_validator(skip_on_failure=True)
    def _reference_points(cls, values):
        offsets = grid(0.0, values["offset_stop"], values["offset_step"])
        if np.count_nonzero(offsets >= values["baseline_offset"] - 1e-15) < 2:
            raise ValueError("need at least two offsets at or beyond baseline_offset")
        return values


class SpectrumSettings(FieldGrid):
    b0_step: float = 0.05e-3
    angle_deg: float = 180.0

    _angle = validator("angle_deg", allow_reuse=True)(_positive)


class InversionRecoverySettings(_Settings):
    b0: float = 351.2e-3
    t_start: float = 0.0
    t_stop: float = 5e-6
    t_step: float = 100e-9
    probe_tau: float = 200e-9

    _steps = validator("b0", "t_step", "probe_tau", allow_reuse=True)(_positive)


class SequenceRunSettings(FieldGrid):
    """Field sweep for a custom .pseq program; a single field by default."""

    b0_start: float = 351.2e-3
    b0_stop: float = 351.2e-3
    b0_step: float = 0.1e-3
    path: Optional[Path] = None


class RunConfig(_Settings):
    experiment: Literal["rabi", "echo-map", "echo-decay", "spectrum", "inversion-recovery", "sequence"] = "rabi"
    spectral_model: Optional[Path] = None
    b1_t: Optional[float] = None
    output_dir: Path = OUTPUT_DIR
    seed: int = 0
    signal_weighting: Literal["normalized", "survivors"] = "survivors"
    omega1_leak: float = 0.0

    pair: PairSettings = Field(default_factory=PairSettings)
    quadrature: QuadratureSettings = Field(default_factory=QuadratureSettings)
    kernel: KernelSettings = Field(default_factory=KernelSettings)
    boxcar: BoxcarSettings = Field(default_factory=BoxcarSettings)
    rabi: RabiSettings = Field(default_factory=RabiSettings)
    echo_map: EchoMapSettings = Field(default_factory=EchoMapSettings)
    echo_decay: EchoDecaySettings = Field(default_factory=EchoDecaySettings)
    spectrum: SpectrumSettings = Field(default_factory=SpectrumSettings)
    inversion_recovery: InversionRecoverySettings = Field(default_factory=InversionRecoverySettings)
    sequence: SequenceRunSettings = Field(default_factory=SequenceRunSettings)

    _leak = validator("omega1_leak", allow_reuse=True)(_finite_non_negative)

    @validator("b1_t")
    def _b1(cls, value):
        if value is not None:
            _finite_non_negative(value)
        return value

    @validator("spectral_model")
    def _model_exists(cls, value):
        if value is not None and not Path(value).is_file():
            raise ValueError(f"spectral model file not found: {value}")
        return value

    @root_validator(skip_on_failure=True)
    def _sequence_file(cls, values):
        sequence = values.get("sequence")
        if values.get("experiment") == "sequence":
            if sequence is None or sequence.path is None:
                raise ValueError("the sequence experiment needs sequence.path")
            if not Path(sequence.path).is_file():
                raise ValueError(f"sequence file not found: {sequence.path}")
        return values

    def to_key_values(self) -> str:
        """Flat key=value text that load_run_config reads back to an equal config."""
        lines: List[str] = []
        for key, value in self.dict().items():
            if isinstance(value, dict):
                lines += [_kv(f"{key}.{sub}", v) for sub, v in value.items() if v is not None]
            elif value is not None:
                lines.append(_kv(key, value))
        return "\n".join(lines) + "\n"


def _kv(key: str, value: Any) -> str:
    if isinstance(value, bool):
        return f"{key}={str(value).lower()}"
    if isinstance(value, float):
        return f"{key}={float(value)!r}"
    return f"{key}={value}"


def nest(values: Mapping[str, Any]) -> Dict[str, Any]:
    """Turn dotted keys into one level of nested sections."""
    nested: Dict[str, Any] = {}
    for key, value in values.items():
        parts = key.split(".")
        if len(parts) == 1:
            nested[key] = value
        elif len(parts) == 2 and all(parts):
            section = nested.setdefault(parts[0], {})
            if not isinstance(section, dict):
                raise ConfigurationError(f"{parts[0]!r} is both a value and a section")
            section[parts[1]] = value
        else:
            raise ConfigurationError(f"invalid config key {key!r}")
    return nested


def load_run_config(
    path: Union[str, Path, None] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """
    Build a RunConfig from defaults, an optional key=value file and flag overrides.

    Relative file references are resolved against the config file's
    directory when they do not exist relative to the working directory.

    Raises:
        ConfigurationError: if the file is missing or any value fails validation
    """
    values: Dict[str, Any] = {}
    base = None
    if path is not None:
        values.update(read_key_values(path))
        base = Path(path).resolve().parent
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if base is not None:
        for key in ("spectral_model", "sequence.path"):
            if key in values:
                candidate = Path(str(values[key]))
                if not candidate.is_absolute() and not candidate.exists() and (base / candidate).exists():
                    values[key] = base / candidate
    try:
        config = RunConfig.parse_obj(nest(values))
    except ValidationError as exc:
        raise ConfigurationError(_describe(exc)) from exc
    logger.debug(f"Resolved configuration for {config.experiment}")
    return config


def _describe(exc: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(p) for p in error['loc'])}: {error['msg']}" for error in exc.errors()
    )
