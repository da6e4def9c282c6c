"""
Inhomogeneously broadened spectral lines and ensemble averaging of pair signals.

Each pair couples one P donor spin (spin a) with one P_b0 interface defect
(spin b). The P spin sits in one of the two hyperfine manifolds; the P_b0 spin
on one of the two P_b0 lines. Both carry a Gaussian field offset. Averages are
taken over that joint distribution with a deterministic quadrature rule.
"""
import itertools
import logging
import math
import re
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Hashable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np

from .config import read_key_values
from .errors import ConfigurationError, InvalidArgumentError
from .sequence_dsl import Delay, Pulse, PulseSequence
from .spin_core import (
    PairParams,
    PairState,
    Weighting,
    apply_propagator,
    batched_liouvillian,
    batched_propagator,
    q_raw_batch,
)

logger = logging.getLogger(__name__)

# CODATA values used for every field/frequency conversion
PLANCK = 6.62607015e-34
HBAR = PLANCK / (2 * math.pi)
BOHR_MAGNETON = 9.2740100783e-24

FWHM_PER_SIGMA = 2 * math.sqrt(2 * math.log(2))
UNIFORM_SPAN_SIGMA = 4.0


class Species(str, Enum):
    P_LOW = "P-hyperfine-low"
    P_HIGH = "P-hyperfine-high"
    PB0_1 = "Pb0-1"
    PB0_2 = "Pb0-2"

    @property
    def family(self) -> str:
        """'P' for the donor hyperfine lines, 'Pb0' for the interface defect lines."""
        return "P" if self.value.startswith("P-") else "Pb0"


FAMILIES = ("P", "Pb0")


def resonance_field(g: float, f_mw: float) -> float:
    """
    Field at which a spin with g-factor ``g`` is resonant with ``f_mw``.

    Args:
        g: g-factor (dimensionless)
        f_mw: microwave frequency in Hz

    Returns:
        Resonance field in tesla, h·f/(g·μ_B)

    Raises:
        InvalidArgumentError: if g or f_mw is not positive
    """
    if not g > 0 or not f_mw > 0:
        raise InvalidArgumentError(f"g and f_mw must be positive, got g={g}, f_mw={f_mw}")
    return PLANCK * f_mw / (g * BOHR_MAGNETON)


def gyromagnetic_ratio(g: float) -> float:
    """Angular frequency per tesla, g·μ_B/ħ."""
    return g * BOHR_MAGNETON / HBAR


@dataclass(frozen=True)
class SpectralLine:
    species: Species
    g_center: float
    field_offset: float
    fwhm: float
    weight: float

    def __post_init__(self):
        object.__setattr__(self, "species", Species(self.species))

    @property
    def sigma(self) -> float:
        return self.fwhm / FWHM_PER_SIGMA

    def center_field(self, f_mw: float) -> float:
        return resonance_field(self.g_center, f_mw) + self.field_offset

    def validate(self) -> "SpectralLine":
        if not self.g_center > 0:
            raise ConfigurationError(f"{self.species.value}: g_center must be positive")
        if not self.fwhm > 0:
            raise ConfigurationError(f"{self.species.value}: fwhm must be positive")
        if not self.weight >= 0:
            raise ConfigurationError(f"{self.species.value}: weight must be >= 0")
        if not np.isfinite(self.field_offset):
            raise ConfigurationError(f"{self.species.value}: field_offset must be finite")
        return self


def detuning(line: SpectralLine, b0: float, offset, f_mw: float):
    """
    Rotating-frame angular detuning of a spin on ``line``.

    ``offset`` is the sampled inhomogeneous field shift and may be an array.
    """
    b_res = resonance_field(line.g_center, f_mw)
    return gyromagnetic_ratio(line.g_center) * (b0 - b_res - line.field_offset - np.asarray(offset))


@dataclass(frozen=True)
class SpectralModel:
    lines: Tuple[SpectralLine, ...]
    f_mw: float = 9.765e9
    b1: float = 0.3e-3
    g_reference: float = 1.9985

    def __post_init__(self):
        object.__setattr__(self, "lines", tuple(self.lines))

    @classmethod
    def default(cls) -> "SpectralModel":
        """Two hyperfine-split P lines and the P_b0 doublet as observed at 9.765 GHz."""
        return cls(
            lines=(
                SpectralLine(Species.P_LOW, 1.9985, -2.1e-3, 0.4e-3, 0.5),
                SpectralLine(Species.P_HIGH, 1.9985, 2.1e-3, 0.4e-3, 0.5),
                SpectralLine(Species.PB0_1, 2.008, 0.0, 1.0e-3, 0.5),
                SpectralLine(Species.PB0_2, 2.004, 0.0, 1.0e-3, 0.5),
            )
        )

    @property
    def omega1(self) -> float:
        """Nominal drive gμ_B B₁/ħ used for pulse timing and for both spins."""
        return gyromagnetic_ratio(self.g_reference) * self.b1

    def family_lines(self, family: str) -> List[SpectralLine]:
        return [line for line in self.lines if line.species.family == family]

    def with_b1(self, b1: float) -> "SpectralModel":
        return replace(self, b1=b1)

    def validate(self) -> "SpectralModel":
        if not self.f_mw > 0:
            raise ConfigurationError(f"f_mw must be positive, got {self.f_mw}")
        if not self.b1 >= 0:
            raise ConfigurationError(f"b1 must be >= 0, got {self.b1}")
        if not self.g_reference > 0:
            raise ConfigurationError(f"g_reference must be positive, got {self.g_reference}")
        for line in self.lines:
            line.validate()
        for family in FAMILIES:
            members = self.family_lines(family)
            if not members:
                raise ConfigurationError(f"spectral model has no {family} line")
            total = math.fsum(line.weight for line in members)
            if abs(total - 1.0) > 1e-9:
                raise ConfigurationError(f"{family} line weights sum to {total}, expected 1")
        return self


@dataclass(frozen=True)
class QuadratureSpec:
    scheme: Literal["gauss-hermite", "monte-carlo", "uniform"] = "gauss-hermite"
    points_per_spin: int = 32
    seed: int = 0
    weight_floor: float = 1e-12
    # nodes for the P_b0 spin; None uses points_per_spin
    points_spin_b: Optional[int] = None

    @property
    def nodes(self) -> Tuple[int, int]:
        n_a = int(self.points_per_spin)
        return n_a, n_a if self.points_spin_b is None else int(self.points_spin_b)

    def doubled(self) -> "QuadratureSpec":
        """Same rule with twice the nodes on each spin."""
        n_a, n_b = self.nodes
        return replace(
            self,
            points_per_spin=2 * n_a,
            points_spin_b=None if self.points_spin_b is None else 2 * n_b,
        )

    def validate(self) -> "QuadratureSpec":
        if self.scheme not in ("gauss-hermite", "monte-carlo", "uniform"):
            raise ConfigurationError(f"unknown quadrature scheme {self.scheme!r}")
        if int(self.points_per_spin) < 1:
            raise ConfigurationError(f"points_per_spin must be >= 1, got {self.points_per_spin}")
        if self.points_spin_b is not None and int(self.points_spin_b) < 1:
            raise ConfigurationError(f"points_spin_b must be >= 1, got {self.points_spin_b}")
        if not 0 <= self.weight_floor < 1:
            raise ConfigurationError(f"weight_floor must lie in [0, 1), got {self.weight_floor}")
        return self


def standard_normal_nodes(scheme: str, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for E[f(z)], z ~ N(0, 1)."""
    if scheme == "gauss-hermite":
        x, w = np.polynomial.hermite.hermgauss(n)
        return np.sqrt(2.0) * x, w / np.sqrt(np.pi)
    if scheme == "uniform":
        if n == 1:
            return np.zeros(1), np.ones(1)
        z = np.linspace(-UNIFORM_SPAN_SIGMA, UNIFORM_SPAN_SIGMA, n)
        w = np.exp(-0.5 * z**2)
        return z, w / w.sum()
    raise InvalidArgumentError(f"no fixed nodes for scheme {scheme!r}")


@dataclass(frozen=True, eq=False)
class PairDraws:
    """Flattened pair ensemble at one field: detunings of both spins and weights."""

    delta_a: np.ndarray
    delta_b: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.weights)


def _line_arrays(lines: Sequence[SpectralLine], b0: float, f_mw: float):
    centers = np.array([detuning(line, b0, 0.0, f_mw) for line in lines])
    scales = np.array([gyromagnetic_ratio(line.g_center) * line.sigma for line in lines])
    weights = np.array([line.weight for line in lines])
    return centers, scales, weights


def pair_draws(model: SpectralModel, quad: QuadratureSpec, b0: float) -> PairDraws:
    """
    Sample the joint (spin a, spin b) detuning distribution at field ``b0``.

    Gauss-Hermite and uniform rules enumerate line pairs in model order and
    node pairs in row-major order; Monte Carlo re-seeds its generator on every
    call so all fields see the same offsets.
    """
    center_a, scale_a, weight_a = _line_arrays(model.family_lines("P"), b0, model.f_mw)
    center_b, scale_b, weight_b = _line_arrays(model.family_lines("Pb0"), b0, model.f_mw)
    n_a, n_b = quad.nodes

    if quad.scheme == "monte-carlo":
        rng = np.random.default_rng(quad.seed)
        count = n_a * n_b
        idx_a = rng.choice(len(weight_a), size=count, p=weight_a / weight_a.sum())
        z_a = rng.standard_normal(count)
        idx_b = rng.choice(len(weight_b), size=count, p=weight_b / weight_b.sum())
        z_b = rng.standard_normal(count)
        # detuning falls as the offset grows, hence the minus sign
        delta_a = center_a[idx_a] - scale_a[idx_a] * z_a
        delta_b = center_b[idx_b] - scale_b[idx_b] * z_b
        return PairDraws(delta_a, delta_b, np.full(count, 1.0 / count))

    z_a, w_a = standard_normal_nodes(quad.scheme, n_a)
    z_b, w_b = standard_normal_nodes(quad.scheme, n_b)
    parts_a, parts_b, parts_w = [], [], []
    for ia, ib in itertools.product(range(len(weight_a)), range(len(weight_b))):
        za, zb = np.meshgrid(z_a, z_b, indexing="ij")
        wa, wb = np.meshgrid(w_a, w_b, indexing="ij")
        parts_a.append((center_a[ia] - scale_a[ia] * za).ravel())
        parts_b.append((center_b[ib] - scale_b[ib] * zb).ravel())
        parts_w.append((weight_a[ia] * weight_b[ib] * wa * wb).ravel())
    delta_a = np.concatenate(parts_a)
    delta_b = np.concatenate(parts_b)
    weights = np.concatenate(parts_w)
    if quad.weight_floor > 0:
        keep = weights >= quad.weight_floor * weights.max()
        delta_a, delta_b, weights = delta_a[keep], delta_b[keep], weights[keep]
    return PairDraws(delta_a, delta_b, weights)


class _LRU:
    """Least-recently-used map with hit and miss counters; evicts the oldest entry past maxsize."""

    def __init__(self, maxsize: int):
        self.maxsize = maxsize
        self._data: "OrderedDict[Hashable, np.ndarray]" = OrderedDict()
        self.hits = 0
        self.misses = 0

    def get(self, key):
        if key in self._data:
            self._data.move_to_end(key)
            self.hits += 1
            return self._data[key]
        self.misses += 1
        return None

    def put(self, key, value):
        self._data[key] = value
        self._data.move_to_end(key)
        while len(self._data) > self.maxsize:
            self._data.popitem(last=False)


@dataclass
class EnsembleSimulator:
    """
    Evaluates compiled sequences over the pair ensemble at a given field.

    One instance is meant for one thread; make one per worker.
    """

    model: SpectralModel
    quad: QuadratureSpec
    params_base: PairParams
    weighting: Weighting = "normalized"
    omega1_leak: float = 0.0
    propagator_cache: int = 16
    state_cache: int = 128
    logger: logging.Logger = field(default_factory=lambda: logging.getLogger(__name__), repr=False)

    def __post_init__(self):
        self.model.validate()
        self.quad.validate()
        self.params_base.validate()
        if not np.isfinite(self.omega1_leak) or self.omega1_leak < 0:
            raise InvalidArgumentError(f"omega1_leak must be finite and >= 0, got {self.omega1_leak}")

    def average_q(self, sequence: PulseSequence, b0: float) -> float:
        return float(self.average_q_sweep([sequence], b0)[0])

    def average_q_sweep(self, sequences: Sequence[PulseSequence], b0: float) -> np.ndarray:
        """
        Ensemble-averaged q_raw for every sequence at field ``b0``.

        Sequences sharing leading events share their intermediate states, so a
        sweep ordered by its outer axis costs roughly one propagator per
        distinct event.
        """
        draws = pair_draws(self.model, self.quad, b0)
        generators: Dict[Tuple[float, float], np.ndarray] = {}
        propagators = _LRU(self.propagator_cache)
        states = _LRU(self.state_cache)
        steady = PairState.steady()
        initial = np.broadcast_to(steady.vector(), (len(draws), 16)).copy()

        def propagator_for(event) -> np.ndarray:
            key = _event_key(event)
            cached = propagators.get(key)
            if cached is not None:
                return cached
            if isinstance(event, Pulse):
                drive = (self.model.omega1, event.phase)
            else:
                drive = (self.omega1_leak, 0.0)
            if drive not in generators:
                generators[drive] = batched_liouvillian(
                    self.params_base, draws.delta_a, draws.delta_b, omega1=drive[0], phase=drive[1]
                )
            value = batched_propagator(generators[drive], event.duration)
            propagators.put(key, value)
            return value

        results = np.empty(len(sequences))
        for index, sequence in enumerate(sequences):
            vectors = initial
            prefix: Tuple = ()
            last = len(sequence.events) - 1
            for position, event in enumerate(sequence.events):
                prefix = prefix + (_event_key(event),)
                cached = states.get(prefix)
                if cached is not None:
                    vectors = cached
                    continue
                vectors = apply_propagator(propagator_for(event), vectors)
                if position != last:
                    states.put(prefix, vectors)
            q = q_raw_batch(vectors, steady, self.weighting)
            results[index] = math.fsum(draws.weights * q)
        self.logger.debug(
            f"b0={b0 * 1e3:.3f} mT: {len(sequences)} sequence(s), {len(draws)} draws, "
            f"propagator cache {propagators.hits} hits / {propagators.misses} misses"
        )
        return results


def _event_key(event) -> Tuple:
    if isinstance(event, Pulse):
        return ("pulse", event.duration, event.phase)
    if isinstance(event, Delay):
        return ("delay", event.duration)
    raise InvalidArgumentError(f"unknown event {event!r}")


def average_q(
    model: SpectralModel,
    quad: QuadratureSpec,
    sequence: PulseSequence,
    params_base: PairParams,
    b0: float,
    weighting: Weighting = "normalized",
    omega1_leak: float = 0.0,
) -> float:
    """
    Weighted mean of q_raw over the pair ensemble for one compiled sequence.

    Args:
        model: spectral lines, microwave frequency and B1
        quad: quadrature rule for the inhomogeneous offsets
        sequence: compiled pulse sequence
        params_base: rates and coupling shared by all pairs (detunings ignored)
        b0: static field in tesla
        weighting: how lost pairs enter q_raw (see spin_core.q_raw)
        omega1_leak: drive leaking through the switch during delays, rad/s

    Raises:
        ConfigurationError: if a species has no line or the model is invalid
    """
    simulator = EnsembleSimulator(model, quad, params_base, weighting=weighting, omega1_leak=omega1_leak)
    return simulator.average_q(sequence, b0)


# ---------------------------------------------------------------------------
# Spectral model files
# ---------------------------------------------------------------------------

_LINE_KEY = re.compile(r"^line\.(\d+)\.(species|g_center|field_offset_t|fwhm_t|weight)$")
_MODEL_KEYS = {"f_mw_hz": "f_mw", "b1_t": "b1", "g_reference": "g_reference"}


def load_spectral_model(path: Union[str, Path]) -> SpectralModel:
    """
    Read a spectral model from a key=value file.

    Raises:
        ConfigurationError: on missing files, unknown keys, incomplete lines or
            invalid values
    """
    values = read_key_values(path)
    top: Dict[str, float] = {}
    lines: Dict[int, Dict[str, str]] = {}
    for key, raw in values.items():
        if key in _MODEL_KEYS:
            top[_MODEL_KEYS[key]] = _as_float(key, raw)
            continue
        match = _LINE_KEY.match(key)
        if not match:
            raise ConfigurationError(f"{path}: unknown key {key!r}")
        lines.setdefault(int(match.group(1)), {})[match.group(2)] = raw

    parsed = []
    for number in sorted(lines):
        entry = lines[number]
        missing = {"species", "g_center", "field_offset_t", "fwhm_t", "weight"} - set(entry)
        if missing:
            raise ConfigurationError(f"{path}: line.{number} is missing {sorted(missing)}")
        try:
            species = Species(entry["species"])
        except ValueError as exc:
            raise ConfigurationError(f"{path}: line.{number}: unknown species {entry['species']!r}") from exc
        parsed.append(
            SpectralLine(
                species=species,
                g_center=_as_float(f"line.{number}.g_center", entry["g_center"]),
                field_offset=_as_float(f"line.{number}.field_offset_t", entry["field_offset_t"]),
                fwhm=_as_float(f"line.{number}.fwhm_t", entry["fwhm_t"]),
                weight=_as_float(f"line.{number}.weight", entry["weight"]),
            )
        )
    model = SpectralModel(lines=tuple(parsed), **top)
    logger.info(f"Loaded spectral model with {len(parsed)} line(s) from {path}")
    return model.validate()


def dump_spectral_model(model: SpectralModel) -> str:
    out = [
        f"f_mw_hz={float(model.f_mw)!r}",
        f"b1_t={float(model.b1)!r}",
        f"g_reference={float(model.g_reference)!r}",
    ]
    for number, line in enumerate(model.lines, start=1):
        out += [
            f"line.{number}.species={line.species.value}",
            f"line.{number}.g_center={float(line.g_center)!r}",
            f"line.{number}.field_offset_t={float(line.field_offset)!r}",
            f"line.{number}.fwhm_t={float(line.fwhm)!r}",
            f"line.{number}.weight={float(line.weight)!r}",
        ]
    return "\n".join(out) + "\n"


def _as_float(key: str, raw) -> float:
    try:
        return float(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{key}: expected a number, got {raw!r}") from exc
