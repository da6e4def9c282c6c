"""
Density-matrix dynamics of a single P / P_b0 spin pair.

States live in the product basis |↑↑⟩, |↑↓⟩, |↓↑⟩, |↓↓⟩ (spin a first). Every
pulse or delay is a piecewise-constant segment whose 16x16 Liouvillian is
exponentiated exactly, so no time stepping is involved anywhere.

Vectorisation is row-major: vec(ρ)[4*i + j] = ρ[i, j], which gives
vec(A ρ B) = (A ⊗ Bᵀ) vec(ρ).
"""
from dataclasses import dataclass, replace
from typing import Literal, Optional, Sequence

import numpy as np
from scipy.linalg import expm

from .errors import DegenerateStateError, InvalidArgumentError

# Single-spin operators, |↑⟩ first
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
IDENTITY_2 = np.eye(2, dtype=complex)
IDENTITY_4 = np.eye(4, dtype=complex)
IDENTITY_16 = np.eye(16, dtype=complex)

BASIS_LABELS = ("uu", "ud", "du", "dd")

SINGLET_KET = np.array([0, 1, -1, 0], dtype=complex) / np.sqrt(2)
P_S = np.outer(SINGLET_KET, SINGLET_KET.conj())
P_T = IDENTITY_4 - P_S

SZ_A = np.kron(SIGMA_Z, IDENTITY_2)
SZ_B = np.kron(IDENTITY_2, SIGMA_Z)
SX_SUM = np.kron(SIGMA_X, IDENTITY_2) + np.kron(IDENTITY_2, SIGMA_X)
SY_SUM = np.kron(SIGMA_Y, IDENTITY_2) + np.kron(IDENTITY_2, SIGMA_Y)
S_DOT_S = 0.25 * (
    np.kron(SIGMA_X, SIGMA_X) + np.kron(SIGMA_Y, SIGMA_Y) + np.kron(SIGMA_Z, SIGMA_Z)
)

_DIAGONAL = np.arange(4) * 5


def _left(op: np.ndarray) -> np.ndarray:
    return np.kron(op, IDENTITY_4)


def _right(op: np.ndarray) -> np.ndarray:
    return np.kron(IDENTITY_4, op.T)


def _commutator(h: np.ndarray) -> np.ndarray:
    return -1j * (_left(h) - _right(h))


def _anticommutator(p: np.ndarray) -> np.ndarray:
    return _left(p) + _right(p)


def _sandwich(op: np.ndarray) -> np.ndarray:
    return np.kron(op, op.conj())


# Generator pieces, each multiplied by one scalar parameter
SUPER_DELTA_A = _commutator(SZ_A / 2)
SUPER_DELTA_B = _commutator(SZ_B / 2)
SUPER_DRIVE_X = _commutator(SX_SUM / 2)
SUPER_DRIVE_Y = _commutator(SY_SUM / 2)
SUPER_EXCHANGE = _commutator(S_DOT_S)
SUPER_SINGLET_LOSS = -0.5 * _anticommutator(P_S)
SUPER_TRIPLET_LOSS = -0.5 * _anticommutator(P_T)
# σ_z Lindblad per spin at rate gamma_phi/2: single-spin coherences decay at gamma_phi
SUPER_DEPHASING = 0.5 * (_sandwich(SZ_A) + _sandwich(SZ_B) - 2 * IDENTITY_16)


@dataclass(frozen=True)
class PairParams:
    """Rotating-frame parameters of one pair. All rates in 1/s, frequencies in rad/s."""

    delta_a: float = 0.0
    delta_b: float = 0.0
    omega1: float = 0.0
    phase: float = 0.0
    r_s: float = 0.0
    r_t: float = 0.0
    gamma_phi: float = 0.0
    j_ex: float = 0.0

    def validate(self) -> "PairParams":
        for name, value in vars(self).items():
            if not np.isfinite(value):
                raise InvalidArgumentError(f"PairParams.{name} is not finite: {value}")
        for name in ("omega1", "r_s", "r_t", "gamma_phi"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"PairParams.{name} must be >= 0, got {getattr(self, name)}")
        return self

    def free(self) -> "PairParams":
        return replace(self, omega1=0.0)

    def with_drive(self, omega1: float, phase: float = 0.0) -> "PairParams":
        return replace(self, omega1=omega1, phase=phase)


@dataclass(frozen=True, eq=False)
class PairState:
    """4x4 pair density matrix. Trace below one means pairs were lost to recombination."""

    rho: np.ndarray

    def __post_init__(self):
        rho = np.array(self.rho, dtype=complex)
        if rho.shape != (4, 4):
            raise InvalidArgumentError(f"PairState needs a 4x4 matrix, got shape {rho.shape}")
        if not np.all(np.isfinite(rho)):
            raise InvalidArgumentError("PairState contains non-finite entries")
        rho.setflags(write=False)
        object.__setattr__(self, "rho", rho)

    @classmethod
    def steady(cls) -> "PairState":
        """|↓↓⟩⟨↓↓|, the energetically lowest pair configuration."""
        return cls.from_label("dd")

    @classmethod
    def from_ket(cls, psi: Sequence[complex]) -> "PairState":
        psi = np.asarray(psi, dtype=complex)
        norm = np.vdot(psi, psi).real
        if psi.shape != (4,) or norm == 0:
            raise InvalidArgumentError("ket must be a non-zero 4-vector")
        psi = psi / np.sqrt(norm)
        return cls(np.outer(psi, psi.conj()))

    @classmethod
    def from_label(cls, label: str) -> "PairState":
        if label not in BASIS_LABELS:
            raise InvalidArgumentError(f"unknown basis label {label!r}, expected one of {BASIS_LABELS}")
        psi = np.zeros(4, dtype=complex)
        psi[BASIS_LABELS.index(label)] = 1.0
        return cls.from_ket(psi)

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "PairState":
        return cls(np.asarray(vec).reshape(4, 4))

    def vector(self) -> np.ndarray:
        return self.rho.reshape(16).copy()

    def trace(self) -> float:
        return float(np.trace(self.rho).real)

    def purity(self) -> float:
        return float(np.trace(self.rho @ self.rho).real)

    def populations(self) -> np.ndarray:
        return np.diag(self.rho).real.copy()

    def validate(self, hermitian_tol: float = 1e-12, eig_tol: float = 1e-10) -> "PairState":
        """
        Check the density-matrix invariants.

        Raises:
            InvalidArgumentError: if the matrix is not Hermitian, has a negative
                eigenvalue below -eig_tol, or a trace outside [0, 1].
        """
        asym = np.max(np.abs(self.rho - self.rho.conj().T))
        if asym > hermitian_tol:
            raise InvalidArgumentError(f"state is not Hermitian (max deviation {asym:.3e})")
        lowest = np.linalg.eigvalsh(self.rho).min()
        if lowest < -eig_tol:
            raise InvalidArgumentError(f"state has negative eigenvalue {lowest:.3e}")
        tr = self.trace()
        if tr < -eig_tol or tr > 1 + hermitian_tol:
            raise InvalidArgumentError(f"state trace {tr} outside [0, 1]")
        return self


def liouvillian(params: PairParams) -> np.ndarray:
    """16x16 generator for one parameter set."""
    params.validate()
    return batched_liouvillian(params, np.array([params.delta_a]), np.array([params.delta_b]))[0]


def batched_liouvillian(
    params: PairParams,
    delta_a: np.ndarray,
    delta_b: np.ndarray,
    omega1: Optional[float] = None,
    phase: Optional[float] = None,
) -> np.ndarray:
    """
    Generators for a batch of detuning pairs sharing every other parameter.

    Args:
        params: drive, rates and coupling; its own detunings are ignored
        delta_a: angular detunings of spin a, shape (N,)
        delta_b: angular detunings of spin b, shape (N,)
        omega1: overrides params.omega1 when given
        phase: overrides params.phase when given

    Returns:
        Array of shape (N, 16, 16)
    """
    delta_a = np.asarray(delta_a, dtype=float)
    delta_b = np.asarray(delta_b, dtype=float)
    w1 = params.omega1 if omega1 is None else omega1
    phi = params.phase if phase is None else phase
    shared = (
        w1 * (np.cos(phi) * SUPER_DRIVE_X + np.sin(phi) * SUPER_DRIVE_Y)
        + params.j_ex * SUPER_EXCHANGE
        + params.r_s * SUPER_SINGLET_LOSS
        + params.r_t * SUPER_TRIPLET_LOSS
        + params.gamma_phi * SUPER_DEPHASING
    )
    return (
        shared[None, :, :]
        + delta_a[:, None, None] * SUPER_DELTA_A[None, :, :]
        + delta_b[:, None, None] * SUPER_DELTA_B[None, :, :]
    )


def propagator(params: PairParams, duration: float) -> np.ndarray:
    """exp(L·duration) for one parameter set."""
    _check_duration(duration)
    return expm(liouvillian(params) * duration)


def batched_propagator(generators: np.ndarray, duration: float) -> np.ndarray:
    _check_duration(duration)
    if duration == 0:
        return np.broadcast_to(IDENTITY_16, generators.shape).copy()
    return expm(generators * duration)


def apply_propagator(propagators: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Apply (N,16,16) propagators to (N,16) vectorised states."""
    return np.einsum("nij,nj->ni", propagators, vectors)


def _check_duration(duration: float) -> None:
    if not np.isfinite(duration) or duration < 0:
        raise InvalidArgumentError(f"duration must be finite and >= 0, got {duration}")


def _evolve(state: PairState, params: PairParams, duration: float) -> PairState:
    return PairState.from_vector(propagator(params, duration) @ state.vector())


def propagate_pulse(state: PairState, params: PairParams, duration: float) -> PairState:
    """
    Evolve a pair state through a rectangular microwave pulse.

    Args:
        state: pair state at the start of the pulse
        params: detunings, drive amplitude/phase and dissipation rates
        duration: pulse length in seconds

    Returns:
        The state at the end of the pulse

    Raises:
        InvalidArgumentError: for negative durations or non-finite parameters
    """
    return _evolve(state, params, duration)


def propagate_free(state: PairState, params: PairParams, duration: float) -> PairState:
    """Free evolution: same generator with the drive switched off."""
    return _evolve(state, params.free(), duration)


def singlet_fraction(state: PairState) -> float:
    """Tr(P_S ρ); lies in [0, Tr ρ]."""
    return float(np.trace(P_S @ state.rho).real)


Weighting = Literal["normalized", "survivors"]

_SINGLET_ROW = P_S.T.reshape(16)


def q_raw(
    state_end: PairState,
    state_steady: PairState,
    weighting: Weighting = "normalized",
) -> float:
    """
    Deviation of the end-of-sequence singlet content from the steady state.

    With ``weighting="normalized"`` both singlet fractions are divided by their
    traces. ``"survivors"`` multiplies that difference by Tr(ρ_end), counting the
    deviation per initial pair with recombined pairs reset to the steady state.

    Raises:
        DegenerateStateError: if a trace that has to be divided by is zero
    """
    steady_fraction = _steady_fraction(state_steady)
    tr_end = state_end.trace()
    singlet = singlet_fraction(state_end)
    if weighting == "survivors":
        return singlet - tr_end * steady_fraction
    if weighting != "normalized":
        raise InvalidArgumentError(f"unknown weighting {weighting!r}")
    if abs(tr_end) < 1e-15:
        raise DegenerateStateError("end state has zero trace")
    return singlet / tr_end - steady_fraction


def _steady_fraction(state_steady: PairState) -> float:
    tr = state_steady.trace()
    if abs(tr) < 1e-15:
        raise DegenerateStateError("steady state has zero trace")
    return singlet_fraction(state_steady) / tr


def q_raw_batch(
    vectors: np.ndarray,
    state_steady: PairState,
    weighting: Weighting = "normalized",
) -> np.ndarray:
    """Vectorised q_raw over (N,16) end states."""
    steady_fraction = _steady_fraction(state_steady)
    singlet = (vectors @ _SINGLET_ROW).real
    traces = vectors[:, _DIAGONAL].sum(axis=1).real
    if weighting == "survivors":
        return singlet - traces * steady_fraction
    if weighting != "normalized":
        raise InvalidArgumentError(f"unknown weighting {weighting!r}")
    if np.any(np.abs(traces) < 1e-15):
        raise DegenerateStateError("end state has zero trace")
    return singlet / traces - steady_fraction


def ket(label: str) -> np.ndarray:
    """Basis ket for a label such as "ud" (spin a up, spin b down)."""
    if label not in BASIS_LABELS:
        raise InvalidArgumentError(f"unknown basis label {label!r}")
    return IDENTITY_4[BASIS_LABELS.index(label)].copy()
