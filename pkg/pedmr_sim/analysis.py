"""
Background subtraction, nonlinear fits and closed-form relations for echo data.
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .ensemble import BOHR_MAGNETON, HBAR, PLANCK
from .errors import ConfigurationError, InvalidArgumentError

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 200
STEP_TOLERANCE = 1e-10
FOUR_LN2 = 4 * math.log(2)

Baseline = Union[None, Tuple[float, float], Sequence[bool], np.ndarray]


@dataclass(frozen=True, eq=False)
class Series:
    """Sampled curve; x in seconds or tesla, y dimensionless."""

    x: np.ndarray
    y: np.ndarray
    sigma: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        if self.sigma is not None:
            object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float))

    def __len__(self) -> int:
        return len(self.x)

    def validate(self, min_points: int = 3) -> "Series":
        if self.x.ndim != 1 or self.x.shape != self.y.shape:
            raise InvalidArgumentError(f"x and y must be 1-D of equal length, got {self.x.shape} and {self.y.shape}")
        if self.sigma is not None and self.sigma.shape != self.x.shape:
            raise InvalidArgumentError("sigma must have the same length as x")
        if len(self.x) < min_points:
            raise InvalidArgumentError(f"need at least {min_points} points, got {len(self.x)}")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise InvalidArgumentError("series contains non-finite values")
        if np.any(np.diff(self.x) <= 0):
            raise InvalidArgumentError("x must be strictly increasing")
        if self.sigma is not None and np.any(self.sigma <= 0):
            raise InvalidArgumentError("sigma must be positive")
        return self


def load_series_csv(path: Union[str, Path]) -> Series:
    """
    Read a Series from CSV with header columns x,y and optionally sigma.

    Raises:
        ConfigurationError: if the file is missing or lacks the x/y columns
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"data file not found: {path}")
    with path.open(newline="", encoding="utf-8-sig") as handle:
        reader = csv.DictReader(handle)
        columns = [name.strip() for name in (reader.fieldnames or [])]
        if "x" not in columns or "y" not in columns:
            raise ConfigurationError(f"{path}: expected columns x,y[,sigma], got {columns}")
        rows = [{k.strip(): v for k, v in row.items()} for row in reader]
    try:
        x = [float(row["x"]) for row in rows]
        y = [float(row["y"]) for row in rows]
        sigma = [float(row["sigma"]) for row in rows] if "sigma" in columns else None
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{path}: non-numeric value ({exc})") from exc
    logger.info(f"Loaded {len(x)} points from {path}")
    return Series(x, y, sigma)


@dataclass
class FitResult:
    model: str
    params: Dict[str, float]
    uncertainties: Dict[str, float]
    residual_norm: float
    converged: bool
    iterations: int
    singular: bool = False
    fixed: Tuple[str, ...] = ()
    message: str = ""

    def __getitem__(self, name: str) -> float:
        return self.params[name]

    def error(self, name: str) -> float:
        return self.uncertainties[name]

    def to_text(self) -> str:
        """Flat key=value block."""
        lines = [
            f"model={self.model}",
            f"converged={str(self.converged).lower()}",
            f"singular_jacobian={str(self.singular).lower()}",
            f"iterations={self.iterations}",
            f"residual_norm={self.residual_norm:.10e}",
        ]
        for name, value in self.params.items():
            lines.append(f"{name}={value:.10e}")
            lines.append(f"{name}_err={self.uncertainties[name]:.10e}")
        if self.fixed:
            lines.append(f"fixed={','.join(self.fixed)}")
        if self.message:
            lines.append(f"message={self.message}")
        return "\n".join(lines) + "\n"

    def csv_header(self) -> List[str]:
        header = ["model", "converged", "iterations", "residual_norm"]
        for name in self.params:
            header += [name, f"{name}_err"]
        return header

    def to_csv_row(self) -> List[str]:
        row = [self.model, str(self.converged).lower(), str(self.iterations), f"{self.residual_norm:.10e}"]
        for name, value in self.params.items():
            row += [f"{value:.10e}", f"{self.uncertainties[name]:.10e}"]
        return row

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(self.csv_header())
            writer.writerow(self.to_csv_row())
        return path


# ---------------------------------------------------------------------------
# Background
# ---------------------------------------------------------------------------

def baseline_mask(s: Series, baseline: Baseline = None) -> np.ndarray:
    if baseline is None:
        lo = s.x[0] + 0.75 * (s.x[-1] - s.x[0])
        mask = s.x >= lo
        if mask.sum() < 2:
            mask = np.zeros(len(s), dtype=bool)
            mask[-2:] = True
        return mask
    if isinstance(baseline, tuple) and len(baseline) == 2 and not isinstance(baseline[0], (bool, np.bool_)):
        lo, hi = baseline
        return (s.x >= lo) & (s.x <= hi)
    mask = np.asarray(baseline, dtype=bool)
    if mask.shape != s.x.shape:
        raise InvalidArgumentError("baseline mask must match the series length")
    return mask


def linear_background(s: Series, baseline: Baseline = None) -> Tuple[float, float]:
    """Slope and intercept of the least-squares line through the baseline region."""
    s.validate(min_points=2)
    mask = baseline_mask(s, baseline)
    if mask.sum() < 2:
        raise InvalidArgumentError(f"baseline region holds {int(mask.sum())} point(s), need 2")
    xb = s.x[mask]
    if np.ptp(xb) == 0:
        raise InvalidArgumentError("baseline x values are all equal")
    slope, intercept = np.polyfit(xb, s.y[mask], 1)
    return float(slope), float(intercept)


def subtract_linear_background(s: Series, baseline: Baseline = None) -> Series:
    """
    Remove a straight line fitted on the baseline region from every point.

    Args:
        s: input series, at least two points
        baseline: None for the last 25% of the x range, an (x_lo, x_hi)
            interval, or a boolean mask

    Returns:
        Series with the same x and the background-free y

    Raises:
        InvalidArgumentError: if the baseline region is degenerate
    """
    slope, intercept = linear_background(s, baseline)
    return Series(s.x, s.y - (slope * s.x + intercept), s.sigma)


# ---------------------------------------------------------------------------
# Levenberg-Marquardt
# ---------------------------------------------------------------------------

@dataclass
class _LMOutcome:
    p: np.ndarray
    residuals: np.ndarray
    jacobian: np.ndarray
    iterations: int
    converged: bool
    singular: bool
    message: str = ""


def levenberg_marquardt(
    residual_fn: Callable[[np.ndarray], np.ndarray],
    jacobian_fn: Callable[[np.ndarray], np.ndarray],
    p0: Sequence[float],
    max_iterations: int = MAX_ITERATIONS,
    step_tolerance: float = STEP_TOLERANCE,
) -> _LMOutcome:
    """
    Damped Gauss-Newton minimisation of sum(residual_fn(p)**2).

    ``jacobian_fn`` returns d(model)/dp, i.e. minus the derivative of the
    residuals. Marquardt scaling (damping proportional to diag(JᵀJ)) keeps the
    iteration independent of parameter units. Converged when an accepted or
    rejected step is smaller than step_tolerance relative to |p|.
    """
    p = np.asarray(p0, dtype=float).copy()
    r = residual_fn(p)
    cost = float(r @ r)
    lam = 1e-3
    for iteration in range(1, max_iterations + 1):
        jac = jacobian_fn(p)
        if not np.all(np.isfinite(jac)) or np.linalg.matrix_rank(jac) < len(p):
            return _LMOutcome(p, r, jac, iteration, False, True, "singular Jacobian")
        normal = jac.T @ jac
        gradient = jac.T @ r
        while True:
            damped = normal + lam * np.diag(np.diag(normal))
            try:
                step = np.linalg.solve(damped, gradient)
            except np.linalg.LinAlgError:
                return _LMOutcome(p, r, jac, iteration, False, True, "singular normal equations")
            small = np.linalg.norm(step) <= step_tolerance * (np.linalg.norm(p) + step_tolerance)
            trial = p + step
            r_trial = residual_fn(trial)
            cost_trial = float(r_trial @ r_trial)
            if np.isfinite(cost_trial) and cost_trial <= cost:
                p, r, cost = trial, r_trial, cost_trial
                lam = max(lam / 10, 1e-15)
                break
            if small:
                break
            lam *= 10
            if lam > 1e16:
                return _LMOutcome(p, r, jac, iteration, False, False, "damping diverged")
        if small:
            return _LMOutcome(p, r, jacobian_fn(p), iteration, True, False)
    return _LMOutcome(p, r, jacobian_fn(p), max_iterations, False, False, "iteration limit reached")


def _covariance(outcome: _LMOutcome) -> np.ndarray:
    m, n = outcome.jacobian.shape
    dof = m - n
    if outcome.singular or dof <= 0:
        return np.full((n, n), np.nan if outcome.singular else 0.0)
    s2 = float(outcome.residuals @ outcome.residuals) / dof
    try:
        return s2 * np.linalg.inv(outcome.jacobian.T @ outcome.jacobian)
    except np.linalg.LinAlgError:
        return np.full((n, n), np.nan)


def _errors(cov: np.ndarray) -> np.ndarray:
    diag = np.diag(cov)
    return np.where(np.isfinite(diag), np.sqrt(np.abs(diag)), np.inf)


def _y_scale(y: np.ndarray) -> float:
    scale = float(np.max(np.abs(y)))
    return scale if scale > 0 else 1.0


# ---------------------------------------------------------------------------
# Mono-exponential
# ---------------------------------------------------------------------------

def _monoexp_init(x: np.ndarray, y: np.ndarray, c0: float) -> Tuple[float, float]:
    """A and tau from a log-linear regression on y - c0 (scaled units)."""
    d = y - c0
    span = x[-1] - x[0]
    fallback_tau = span / 3 if span > 0 else 1.0
    sign = 1.0 if d[0] >= 0 else -1.0
    usable = (sign * d > 0.1 * abs(d[0])) if d[0] != 0 else np.zeros_like(d, dtype=bool)
    if usable.sum() >= 2:
        slope, intercept = np.polyfit(x[usable], np.log(sign * d[usable]), 1)
        if slope < 0:
            return sign * math.exp(intercept), -1.0 / slope
    return (d[0] if d[0] != 0 else 1.0), fallback_tau


def fit_monoexp(
    s: Series,
    init: Optional[Dict[str, float]] = None,
    offset: Optional[float] = None,
) -> FitResult:
    """
    Fit A·exp(-x/tau) + c.

    Args:
        s: data, at least four points with strictly increasing x
        init: optional starting values for A, tau and c
        offset: hold c fixed at this value instead of fitting it

    Returns:
        FitResult with params A, tau, c and their 1σ uncertainties. A
        non-converged or singular fit is flagged, not raised.
    """
    s.validate(min_points=4)
    x_scale = float(np.max(np.abs(s.x))) or 1.0
    y_scale = _y_scale(s.y)
    x = s.x / x_scale
    y = s.y / y_scale
    w = 1.0 / (s.sigma / y_scale) if s.sigma is not None else np.ones_like(y)
    fix_c = offset is not None

    if init:
        a0 = init.get("A", 1.0) / y_scale
        tau0 = init.get("tau", x_scale) / x_scale
        c0 = (offset if fix_c else init.get("c", 0.0)) / y_scale
    else:
        c0 = offset / y_scale if fix_c else float(np.mean(y[-max(1, len(y) // 10):]))
        a0, tau0 = _monoexp_init(x, y, c0)

    def unpack(p):
        return (p[0], p[1], c0) if fix_c else (p[0], p[1], p[2])

    def residuals(p):
        a, tau, c = unpack(p)
        return w * (y - (a * np.exp(-x / tau) + c))

    def jacobian(p):
        a, tau, _ = unpack(p)
        e = np.exp(-x / tau)
        cols = [e, a * x / tau**2 * e]
        if not fix_c:
            cols.append(np.ones_like(x))
        return w[:, None] * np.column_stack(cols)

    p0 = [a0, tau0] if fix_c else [a0, tau0, c0]
    outcome = levenberg_marquardt(residuals, jacobian, p0)
    errors = _errors(_covariance(outcome))
    a, tau, c = unpack(outcome.p)
    tau = abs(tau)
    params = {"A": a * y_scale, "tau": tau * x_scale, "c": c * y_scale}
    uncertainties = {
        "A": errors[0] * y_scale,
        "tau": errors[1] * x_scale,
        "c": 0.0 if fix_c else errors[2] * y_scale,
    }
    result = FitResult(
        model="monoexp",
        params=params,
        uncertainties=uncertainties,
        residual_norm=float(np.linalg.norm(outcome.residuals)) * y_scale,
        converged=outcome.converged,
        iterations=outcome.iterations,
        singular=outcome.singular,
        fixed=("c",) if fix_c else (),
        message=outcome.message,
    )
    logger.debug(f"monoexp fit: tau={params['tau']:.4e} converged={outcome.converged} after {outcome.iterations}")
    return result


# ---------------------------------------------------------------------------
# Gaussian
# ---------------------------------------------------------------------------

def _gaussian_init(x: np.ndarray, y: np.ndarray) -> List[float]:
    c0 = 0.5 * (y[0] + y[-1])
    d = y - c0
    peak = int(np.argmax(np.abs(d)))
    amp0 = d[peak]
    weights = np.clip(np.sign(amp0) * d, 0.0, None)
    if weights.sum() <= 0:
        return [amp0 or 1.0, x[peak], (x[-1] - x[0]) / 4, c0]
    center0 = float(np.sum(weights * x) / weights.sum())
    var = float(np.sum(weights * (x - center0) ** 2) / weights.sum())
    fwhm0 = math.sqrt(var) * 2 * math.sqrt(2 * math.log(2)) if var > 0 else (x[-1] - x[0]) / 4
    return [amp0, center0, fwhm0, c0]


def fit_gaussian(s: Series, init: Optional[Dict[str, float]] = None) -> FitResult:
    """Fit amp·exp(-4 ln2 (x-center)²/fwhm²) + c, starting from moments of the data."""
    s.validate(min_points=4)
    x_mid = 0.5 * (s.x[0] + s.x[-1])
    x_scale = float(s.x[-1] - s.x[0])
    y_scale = _y_scale(s.y)
    x = (s.x - x_mid) / x_scale
    y = s.y / y_scale
    w = 1.0 / (s.sigma / y_scale) if s.sigma is not None else np.ones_like(y)

    if init:
        p0 = [
            init["amp"] / y_scale,
            (init["center"] - x_mid) / x_scale,
            init["fwhm"] / x_scale,
            init.get("c", 0.0) / y_scale,
        ]
    else:
        p0 = _gaussian_init(x, y)

    def residuals(p):
        amp, center, fwhm, c = p
        return w * (y - (amp * np.exp(-FOUR_LN2 * (x - center) ** 2 / fwhm**2) + c))

    def jacobian(p):
        amp, center, fwhm, _ = p
        u = x - center
        g = np.exp(-FOUR_LN2 * u**2 / fwhm**2)
        return w[:, None] * np.column_stack([
            g,
            amp * g * 2 * FOUR_LN2 * u / fwhm**2,
            amp * g * 2 * FOUR_LN2 * u**2 / fwhm**3,
            np.ones_like(x),
        ])

    outcome = levenberg_marquardt(residuals, jacobian, p0)
    errors = _errors(_covariance(outcome))
    amp, center, fwhm, c = outcome.p
    return FitResult(
        model="gaussian",
        params={
            "center": center * x_scale + x_mid,
            "fwhm": abs(fwhm) * x_scale,
            "amp": amp * y_scale,
            "c": c * y_scale,
        },
        uncertainties={
            "center": errors[1] * x_scale,
            "fwhm": errors[2] * x_scale,
            "amp": errors[0] * y_scale,
            "c": errors[3] * y_scale,
        },
        residual_norm=float(np.linalg.norm(outcome.residuals)) * y_scale,
        converged=outcome.converged,
        iterations=outcome.iterations,
        singular=outcome.singular,
        message=outcome.message,
    )


# ---------------------------------------------------------------------------
# Features of simulated curves
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dip:
    position: float
    depth: float
    fwhm: float
    index: int


def find_dip(s: Series) -> Dip:
    """Deepest minimum of a zero-referenced curve and its full width at half depth."""
    s.validate(min_points=3)
    i = int(np.argmin(s.y))
    depth = float(s.y[i])
    half = depth / 2

    def crossing(indices) -> float:
        prev = i
        for j in indices:
            if s.y[j] > half:
                x0, x1, y0, y1 = s.x[prev], s.x[j], s.y[prev], s.y[j]
                return float(x0 + (half - y0) * (x1 - x0) / (y1 - y0))
            prev = j
        return math.nan

    left = crossing(range(i - 1, -1, -1))
    right = crossing(range(i + 1, len(s)))
    return Dip(float(s.x[i]), depth, right - left, i)


def sign_alternations(values: Sequence[float], tol: float = 0.0) -> int:
    """Number of sign changes, ignoring entries with |v| <= tol."""
    signs = [1 if v > 0 else -1 for v in values if abs(v) > tol]
    return sum(1 for a, b in zip(signs, signs[1:]) if a != b)


def local_maxima(s: Series) -> List[float]:
    """x positions of interior local maxima."""
    y = s.y
    return [float(s.x[i]) for i in range(1, len(y) - 1) if y[i] > y[i - 1] and y[i] >= y[i + 1]]


# ---------------------------------------------------------------------------
# Closed-form relations
# ---------------------------------------------------------------------------

def echo_width_from_linewidth(delta_b: float, g: float) -> float:
    """
    Echo FWHM expected from an inhomogeneous line, 2h/(g·μ_B·ΔB).

    Args:
        delta_b: Gaussian FWHM of the line in tesla
        g: g-factor

    Returns:
        Echo width in seconds
    """
    if not delta_b > 0 or not g > 0:
        raise InvalidArgumentError(f"delta_b and g must be positive, got {delta_b}, {g}")
    return 2 * PLANCK / (g * BOHR_MAGNETON * delta_b)


def echo_dip_fwhm(delta_b: float, g: float) -> float:
    """
    FWHM of the echo dip for a Gaussian line under ideal pulses, 8·ln2·ħ/(g·μ_B·ΔB).

    This is the width of the line's Fourier transform. It is the shortest
    width a swept echo can show; finite pulses excite a narrower slice of
    the line and widen the dip.
    """
    if not delta_b > 0 or not g > 0:
        raise InvalidArgumentError(f"delta_b and g must be positive, got {delta_b}, {g}")
    return 8 * math.log(2) * HBAR / (g * BOHR_MAGNETON * delta_b)


def tau_echo_combined(t2: float, r_s: float) -> float:
    """Echo lifetime with dephasing and recombination adding as rates: 1/(1/T2 + r_s/4)."""
    if not t2 > 0:
        raise InvalidArgumentError(f"t2 must be positive or infinite, got {t2}")
    if not r_s >= 0:
        raise InvalidArgumentError(f"r_s must be >= 0, got {r_s}")
    rate = (0.0 if math.isinf(t2) else 1.0 / t2) + r_s / 4
    return math.inf if rate == 0 else 1.0 / rate


REFERENCE_INTERFACE_DENSITY = 1e11


@dataclass(frozen=True)
class InterfaceEstimate:
    t2: float
    depth_nm: float
    density_cm2: float
    extrapolated: bool = field(default=False)


def t2_interface(d: float, sigma: float) -> float:
    """Dipolar-noise T2 of a donor d nm below an interface with sigma spins per cm²."""
    return t2_interface_estimate(d, sigma).t2


def t2_interface_estimate(d: float, sigma: float) -> InterfaceEstimate:
    """
    As t2_interface, flagging densities other than 1e11 cm⁻² as extrapolated
    (T2 is scaled as 1/sigma away from that reference).
    """
    if not d > 0 or not sigma > 0:
        raise InvalidArgumentError(f"d and sigma must be positive, got {d}, {sigma}")
    t2 = 4e-8 * d**2 * (REFERENCE_INTERFACE_DENSITY / sigma)
    return InterfaceEstimate(t2, d, sigma, extrapolated=sigma != REFERENCE_INTERFACE_DENSITY)


def rabi_frequency(g: float, b1: float) -> float:
    """Nutation frequency gμ_B B₁/h in Hz."""
    return g * BOHR_MAGNETON * b1 / PLANCK


def pi_pulse_budget(tau_echo: float, t_pi: float) -> int:
    """How many π pulses of length t_pi fit into one echo lifetime."""
    if not t_pi > 0 or not tau_echo >= 0:
        raise InvalidArgumentError(f"need t_pi > 0 and tau_echo >= 0, got {t_pi}, {tau_echo}")
    if math.isinf(tau_echo):
        raise InvalidArgumentError("infinite echo lifetime has no finite pulse budget")
    return int(tau_echo // t_pi)
