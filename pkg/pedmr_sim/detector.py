"""
Photocurrent transient and boxcar charge for a given end-of-sequence deviation q.

K(t) = (e^{-t/τf} - e^{-t/τr}) - β(e^{-t/τs} - e^{-t/τf})

Only the proportionality Q ∝ q matters for the experiments; the kernel exists
so that transients can be written out and inspected.
"""
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Tuple, Union

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .errors import InvalidArgumentError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TransientKernel:
    tau_rise: float = 3e-6
    tau_fall: float = 11e-6
    tau_slow: float = 140e-6
    overshoot: float = 0.3
    gain: float = 1.0

    def validate(self) -> "TransientKernel":
        if not 0 < self.tau_rise < self.tau_fall < self.tau_slow:
            raise InvalidArgumentError(
                f"need 0 < tau_rise < tau_fall < tau_slow, got "
                f"{self.tau_rise}, {self.tau_fall}, {self.tau_slow}"
            )
        if not self.overshoot >= 0:
            raise InvalidArgumentError(f"overshoot must be >= 0, got {self.overshoot}")
        if not math.isfinite(self.gain):
            raise InvalidArgumentError("gain must be finite")
        return self

    def shape(self, t) -> np.ndarray:
        """K(t) without gain."""
        t = np.asarray(t, dtype=float)
        fall = np.exp(-t / self.tau_fall)
        return (fall - np.exp(-t / self.tau_rise)) - self.overshoot * (np.exp(-t / self.tau_slow) - fall)


@dataclass(frozen=True)
class BoxcarWindow:
    t_start: float = 2e-6
    t_end: float = 22e-6

    def validate(self) -> "BoxcarWindow":
        if not 0 <= self.t_start < self.t_end:
            raise InvalidArgumentError(f"need 0 <= t_start < t_end, got {self.t_start}, {self.t_end}")
        return self


def transient(q: float, kernel: TransientKernel, t) -> np.ndarray:
    """
    Current transient gain·q·K(t).

    Args:
        q: end-of-sequence deviation
        kernel: response kernel
        t: time(s) after the sequence in seconds, >= 0

    Returns:
        Current in arbitrary units, same shape as t
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise InvalidArgumentError("transient times must be >= 0")
    return kernel.gain * q * kernel.shape(t)


def _exp_integral(tau: float, t0: float, t1: float) -> float:
    return tau * (math.exp(-t0 / tau) - math.exp(-t1 / tau))


def kernel_integral(kernel: TransientKernel, window: BoxcarWindow) -> float:
    """Closed-form ∫K(t)dt over the window, without gain."""
    t0, t1 = window.t_start, window.t_end
    fall = _exp_integral(kernel.tau_fall, t0, t1)
    rise = _exp_integral(kernel.tau_rise, t0, t1)
    slow = _exp_integral(kernel.tau_slow, t0, t1)
    return (fall - rise) - kernel.overshoot * (slow - fall)


def boxcar_q(q: float, kernel: TransientKernel, window: BoxcarWindow) -> float:
    """Boxcar charge gain·q·∫K over the window; exactly linear in q."""
    return kernel.gain * q * kernel_integral(kernel, window)


def kernel_peak(kernel: TransientKernel) -> Tuple[float, float]:
    """
    Time of the positive maximum of K and of its zero crossing.

    The maximum lies below tau_fall for the default kernel; the crossing is
    bracketed between the maximum and 10·tau_slow.
    """
    kernel.validate()
    result = minimize_scalar(
        lambda t: -float(kernel.shape(t)),
        bounds=(0.0, kernel.tau_fall * 3),
        method="bounded",
        options={"xatol": 1e-12},
    )
    t_peak = float(result.x)
    t_far = 10 * kernel.tau_slow
    if kernel.shape(t_far) >= 0:
        return t_peak, math.inf
    t_zero = brentq(lambda t: float(kernel.shape(t)), t_peak, t_far, xtol=1e-14)
    return t_peak, float(t_zero)


def write_transient_csv(
    path: Union[str, Path],
    q: float,
    kernel: TransientKernel,
    times: Iterable[float],
) -> Path:
    """Write columns time_s,current_au with a header row."""
    path = Path(path)
    times = np.asarray(list(times), dtype=float)
    current = transient(q, kernel, times)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["time_s", "current_au"])
        for t, i in zip(times, current):
            writer.writerow([f"{t:.10e}", f"{i:.10e}"])
    logger.info(f"Transient written to {path}")
    return path
