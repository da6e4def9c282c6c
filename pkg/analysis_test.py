import math

import numpy as np
import pytest

from pedmr_sim.analysis import (
    FitResult,
    Series,
    echo_dip_fwhm,
    echo_width_from_linewidth,
    find_dip,
    fit_gaussian,
    fit_monoexp,
    levenberg_marquardt,
    linear_background,
    load_series_csv,
    local_maxima,
    pi_pulse_budget,
    rabi_frequency,
    sign_alternations,
    subtract_linear_background,
    t2_interface,
    t2_interface_estimate,
    tau_echo_combined,
)
from pedmr_sim.errors import ConfigurationError, InvalidArgumentError


def decay(tau, a=1.0, c=0.0, n=60, span=5.0):
    x = np.linspace(0, span * tau, n)
    return Series(x, a * np.exp(-x / tau) + c)


@pytest.mark.parametrize("tau", [3e-9, 4.7e-8, 1.74e-6, 2.2e-5, 9e-4])
def test_monoexp_recovers_noiseless_parameters(tau):
    result = fit_monoexp(decay(tau, a=0.8, c=0.05))
    assert result.converged
    assert result["tau"] == pytest.approx(tau, rel=1e-6)
    assert result["A"] == pytest.approx(0.8, rel=1e-6)
    assert result["c"] == pytest.approx(0.05, abs=1e-7)


def test_monoexp_recovers_random_noiseless_decays():
    rng = np.random.default_rng(7)
    x = np.concatenate([[0.0], np.geomspace(1e-8, 2e-3, 80)])
    for _ in range(100):
        tau = 10 ** rng.uniform(-7, -4)
        a = rng.choice([-1.0, 1.0]) * rng.uniform(0.1, 10)
        c = rng.uniform(-0.5, 0.5) * abs(a)
        result = fit_monoexp(Series(x, a * np.exp(-x / tau) + c))
        assert result.converged
        assert result["tau"] == pytest.approx(tau, rel=1e-6)
        assert result["A"] == pytest.approx(a, rel=1e-6)
        assert result["c"] == pytest.approx(c, abs=1e-6 * abs(a))


def test_monoexp_with_noise_stays_within_two_percent():
    rng = np.random.default_rng(42)
    clean = decay(1.74e-6, a=1.0, c=0.02, n=200)
    noisy = Series(clean.x, clean.y + rng.normal(0, 0.01, len(clean)))
    result = fit_monoexp(noisy)
    assert result.converged
    assert result["tau"] == pytest.approx(1.74e-6, rel=0.02)
    assert 0 < result.error("tau") < 0.05 * result["tau"]


def test_monoexp_is_scale_invariant():
    base = decay(2e-6, a=-0.3, c=0.01)
    scaled = Series(base.x * 1e3, base.y * 1e-4)
    first, second = fit_monoexp(base), fit_monoexp(scaled)
    assert second["tau"] == pytest.approx(first["tau"] * 1e3, rel=1e-6)
    assert second["A"] == pytest.approx(first["A"] * 1e-4, rel=1e-6)


def test_monoexp_with_fixed_offset():
    result = fit_monoexp(decay(5e-7, a=2.0), offset=0.0)
    assert result.fixed == ("c",)
    assert result["c"] == 0.0
    assert result.error("c") == 0.0
    assert result["tau"] == pytest.approx(5e-7, rel=1e-6)


def test_monoexp_accepts_initial_guess():
    result = fit_monoexp(decay(1e-6, a=1.0, c=0.1), init={"A": 0.5, "tau": 3e-6, "c": 0.0})
    assert result.converged
    assert result["tau"] == pytest.approx(1e-6, rel=1e-6)


def test_monoexp_needs_four_points():
    with pytest.raises(InvalidArgumentError):
        fit_monoexp(Series([0.0, 1.0, 2.0], [1.0, 0.5, 0.25]))


def test_levenberg_marquardt_solves_a_linear_problem():
    x = np.linspace(0, 1, 20)
    y = 3 * x - 2
    outcome = levenberg_marquardt(
        lambda p: y - (p[0] * x + p[1]),
        lambda p: np.column_stack([x, np.ones_like(x)]),
        [1.0, 0.0],
    )
    assert outcome.converged
    assert outcome.p == pytest.approx([3.0, -2.0], abs=1e-9)


def test_levenberg_marquardt_flags_a_singular_jacobian():
    x = np.linspace(0, 1, 20)
    outcome = levenberg_marquardt(
        lambda p: x - (p[0] + p[1]) * x,
        lambda p: np.column_stack([x, x]),
        [0.0, 0.0],
    )
    assert outcome.singular
    assert not outcome.converged


def test_gaussian_recovers_a_resonance_line():
    x = np.arange(345e-3, 353e-3 + 1e-9, 0.05e-3)
    y = -0.5 * np.exp(-4 * math.log(2) * (x - 349.1e-3) ** 2 / (0.4e-3) ** 2) + 0.01
    result = fit_gaussian(Series(x, y))
    assert result.converged
    assert result["center"] == pytest.approx(349.1e-3, abs=1e-9)
    assert result["fwhm"] == pytest.approx(0.4e-3, rel=1e-6)
    assert result["amp"] == pytest.approx(-0.5, rel=1e-6)


def test_gaussian_on_a_merged_doublet():
    # two 1 mT lines 0.7 mT apart read as one broadened line between them
    x = 348e-3 + np.arange(-80, 81) * 0.05e-3
    y = sum(np.exp(-4 * math.log(2) * (x - center) ** 2 / (1e-3) ** 2) for center in (347.65e-3, 348.35e-3))
    result = fit_gaussian(Series(x, y))
    assert result.converged
    assert result["center"] == pytest.approx(348.0e-3, abs=1e-6)
    assert result["fwhm"] > 1e-3


def test_linear_background_on_the_tail():
    x = np.linspace(0, 10, 41)
    y = 2 * x + 1 - 5 * np.exp(-3 * x)
    slope, intercept = linear_background(Series(x, y))
    assert slope == pytest.approx(2.0, abs=1e-6)
    assert intercept == pytest.approx(1.0, abs=1e-5)
    flat = subtract_linear_background(Series(x, y), baseline=(8.0, 10.0))
    assert np.max(np.abs(flat.y[-5:])) < 1e-3


def test_background_errors():
    s = Series(np.linspace(0, 1, 10), np.zeros(10))
    with pytest.raises(InvalidArgumentError):
        linear_background(s, baseline=(0.95, 1.0))
    with pytest.raises(InvalidArgumentError):
        linear_background(s, baseline=[True, False])
    with pytest.raises(InvalidArgumentError):
        linear_background(Series([0.0, 0.0, 1.0], [1.0, 2.0, 3.0]))


def test_find_dip_position_and_width():
    x = np.arange(0, 401, 10) * 1e-9
    y = -0.2 * np.exp(-4 * math.log(2) * (x - 200e-9) ** 2 / (100e-9) ** 2)
    dip = find_dip(Series(x, y))
    assert dip.position == pytest.approx(200e-9)
    assert dip.depth == pytest.approx(-0.2)
    assert dip.fwhm == pytest.approx(100e-9, abs=3e-9)


def test_find_dip_without_a_crossing_has_undefined_width():
    dip = find_dip(Series([0.0, 1.0, 2.0], [-1.0, -0.8, -0.7]))
    assert dip.index == 0
    assert math.isnan(dip.fwhm)


def test_sign_alternations_and_maxima():
    assert sign_alternations([1, -1, 1, 0.0, -2]) == 3
    assert sign_alternations([1e-9, -1e-9, 1.0], tol=1e-6) == 0
    s = Series(np.arange(7.0), [0, 1, 0, 2, 3, 1, 0])
    assert local_maxima(s) == [1.0, 4.0]


def test_closed_form_relations():
    assert echo_width_from_linewidth(0.4e-3, 1.9985) == pytest.approx(179e-9, abs=1e-9)
    assert echo_dip_fwhm(0.4e-3, 1.9985) == pytest.approx(78.9e-9, abs=0.1e-9)
    ratio = echo_dip_fwhm(0.4e-3, 1.9985) / echo_width_from_linewidth(0.4e-3, 1.9985)
    assert ratio == pytest.approx(2 * math.log(2) / math.pi, rel=1e-12)
    assert t2_interface(15, 1e11) == pytest.approx(9.0e-6, abs=0.1e-6)
    assert tau_echo_combined(math.inf, 2.3e6) == pytest.approx(4 / 2.3e6, rel=1e-15)
    assert tau_echo_combined(9e-6, 0.0) == pytest.approx(9e-6)
    assert math.isinf(tau_echo_combined(math.inf, 0.0))
    assert rabi_frequency(1.9985, 0.3e-3) == pytest.approx(8.3915e6, rel=1e-3)
    assert pi_pulse_budget(1.74e-6, 59.6e-9) == 29


def test_interface_estimate_flags_extrapolation():
    assert not t2_interface_estimate(10, 1e11).extrapolated
    other = t2_interface_estimate(10, 2e11)
    assert other.extrapolated
    assert other.t2 == pytest.approx(t2_interface(10, 1e11) / 2)


def test_closed_form_argument_errors():
    with pytest.raises(InvalidArgumentError):
        echo_width_from_linewidth(0.0, 2.0)
    with pytest.raises(InvalidArgumentError):
        echo_dip_fwhm(0.4e-3, -2.0)
    with pytest.raises(InvalidArgumentError):
        tau_echo_combined(1e-6, -1.0)
    with pytest.raises(InvalidArgumentError):
        t2_interface(-1, 1e11)
    with pytest.raises(InvalidArgumentError):
        pi_pulse_budget(math.inf, 59.6e-9)


def test_load_series_csv(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("x,y,sigma\n0,1.0,0.1\n1e-6,0.5,0.1\n2e-6,0.25,0.1\n", encoding="utf-8")
    series = load_series_csv(path)
    assert list(series.x) == [0.0, 1e-6, 2e-6]
    assert series.sigma is not None and len(series.sigma) == 3

    bad = tmp_path / "bad.csv"
    bad.write_text("time,value\n0,1\n", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        load_series_csv(bad)
    with pytest.raises(ConfigurationError):
        load_series_csv(tmp_path / "missing.csv")


def test_fit_result_text_and_csv(tmp_path):
    result = FitResult(
        model="monoexp",
        params={"A": 1.0, "tau": 2e-6, "c": 0.0},
        uncertainties={"A": 0.01, "tau": 1e-8, "c": 0.0},
        residual_norm=1e-3,
        converged=True,
        iterations=7,
        fixed=("c",),
    )
    text = result.to_text()
    assert "converged=true" in text
    assert "tau=2.0000000000e-06" in text
    assert "fixed=c" in text
    path = result.write_csv(tmp_path / "fit.csv")
    header, row = path.read_text(encoding="utf-8").splitlines()
    assert header.split(",")[:4] == ["model", "converged", "iterations", "residual_norm"]
    assert row.startswith("monoexp,true,7,")
