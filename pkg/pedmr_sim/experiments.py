import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import sequence_dsl
from .analysis import (
    FitResult,
    Series,
    echo_dip_fwhm,
    echo_width_from_linewidth,
    fit_monoexp,
    linear_background,
    pi_pulse_budget,
    rabi_frequency,
)
from .config import VERSION, WORKERS
from .detector import boxcar_q, write_transient_csv
from .ensemble import EnsembleSimulator, QuadratureSpec, SpectralModel, load_spectral_model
from .errors import ConfigurationError, InvalidArgumentError
from .models import RunConfig
from .sequence_dsl import PulseSequence, SequenceProgram, compile_program, compile_source, format_program, parse

CONVERGENCE_TOLERANCE = 1e-3


@dataclass
class ExperimentResult:
    experiment: str
    header: Tuple[str, ...]
    rows: np.ndarray
    q: np.ndarray
    program: SequenceProgram
    fit: Optional[FitResult] = None
    report: Dict[str, str] = field(default_factory=dict)
    output_dir: Optional[Path] = None

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.header.index(name)]

    @property
    def converged(self) -> bool:
        return self.fit is None or self.fit.converged


class ExperimentRunner:
    """
    Runs one configured experiment and writes its outputs.

    Every run leaves ``<experiment>.csv``, ``config_resolved.cfg``,
    ``sequence.pseq`` and ``metadata.txt`` in the output directory, plus
    ``fit.txt``/``fit.csv`` for echo decay and ``transient.csv`` on request.
    """

    def __init__(
        self,
        config: RunConfig,
        transient: bool = False,
        workers: Optional[int] = None,
        write: bool = True,
    ):
        """
        Args:
            config: validated run configuration
            transient: also write the current transient of the largest-|Q| point
            workers: threads used over field lines (default from PEDMR_WORKERS)
            write: write output files; disabled for in-memory use
        """
        self.config = config
        self.logger = logging.getLogger(__name__)
        self.transient = transient
        self.workers = max(1, workers or WORKERS)
        self.write = write
        self.output_dir = Path(config.output_dir)

        try:
            model = load_spectral_model(config.spectral_model) if config.spectral_model else SpectralModel.default()
            if config.b1_t is not None:
                model = model.with_b1(config.b1_t)
            self.model = model.validate()
            self.quad = config.quadrature.to_spec(config.seed)
            self.params = config.pair.to_params()
            self.kernel = config.kernel.to_kernel()
            self.window = config.boxcar.to_window()
        except (ConfigurationError, InvalidArgumentError) as exc:
            raise ConfigurationError(f"{config.experiment}: {exc}") from exc

    # ------------------------------------------------------------------
    # Shared machinery
    # ------------------------------------------------------------------

    @property
    def t_pi(self) -> float:
        return math.pi / self.model.omega1 if self.model.omega1 > 0 else math.inf

    def _simulator(self, quad: Optional[QuadratureSpec] = None) -> EnsembleSimulator:
        return EnsembleSimulator(
            self.model,
            quad or self.quad,
            self.params,
            weighting=self.config.signal_weighting,
            omega1_leak=self.config.omega1_leak,
        )

    def _compile(self, build: Callable[[], str]) -> Tuple[SequenceProgram, List[PulseSequence]]:
        try:
            source = build()
        except InvalidArgumentError as exc:
            raise ConfigurationError(f"{self.config.experiment}: {exc}") from exc
        program = parse(source)
        return program, compile_program(program, self.model.omega1)

    def _evaluate(self, fields: Sequence[float], sequences: Sequence[PulseSequence]) -> np.ndarray:
        """q for every (field, sequence); rows follow ``fields`` whatever the thread count."""

        def line(b0: float) -> np.ndarray:
            values = self._simulator().average_q_sweep(sequences, b0)
            self.logger.debug(f"Field line {b0 * 1e3:.3f} mT done")
            return values

        self.logger.info(
            f"Evaluating {len(fields)} field(s) x {len(sequences)} sequence(s) "
            f"with {self.workers} worker(s)"
        )
        if self.workers == 1 or len(fields) == 1:
            lines = [line(b0) for b0 in fields]
        else:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                lines = list(pool.map(line, fields))
        return np.vstack(lines)

    def _charge(self, q: np.ndarray) -> np.ndarray:
        return boxcar_q(np.asarray(q), self.kernel, self.window)

    def _convergence(
        self, fields: Sequence[float], sequences: Sequence[PulseSequence], q: np.ndarray
    ) -> Dict[str, str]:
        """
        Re-run the largest-|q| point with doubled quadrature nodes.

        The change is reported absolute and relative to |q| after a π pulse
        at the same field with the finer rule. A relative change above
        CONVERGENCE_TOLERANCE is logged as a warning.
        """
        if not self.config.quadrature.convergence_check or q.size == 0:
            return {}
        i, j = np.unravel_index(int(np.argmax(np.abs(q))), q.shape)
        b0 = float(fields[i])
        finer = self._simulator(self.quad.doubled())
        delta = abs(finer.average_q(sequences[j], b0) - float(q[i, j]))
        report = {"quadrature_check_b0_t": repr(b0), "quadrature_delta": f"{delta:.10e}"}
        if self.model.omega1 <= 0:
            return report
        scale = abs(finer.average_q(compile_source("pulse 180 x\n", self.model.omega1)[0], b0))
        relative = delta / scale if scale > 0 else math.inf
        report["quadrature_delta_rel_rabi"] = f"{relative:.10e}"
        if relative > CONVERGENCE_TOLERANCE:
            n_a, n_b = self.quad.nodes
            self.logger.warning(
                f"Quadrature {self.quad.scheme}:{n_a}/{n_b} changes Q by {relative:.2e} of the π-pulse signal "
                f"at {b0 * 1e3:.3f} mT when the nodes are doubled"
            )
        return report

    # ------------------------------------------------------------------
    # Experiments
    # ------------------------------------------------------------------

    def run(self, sequence_text: Optional[str] = None) -> ExperimentResult:
        experiment = self.config.experiment
        self.logger.info(f"Starting {experiment} run")
        if experiment == "rabi":
            return self.run_rabi()
        if experiment == "echo-map":
            return self.run_echo_map()
        if experiment == "echo-decay":
            return self.run_echo_decay()
        if experiment == "spectrum":
            return self.run_spectrum()
        if experiment == "inversion-recovery":
            return self.run_inversion_recovery()
        if sequence_text is None:
            sequence_text = sequence_dsl.load_sequence(self.config.sequence.path)
        return self.run_sequence(sequence_text)

    def run_rabi(self) -> ExperimentResult:
        """Pulse length swept at a fixed field; Q oscillates at the Rabi frequency."""
        s = self.config.rabi
        program, sequences = self._compile(lambda: sequence_dsl.rabi(s.t_max, s.step, s.phase))
        q = self._evaluate([s.b0], sequences)[0]
        rows = np.column_stack([[seq.value("t_rabi") for seq in sequences], self._charge(q)])
        report = {
            "b0_t": repr(float(s.b0)),
            "rabi_frequency_hz": f"{rabi_frequency(self.model.g_reference, self.model.b1):.10e}",
            "t_pi_s": f"{self.t_pi:.10e}",
        }
        report.update(self._convergence([s.b0], sequences, q[np.newaxis]))
        return self._finish("rabi", ("tau_rabi_s", "Q"), rows, q, program, report=report)

    def run_echo_map(self) -> ExperimentResult:
        """
        Carr-Purcell echo over a field × τ₂ grid.

        ΔQ on each field line is Q minus the mean over the plateau
        τ₂ >= τ₁ + plateau_margin, so echoes show up as negative dips.
        """
        s = self.config.echo_map
        program, sequences = self._compile(
            lambda: sequence_dsl.cp_echo(s.tau1, (s.tau2_start, s.tau2_stop, s.tau2_step))
        )
        fields = s.fields()
        q = self._evaluate(fields, sequences)
        charge = self._charge(q)

        tau2 = np.array([seq.value("tau2") for seq in sequences])
        plateau = tau2 >= s.tau1 + s.plateau_margin - 1e-15
        if not plateau.any():
            plateau = np.abs(tau2 - s.tau1) >= s.plateau_margin - 1e-15
        if not plateau.any():
            raise ConfigurationError("echo-map: no tau2 point lies on the plateau, extend tau2_stop")
        delta = charge - charge[:, plateau].mean(axis=1, keepdims=True)

        rows = np.column_stack([
            np.repeat(fields, len(tau2)),
            np.tile(tau2, len(fields)),
            delta.reshape(-1),
        ])
        report = {"tau1_s": repr(float(s.tau1)), "plateau_points": str(int(plateau.sum()))}
        for line in self.model.family_lines("P"):
            species = line.species.value
            report[f"echo_width_estimate_s.{species}"] = f"{echo_width_from_linewidth(line.fwhm, line.g_center):.10e}"
            # ideal-pulse lower bound; finite pulses widen the measured dip
            report[f"echo_dip_fwhm_s.{species}"] = f"{echo_dip_fwhm(line.fwhm, line.g_center):.10e}"
        report.update(self._convergence(fields, sequences, q))
        return self._finish("echo-map", ("b0_T", "tau2_s", "dQ"), rows, q.reshape(-1), program, report=report)

    def run_echo_decay(self) -> ExperimentResult:
        """
        Echo amplitude versus total free evolution τ₁+τ₂ = 2τ, fitted with A·e^{-x/τ_echo}.

        For every τ the off-echo points (dtau >= baseline_offset) define a
        straight background; ΔQ is the echo point (dtau = 0) minus that line.
        A fit that does not converge is reported, not raised.
        """
        s = self.config.echo_decay
        program, sequences = self._compile(
            lambda: sequence_dsl.echo_decay(
                (s.tau_start, s.tau_stop, s.tau_step), (0.0, s.offset_stop, s.offset_step)
            )
        )
        q = self._evaluate([s.b0], sequences)[0]
        taus = np.array(program.sweeps[0].values())
        offsets = np.array(program.sweeps[1].values())
        charge = self._charge(q).reshape(len(taus), len(offsets))
        reference = offsets >= s.baseline_offset - 1e-15

        delta = np.empty(len(taus))
        for i, line in enumerate(charge):
            _, intercept = linear_background(Series(offsets, line), reference)
            delta[i] = line[0] - intercept
        total = 2 * taus
        rows = np.column_stack([total, delta])

        fit = fit_monoexp(Series(total, delta), offset=0.0)
        tau_echo = fit["tau"]
        report = {
            "b0_t": repr(float(s.b0)),
            "tau_echo_s": f"{tau_echo:.10e}",
            "tau_echo_err_s": f"{fit.error('tau'):.10e}",
            "r_s_implied_per_s": f"{4 / tau_echo:.10e}",
        }
        report.update(self._convergence([s.b0], sequences, q[np.newaxis]))
        if math.isfinite(tau_echo) and math.isfinite(self.t_pi):
            report["pi_pulse_budget"] = str(pi_pulse_budget(tau_echo, self.t_pi))
        if fit.converged:
            self.logger.info(f"Echo lifetime {tau_echo * 1e6:.3f} ± {fit.error('tau') * 1e6:.3f} us")
        else:
            self.logger.warning(f"Echo-decay fit did not converge: {fit.message}")
        return self._finish("echo-decay", ("total_tau_s", "dQ"), rows, q, program, fit=fit, report=report)

    def run_spectrum(self) -> ExperimentResult:
        """Q after one fixed pulse, swept over the static field."""
        s = self.config.spectrum
        program, sequences = self._compile(lambda: f"#pseq v1\npulse {s.angle_deg:g} x\n")
        fields = s.fields()
        q = self._evaluate(fields, sequences)[:, 0]
        rows = np.column_stack([fields, self._charge(q)])
        report = {"angle_deg": f"{s.angle_deg:g}"}
        for line in self.model.lines:
            report[f"resonance_field_t.{line.species.value}"] = f"{line.center_field(self.model.f_mw):.10e}"
        report.update(self._convergence(fields, sequences, q[:, np.newaxis]))
        return self._finish("spectrum", ("b0_T", "Q"), rows, q, program, report=report)

    def run_inversion_recovery(self) -> ExperimentResult:
        """Inverted population probed by an echo after a swept recovery time."""
        s = self.config.inversion_recovery
        program, sequences = self._compile(
            lambda: sequence_dsl.inversion_recovery((s.t_start, s.t_stop, s.t_step), s.probe_tau)
        )
        q = self._evaluate([s.b0], sequences)[0]
        rows = np.column_stack([[seq.value("t_rec") for seq in sequences], self._charge(q)])
        report = {"b0_t": repr(float(s.b0)), "probe_tau_s": repr(float(s.probe_tau))}
        report.update(self._convergence([s.b0], sequences, q[np.newaxis]))
        return self._finish("inversion-recovery", ("t_rec_s", "Q"), rows, q, program, report=report)

    def run_sequence(self, source: str) -> ExperimentResult:
        """A user .pseq program evaluated over the configured fields."""
        program = parse(source)
        sequences = compile_program(program, self.model.omega1)
        names = sequence_dsl.axis_names(program)
        fields = self.config.sequence.fields()
        q = self._evaluate(fields, sequences)
        charge = self._charge(q)
        rows = [
            [b0, *[seq.value(name) for name in names], charge[i, j]]
            for i, b0 in enumerate(fields)
            for j, seq in enumerate(sequences)
        ]
        header = ("b0_T", *[f"{name}_s" for name in names], "Q")
        return self._finish("sequence", header, np.array(rows, dtype=float), q.reshape(-1), program,
                            report=self._convergence(fields, sequences, q))

    # ------------------------------------------------------------------
    # Output
    # ------------------------------------------------------------------

    def _finish(
        self,
        experiment: str,
        header: Tuple[str, ...],
        rows: np.ndarray,
        q: np.ndarray,
        program: SequenceProgram,
        fit: Optional[FitResult] = None,
        report: Optional[Dict[str, str]] = None,
    ) -> ExperimentResult:
        result = ExperimentResult(experiment, header, rows, np.asarray(q), program, fit, dict(report or {}))
        if not self.write:
            return result
        out = self.output_dir
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{experiment.replace('-', '_')}.csv"
        write_csv(csv_path, header, rows)
        (out / "config_resolved.cfg").write_text(self.config.to_key_values(), encoding="utf-8")
        (out / "sequence.pseq").write_text(format_program(program), encoding="utf-8")
        (out / "metadata.txt").write_text(self._metadata(experiment, result.report), encoding="utf-8")
        if fit is not None:
            (out / "fit.txt").write_text(fit.to_text() + _key_values(result.report), encoding="utf-8")
            fit.write_csv(out / "fit.csv")
        if self.transient and len(result.q):
            index = int(np.argmax(np.abs(result.q)))
            times = np.linspace(0.0, self.config.kernel.repetition_time, 701)
            write_transient_csv(out / "transient.csv", float(result.q[index]), self.kernel, times)
        result.output_dir = out
        self.logger.info(f"{experiment}: {len(rows)} row(s) written to {csv_path}")
        return result

    def _metadata(self, experiment: str, report: Dict[str, str]) -> str:
        n_a, n_b = self.quad.nodes
        meta = {
            "experiment": experiment,
            "version": VERSION,
            "seed": str(self.config.seed),
            "quadrature": f"{self.quad.scheme}:{n_a}/{n_b}",
            "signal_weighting": self.config.signal_weighting,
            "repetition_time_s": repr(float(self.config.kernel.repetition_time)),
            "omega1_rad_s": f"{self.model.omega1:.10e}",
        }
        meta.update(report)
        return _key_values(meta)


def _key_values(values: Dict[str, str]) -> str:
    return "".join(f"{key}={value}\n" for key, value in values.items())


def write_csv(path: Union[str, Path], header: Sequence[str], rows: np.ndarray) -> Path:
    """Header row then one scientific-notation row per point; byte-stable for equal input."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{value:.10e}" for value in row])
    return path
