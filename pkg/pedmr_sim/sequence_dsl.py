"""
Pulse-sequence language (``.pseq``), parser, compiler and canonical builders.

Grammar, one statement per line, ``#`` starts a comment::

    #pseq v1
    let <ident> = <duration>
    pulse <angle_deg> <x|y|-x|-y>
    pulse_t <duration-or-ident> <x|y|-x|-y>
    delay <duration-or-ident>
    sweep <ident> from <duration> to <duration> step <duration>

Durations are decimals with a unit suffix (ns, us, ms). At most two sweep
axes; the first declared axis is the outer loop of the expansion.
"""
import itertools
import logging
import math
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .errors import InvalidArgumentError, SequenceCompileError, SequenceParseError

logger = logging.getLogger(__name__)

GRAMMAR_VERSION = 1
MAX_SWEEP_AXES = 2

UNIT_SCALE = {"ns": Decimal("1e-9"), "us": Decimal("1e-6"), "ms": Decimal("1e-3")}
PHASES = {"x": 0.0, "y": 0.5 * math.pi, "-x": math.pi, "-y": 1.5 * math.pi}

_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_NUMBER = re.compile(r"^(\d+(?:\.\d*)?|\.\d+)$")
_DURATION = re.compile(r"^(\d+(?:\.\d*)?|\.\d+)(\S*)$")
_HEADER = re.compile(r"^#\s*pseq\b(.*)$")
_HEADER_VERSION = re.compile(r"^\s+v(\d+)\s*$")
_TOKEN = re.compile(r"\S+")


class DiagnosticCode(str, Enum):
    SYNTAX = "syntax"
    UNIT = "unit"
    UNDEFINED = "undefined"
    DUPLICATE = "duplicate"
    SWEEP = "sweep"


@dataclass(frozen=True)
class Diagnostic:
    code: DiagnosticCode
    line: int
    column: int
    token: str
    message: str

    def __str__(self) -> str:
        return f"{self.line}:{self.column}: {self.code.value.upper()} {self.token!r}: {self.message}"


@dataclass(frozen=True)
class Duration:
    value: Decimal
    unit: str

    @property
    def exact_seconds(self) -> Decimal:
        return self.value * UNIT_SCALE[self.unit]

    @property
    def seconds(self) -> float:
        return float(self.exact_seconds)

    def __str__(self) -> str:
        return f"{format(self.value, 'f')}{self.unit}"


DurationRef = Union[Duration, str]


@dataclass(frozen=True)
class LetStmt:
    name: str
    value: Duration
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class PulseStmt:
    angle_deg: Decimal
    phase: str
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class TimedPulseStmt:
    duration: DurationRef
    phase: str
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class DelayStmt:
    duration: DurationRef
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class SweepStmt:
    name: str
    start: Duration
    stop: Duration
    step: Duration
    line: int = field(default=0, compare=False)

    def exact_values(self) -> List[Decimal]:
        start, stop, step = self.start.exact_seconds, self.stop.exact_seconds, self.step.exact_seconds
        count = int((stop - start) // step) + 1
        return [start + i * step for i in range(count)]

    def values(self) -> Tuple[float, ...]:
        return tuple(float(v) for v in self.exact_values())


BodyStmt = Union[PulseStmt, TimedPulseStmt, DelayStmt]


@dataclass(frozen=True)
class SequenceProgram:
    """Parsed, validated sequence before timing is resolved."""

    lets: Tuple[LetStmt, ...] = ()
    body: Tuple[BodyStmt, ...] = ()
    sweeps: Tuple[SweepStmt, ...] = ()
    version: int = GRAMMAR_VERSION


@dataclass(frozen=True)
class Pulse:
    angle: float
    phase: float
    duration: float


@dataclass(frozen=True)
class Delay:
    duration: float


Event = Union[Pulse, Delay]


@dataclass(frozen=True)
class PulseSequence:
    """Flat timeline for one sweep point."""

    events: Tuple[Event, ...] = ()
    sweep_axes: Tuple[Tuple[str, Tuple[float, ...]], ...] = ()
    point: Tuple[Tuple[str, float], ...] = ()

    @property
    def total_duration(self) -> float:
        return math.fsum(event.duration for event in self.events)

    @property
    def total_rotation(self) -> float:
        return math.fsum(event.angle for event in self.events if isinstance(event, Pulse))

    def value(self, name: str) -> float:
        return dict(self.point)[name]


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.diagnostics: List[Diagnostic] = []
        self.lets: List[LetStmt] = []
        self.body: List[BodyStmt] = []
        self.sweeps: List[SweepStmt] = []
        self.version = GRAMMAR_VERSION
        # (name, line, column) of every identifier use
        self.uses: List[Tuple[str, int, int]] = []
        self.definitions: Dict[str, int] = {}

    def error(self, code: DiagnosticCode, line: int, column: int, token: str, message: str) -> None:
        self.diagnostics.append(Diagnostic(code, line, column, token, message))

    def run(self) -> SequenceProgram:
        seen_content = False
        for number, raw in enumerate(self.text.splitlines(), start=1):
            stripped = raw.strip()
            if not stripped:
                continue
            if not seen_content:
                seen_content = True
                header = _HEADER.match(stripped)
                if header:
                    self._header(header.group(1), number, raw)
                    continue
            code_part = raw.split("#", 1)[0]
            tokens = [(m.group(0), m.start() + 1) for m in _TOKEN.finditer(code_part)]
            if tokens:
                self._statement(tokens, number)
        self._resolve()
        if self.diagnostics:
            raise SequenceParseError(self.diagnostics)
        return SequenceProgram(tuple(self.lets), tuple(self.body), tuple(self.sweeps), self.version)

    def _header(self, rest: str, number: int, raw: str) -> None:
        match = _HEADER_VERSION.match(rest)
        column = raw.index("#") + 1
        if not match:
            self.error(DiagnosticCode.SYNTAX, number, column, raw.strip(), "malformed header, expected '#pseq v1'")
            return
        self.version = int(match.group(1))
        if self.version != GRAMMAR_VERSION:
            self.error(DiagnosticCode.SYNTAX, number, column, raw.strip(),
                       f"unsupported grammar version {self.version}")

    def _statement(self, tokens: List[Tuple[str, int]], number: int) -> None:
        keyword, column = tokens[0]
        handler = {
            "let": self._let,
            "pulse": self._pulse,
            "pulse_t": self._timed_pulse,
            "delay": self._delay,
            "sweep": self._sweep,
        }.get(keyword)
        if handler is None:
            self.error(DiagnosticCode.SYNTAX, number, column, keyword, "unknown statement")
            return
        handler(tokens, number)

    def _arity(self, tokens, count: int, number: int, usage: str) -> bool:
        if len(tokens) == count:
            return True
        token, column = tokens[min(len(tokens), count) - 1] if len(tokens) < count else tokens[count]
        self.error(DiagnosticCode.SYNTAX, number, column, token, f"expected '{usage}'")
        return False

    def _let(self, tokens, number: int) -> None:
        if not self._arity(tokens, 4, number, "let <ident> = <duration>"):
            return
        (name, name_col), (eq, eq_col), (value, value_col) = tokens[1], tokens[2], tokens[3]
        if eq != "=":
            self.error(DiagnosticCode.SYNTAX, number, eq_col, eq, "expected '='")
            return
        if not self._identifier(name, number, name_col):
            return
        duration = self._duration(value, value_col, number)
        if duration is None or not self._define(name, number, name_col):
            return
        self.lets.append(LetStmt(name, duration, number))

    def _pulse(self, tokens, number: int) -> None:
        if not self._arity(tokens, 3, number, "pulse <angle_deg> <phase>"):
            return
        (angle, angle_col), (phase, phase_col) = tokens[1], tokens[2]
        if not _NUMBER.match(angle):
            self.error(DiagnosticCode.SYNTAX, number, angle_col, angle, "angle must be a non-negative decimal in degrees")
            return
        if self._phase(phase, number, phase_col):
            self.body.append(PulseStmt(Decimal(angle), phase, number))

    def _timed_pulse(self, tokens, number: int) -> None:
        if not self._arity(tokens, 3, number, "pulse_t <duration-or-ident> <phase>"):
            return
        (value, value_col), (phase, phase_col) = tokens[1], tokens[2]
        ref = self._reference(value, number, value_col)
        if ref is not None and self._phase(phase, number, phase_col):
            self.body.append(TimedPulseStmt(ref, phase, number))

    def _delay(self, tokens, number: int) -> None:
        if not self._arity(tokens, 2, number, "delay <duration-or-ident>"):
            return
        value, value_col = tokens[1]
        ref = self._reference(value, number, value_col)
        if ref is not None:
            self.body.append(DelayStmt(ref, number))

    def _sweep(self, tokens, number: int) -> None:
        usage = "sweep <ident> from <duration> to <duration> step <duration>"
        if not self._arity(tokens, 8, number, usage):
            return
        for index, expected in ((2, "from"), (4, "to"), (6, "step")):
            token, column = tokens[index]
            if token != expected:
                self.error(DiagnosticCode.SYNTAX, number, column, token, f"expected '{expected}'")
                return
        name, name_col = tokens[1]
        if not self._identifier(name, number, name_col):
            return
        start = self._duration(*tokens[3], number=number)
        stop = self._duration(*tokens[5], number=number)
        step = self._duration(*tokens[7], number=number)
        if start is None or stop is None or step is None:
            return
        if step.exact_seconds <= 0:
            self.error(DiagnosticCode.SWEEP, number, tokens[7][1], tokens[7][0], "sweep step must be positive")
            return
        if stop.exact_seconds < start.exact_seconds:
            self.error(DiagnosticCode.SWEEP, number, tokens[5][1], tokens[5][0], "sweep end lies before its start")
            return
        if len(self.sweeps) >= MAX_SWEEP_AXES:
            self.error(DiagnosticCode.SWEEP, number, tokens[0][1], tokens[0][0],
                       f"at most {MAX_SWEEP_AXES} sweep axes are supported")
            return
        if self._define(name, number, name_col):
            self.sweeps.append(SweepStmt(name, start, stop, step, number))

    def _identifier(self, token: str, number: int, column: int) -> bool:
        if _IDENT.match(token):
            return True
        self.error(DiagnosticCode.SYNTAX, number, column, token, "not a valid identifier")
        return False

    def _define(self, name: str, number: int, column: int) -> bool:
        if name in self.definitions:
            self.error(DiagnosticCode.DUPLICATE, number, column, name,
                       f"already defined on line {self.definitions[name]}")
            return False
        self.definitions[name] = number
        return True

    def _phase(self, token: str, number: int, column: int) -> bool:
        if token in PHASES:
            return True
        self.error(DiagnosticCode.SYNTAX, number, column, token, "phase must be one of x, y, -x, -y")
        return False

    def _duration(self, token: str, column: int, number: int) -> Optional[Duration]:
        match = _DURATION.match(token)
        if not match:
            self.error(DiagnosticCode.SYNTAX, number, column, token, "expected a duration such as 200ns")
            return None
        value, unit = match.groups()
        if unit not in UNIT_SCALE:
            reason = "missing time unit" if not unit else f"unknown time unit '{unit}'"
            self.error(DiagnosticCode.UNIT, number, column, token, f"{reason}, use ns, us or ms")
            return None
        try:
            return Duration(Decimal(value), unit)
        except InvalidOperation:
            self.error(DiagnosticCode.SYNTAX, number, column, token, "malformed number")
            return None

    def _reference(self, token: str, number: int, column: int) -> Optional[DurationRef]:
        if _IDENT.match(token):
            self.uses.append((token, number, column))
            return token
        return self._duration(token, column, number)

    def _resolve(self) -> None:
        for name, number, column in self.uses:
            if name not in self.definitions:
                self.error(DiagnosticCode.UNDEFINED, number, column, name, "undefined variable")
        self.diagnostics.sort(key=lambda d: (d.line, d.column))


def parse(source: str) -> SequenceProgram:
    """
    Parse DSL text into a SequenceProgram.

    Raises:
        SequenceParseError: carrying every diagnostic found in the text
    """
    if source.startswith("\ufeff"):
        source = source[1:]
    return _Parser(source).run()


def check(source: str) -> List[Diagnostic]:
    """Diagnostics for ``source``; empty when it parses cleanly."""
    try:
        parse(source)
    except SequenceParseError as exc:
        return list(exc.diagnostics)
    return []


def load_sequence(path: Union[str, Path]) -> str:
    return Path(path).read_text(encoding="utf-8-sig")


def _ref_text(ref: DurationRef) -> str:
    return ref if isinstance(ref, str) else str(ref)


def format_program(program: SequenceProgram) -> str:
    """Canonical text: header, lets, body, sweeps."""
    out = [f"#pseq v{program.version}"]
    out += [f"let {s.name} = {s.value}" for s in program.lets]
    for stmt in program.body:
        if isinstance(stmt, PulseStmt):
            out.append(f"pulse {format(stmt.angle_deg, 'f')} {stmt.phase}")
        elif isinstance(stmt, TimedPulseStmt):
            out.append(f"pulse_t {_ref_text(stmt.duration)} {stmt.phase}")
        else:
            out.append(f"delay {_ref_text(stmt.duration)}")
    out += [f"sweep {s.name} from {s.start} to {s.stop} step {s.step}" for s in program.sweeps]
    return "\n".join(out) + "\n"


def compile_program(program: SequenceProgram, omega1: float) -> List[PulseSequence]:
    """
    Resolve timing and expand sweeps.

    Args:
        program: parsed sequence
        omega1: angular Rabi frequency in rad/s used to turn angles into durations

    Returns:
        One PulseSequence per sweep point, outer axis first

    Raises:
        SequenceCompileError: if an angle pulse meets omega1 <= 0
    """
    has_angle_pulse = any(isinstance(stmt, PulseStmt) for stmt in program.body)
    if has_angle_pulse and not omega1 > 0:
        raise SequenceCompileError(f"angle pulses need omega1 > 0, got {omega1}")
    if not math.isfinite(omega1) or omega1 < 0:
        raise SequenceCompileError(f"omega1 must be finite and >= 0, got {omega1}")

    constants = {stmt.name: stmt.value.seconds for stmt in program.lets}
    axes = tuple((sweep.name, sweep.values()) for sweep in program.sweeps)
    names = [name for name, _ in axes]
    sequences = []
    for combo in itertools.product(*(values for _, values in axes)):
        env = dict(constants)
        env.update(zip(names, combo))
        events = tuple(_event(stmt, env, omega1) for stmt in program.body)
        sequences.append(PulseSequence(events, axes, tuple(zip(names, combo))))
    logger.debug(f"Compiled {len(sequences)} sequence(s) with {len(program.body)} event(s) each")
    return sequences


def _event(stmt: BodyStmt, env: Dict[str, float], omega1: float) -> Event:
    if isinstance(stmt, PulseStmt):
        angle = float(stmt.angle_deg / Decimal(180)) * math.pi
        return Pulse(angle, PHASES[stmt.phase], angle / omega1)
    duration = env[stmt.duration] if isinstance(stmt.duration, str) else stmt.duration.seconds
    if isinstance(stmt, TimedPulseStmt):
        return Pulse(omega1 * duration, PHASES[stmt.phase], duration)
    return Delay(duration)


def compile_source(source: str, omega1: float) -> List[PulseSequence]:
    return compile_program(parse(source), omega1)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

Range = Tuple[float, float, float]


def duration_text(seconds: Union[float, str]) -> str:
    """Render seconds as an exact ns literal (femtosecond resolution)."""
    if isinstance(seconds, str):
        return seconds
    if not math.isfinite(seconds) or seconds < 0:
        raise InvalidArgumentError(f"durations must be finite and >= 0, got {seconds}")
    value = Decimal(repr(float(round(seconds * 1e9, 6)))).normalize()
    return f"{format(value, 'f')}ns"


def _check_range(name: str, span: Range) -> None:
    start, stop, step = span
    if not (start >= 0 and stop >= start and step > 0):
        raise InvalidArgumentError(f"{name}: expected 0 <= start <= stop and step > 0, got {span}")


def _sweep_line(name: str, span: Range) -> str:
    start, stop, step = span
    return f"sweep {name} from {duration_text(start)} to {duration_text(stop)} step {duration_text(step)}"


def rabi(t_max: float, step: float, phase: str = "x") -> str:
    """Single pulse of swept length t_rabi from 0 to t_max."""
    _check_range("rabi", (0.0, t_max, step))
    return "\n".join([
        "#pseq v1",
        "# Rabi nutation: pulse length swept",
        f"pulse_t t_rabi {phase}",
        _sweep_line("t_rabi", (0.0, t_max, step)),
    ]) + "\n"


def cp_echo(tau1: float, tau2_range: Range) -> str:
    """π/2 – τ₁ – π – τ₂ – π/2 with τ₂ swept."""
    _check_range("cp_echo", tau2_range)
    return "\n".join([
        "#pseq v1",
        "# Carr-Purcell echo with tomography pulse",
        f"let tau1 = {duration_text(tau1)}",
        "pulse 90 x",
        "delay tau1",
        "pulse 180 x",
        "delay tau2",
        "pulse 90 x",
        _sweep_line("tau2", tau2_range),
    ]) + "\n"


def echo_decay(tau_range: Range, offset_range: Optional[Range] = None) -> str:
    """
    π/2 – τ – π – τ – π/2 with τ swept.

    With ``offset_range`` a second axis ``dtau`` lengthens the second free
    evolution, giving off-echo reference points next to every τ.
    """
    _check_range("echo_decay", tau_range)
    lines = [
        "#pseq v1",
        "# echo decay: symmetric free evolution",
        "pulse 90 x",
        "delay tau",
        "pulse 180 x",
        "delay tau",
    ]
    if offset_range is not None:
        _check_range("echo_decay offsets", offset_range)
        lines.append("delay dtau")
    lines += ["pulse 90 x", _sweep_line("tau", tau_range)]
    if offset_range is not None:
        lines.append(_sweep_line("dtau", offset_range))
    return "\n".join(lines) + "\n"


def inversion_recovery(t_range: Range, probe_tau: float) -> str:
    """Inversion pulse, swept recovery time, then a read-out echo at fixed τ."""
    _check_range("inversion_recovery", t_range)
    return "\n".join([
        "#pseq v1",
        "# inversion recovery probed by an echo",
        f"let tau = {duration_text(probe_tau)}",
        "pulse 180 x",
        "delay t_rec",
        "pulse 90 x",
        "delay tau",
        "pulse 180 x",
        "delay tau",
        "pulse 90 x",
        _sweep_line("t_rec", t_range),
    ]) + "\n"


def axis_names(program: SequenceProgram) -> Sequence[str]:
    return [sweep.name for sweep in program.sweeps]
