import math
from decimal import Decimal

import numpy as np
import pytest

from pedmr_sim.errors import InvalidArgumentError, SequenceCompileError, SequenceParseError
from pedmr_sim.sequence_dsl import (
    Delay,
    DiagnosticCode,
    Pulse,
    check,
    compile_program,
    compile_source,
    cp_echo,
    duration_text,
    echo_decay,
    format_program,
    inversion_recovery,
    load_sequence,
    parse,
    rabi,
)

OMEGA1 = 2 * math.pi * 8.3915e6

HAHN = """#pseq v1
# Hahn echo with tomography pulse
let tau1 = 200ns
pulse 90 x
delay tau1
pulse 180 x
delay tau2      # swept below
pulse 90 x
sweep tau2 from 0ns to 900ns step 10ns
"""


def codes(source):
    return [d.code for d in check(source)]


def random_program(rng) -> str:
    """Well-formed program text with random statements, units and sweeps."""
    units = ["ns", "us", "ms"]
    lines = ["#pseq v1"] if rng.random() < 0.5 else []
    names = []
    for i in range(rng.integers(0, 3)):
        names.append(f"t{i}")
        lines.append(f"let t{i} = {rng.integers(0, 500)}.{rng.integers(0, 10)}{units[rng.integers(0, 2)]}")
    axes = [f"s{i}" for i in range(rng.integers(0, 3))]
    refs = names + axes
    for _ in range(rng.integers(1, 8)):
        kind = rng.integers(0, 3)
        phase = ["x", "y", "-x", "-y"][rng.integers(0, 4)]
        if kind == 0:
            lines.append(f"pulse {rng.integers(0, 361)}.{rng.integers(0, 100):02d} {phase}")
        elif kind == 1 and refs:
            lines.append(f"delay {refs[rng.integers(0, len(refs))]}")
        elif kind == 1:
            lines.append(f"delay {rng.integers(0, 1000)}{units[rng.integers(0, 3)]}")
        else:
            lines.append(f"pulse_t {rng.integers(1, 90)}ns {phase}")
    for axis in axes:
        start = rng.integers(0, 100)
        lines.append(f"sweep {axis} from {start}ns to {start + rng.integers(0, 50)}ns step {rng.integers(1, 11)}ns")
    return "\n".join(lines) + "\n"


def test_format_round_trip_on_generated_programs():
    rng = np.random.default_rng(11)
    for _ in range(50):
        program = parse(random_program(rng))
        text = format_program(program)
        assert parse(text) == program
        assert format_program(parse(text)) == text


def test_hahn_program_structure():
    program = parse(HAHN)
    assert [s.name for s in program.lets] == ["tau1"]
    assert [s.name for s in program.sweeps] == ["tau2"]
    assert len(program.body) == 5
    sequences = compile_program(program, OMEGA1)
    assert len(sequences) == 91
    assert sequences[0].value("tau2") == 0.0
    assert sequences[-1].value("tau2") == pytest.approx(900e-9, abs=1e-21)


def test_pulse_durations_follow_the_rotation_angle():
    sequence = compile_source("pulse 90 x\npulse 180 -y\n", OMEGA1)[0]
    quarter, half = sequence.events
    assert quarter.duration == pytest.approx(29.8e-9, abs=0.05e-9)
    assert half.duration == pytest.approx(2 * quarter.duration, rel=1e-15)
    assert half.phase == pytest.approx(1.5 * math.pi)


def test_cp_echo_rotates_by_two_pi():
    for sequence in compile_source(cp_echo(200e-9, (0.0, 400e-9, 100e-9)), OMEGA1):
        assert sequence.total_rotation == pytest.approx(2 * math.pi, rel=1e-15)
        pulses = [e for e in sequence.events if isinstance(e, Pulse)]
        delays = [e for e in sequence.events if isinstance(e, Delay)]
        assert [p.angle for p in pulses] == pytest.approx([math.pi / 2, math.pi, math.pi / 2])
        assert delays[0].duration == pytest.approx(200e-9)


def test_sweep_expansion_is_exact_in_decimal():
    program = parse("delay t\nsweep t from 0us to 1us step 0.1us\n")
    values = program.sweeps[0].exact_values()
    assert len(values) == 11
    assert values[-1] == Decimal("1e-6")


def test_sweep_stop_off_lattice_is_floored():
    program = parse("delay t\nsweep t from 0ns to 25ns step 10ns\n")
    assert program.sweeps[0].values() == pytest.approx((0.0, 10e-9, 20e-9))


def test_two_axes_expand_outer_first():
    sequences = compile_source(echo_decay((100e-9, 300e-9, 100e-9), (0.0, 100e-9, 50e-9)), OMEGA1)
    points = [(s.value("tau"), s.value("dtau")) for s in sequences]
    assert len(points) == 9
    assert points[:3] == pytest.approx([(100e-9, 0.0), (100e-9, 50e-9), (100e-9, 100e-9)])


def test_echo_decay_without_offsets_is_symmetric():
    program = parse(echo_decay((100e-9, 300e-9, 100e-9)))
    assert [s.name for s in program.sweeps] == ["tau"]
    sequence = compile_program(program, OMEGA1)[1]
    delays = [e.duration for e in sequence.events if isinstance(e, Delay)]
    assert delays == pytest.approx([200e-9, 200e-9])


def test_rabi_builder_allows_zero_drive():
    sequences = compile_source(rabi(100e-9, 10e-9), 0.0)
    assert len(sequences) == 11
    assert all(s.total_rotation == 0.0 for s in sequences)


def test_inversion_recovery_builder():
    sequences = compile_source(inversion_recovery((0.0, 1e-6, 0.5e-6), 200e-9), OMEGA1)
    assert len(sequences) == 3
    assert sequences[0].total_rotation == pytest.approx(3 * math.pi)
    assert sequences[2].value("t_rec") == pytest.approx(1e-6)


def test_angle_pulse_needs_a_drive():
    with pytest.raises(SequenceCompileError):
        compile_source("pulse 90 x\n", 0.0)


@pytest.mark.parametrize(
    "source, expected",
    [
        ("pulse 90 z\n", DiagnosticCode.SYNTAX),
        ("wait 10ns\n", DiagnosticCode.SYNTAX),
        ("delay 10\n", DiagnosticCode.UNIT),
        ("delay 10s\n", DiagnosticCode.UNIT),
        ("delay tau\n", DiagnosticCode.UNDEFINED),
        ("let a = 1ns\nlet a = 2ns\n", DiagnosticCode.DUPLICATE),
        ("let a = 1ns\ndelay a\nsweep a from 0ns to 1ns step 1ns\n", DiagnosticCode.DUPLICATE),
        ("delay t\nsweep t from 0ns to 10ns step 0ns\n", DiagnosticCode.SWEEP),
        ("delay t\nsweep t from 20ns to 10ns step 1ns\n", DiagnosticCode.SWEEP),
        ("#pseq v2\npulse 90 x\n", DiagnosticCode.SYNTAX),
    ],
)
def test_diagnostic_codes(source, expected):
    assert expected in codes(source)


def test_at_most_two_sweep_axes():
    source = (
        "delay a\ndelay b\ndelay c\n"
        "sweep a from 0ns to 1ns step 1ns\n"
        "sweep b from 0ns to 1ns step 1ns\n"
        "sweep c from 0ns to 1ns step 1ns\n"
    )
    assert codes(source).count(DiagnosticCode.SWEEP) == 1


def test_diagnostics_locate_the_token():
    diagnostics = check("pulse 90 x\ndelay   200fs\n")
    assert len(diagnostics) == 1
    found = diagnostics[0]
    assert (found.line, found.column, found.token) == (2, 9, "200fs")
    assert str(found).startswith("2:9: UNIT '200fs'")


def test_parser_collects_every_diagnostic():
    with pytest.raises(SequenceParseError) as info:
        parse("delay x1\npulse 90 q\ndelay 5\n")
    assert [d.line for d in info.value.diagnostics] == [1, 2, 3]


def test_clean_program_has_no_diagnostics():
    assert check(HAHN) == []


def test_load_sequence_strips_byte_order_mark(tmp_path):
    path = tmp_path / "hahn.pseq"
    path.write_bytes(b"\xef\xbb\xbf" + HAHN.encode("utf-8"))
    assert parse(load_sequence(path)) == parse(HAHN)


def test_crlf_line_endings(tmp_path):
    crlf = HAHN.replace("\n", "\r\n")
    assert parse(crlf) == parse(HAHN)
    path = tmp_path / "hahn.pseq"
    path.write_bytes(crlf.encode("utf-8"))
    assert parse(load_sequence(path)) == parse(HAHN)
    found = check("pulse 90 x\r\ndelay   200fs\r\n")
    assert [(d.line, d.column, d.token) for d in found] == [(2, 9, "200fs")]


def test_duration_text():
    assert duration_text(200e-9) == "200ns"
    assert duration_text(29.75e-9) == "29.75ns"
    assert duration_text(1e-6) == "1000ns"
    assert duration_text(np.float64(200e-9)) == "200ns"
    with pytest.raises(InvalidArgumentError):
        duration_text(-1e-9)
