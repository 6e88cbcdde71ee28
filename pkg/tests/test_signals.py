import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgvsim.signals import (
    CanFrame, CodecError, LogParseError, SignalDef, SignalRangeWarning, TimedFrame, decode_raw,
    decode_signal, encode_signal, format_log_line, load_signal_dictionary, parse_log_line,
    read_log, write_log,
)


def test_encode_example_scale_point_four():
    sd = SignalDef("x", 0x10, 0, 8, 0.4, 0.0)
    out = encode_signal(sd, 50.0, CanFrame.zeros(0x10, 1))
    assert out.data == bytes([0x7D])
    assert decode_signal(sd, out) == pytest.approx(50.0)


def test_encode_zero_and_offset_only_decode():
    sd = SignalDef("x", 0x10, 0, 8, 1.0, 0.0)
    assert encode_signal(sd, 0.0, CanFrame.zeros(0x10, 1)).data == b"\x00"
    temp = SignalDef("t", 0x10, 0, 8, 1.0, -40.0)
    assert decode_signal(temp, CanFrame.zeros(0x10, 2)) == -40.0


def test_field_outside_frame_is_codec_error():
    sd = SignalDef("x", 0x10, 8, 16)
    with pytest.raises(CodecError):
        encode_signal(sd, 1.0, CanFrame.zeros(0x10, 2))
    with pytest.raises(CodecError):
        decode_signal(sd, CanFrame.zeros(0x10, 1))
    with pytest.raises(CodecError):
        decode_signal(sd, CanFrame.zeros(0x11, 8))


def test_out_of_range_clamps_with_warning():
    sd = SignalDef("x", 0x10, 0, 8, 1.0, 0.0)
    with pytest.warns(SignalRangeWarning):
        hi = encode_signal(sd, 300.0, CanFrame.zeros(0x10, 1))
    with pytest.warns(SignalRangeWarning):
        lo = encode_signal(sd, -5.0, CanFrame.zeros(0x10, 1))
    assert hi.data == b"\xff" and lo.data == b"\x00"
    with pytest.raises(CodecError):
        encode_signal(sd, float("nan"), CanFrame.zeros(0x10, 1))


@pytest.mark.parametrize("kwargs", [
    dict(start_bit=64, bit_length=1),
    dict(start_bit=0, bit_length=33),
    dict(start_bit=40, bit_length=30),
    dict(start_bit=0, bit_length=8, scale=0.0),
])
def test_signal_def_validation(kwargs):
    with pytest.raises(ValueError):
        SignalDef("bad", 1, **kwargs)


def test_frame_validation():
    with pytest.raises(ValueError):
        CanFrame(0x800)
    with pytest.raises(ValueError):
        CanFrame(1, bytes(9))
    with pytest.raises(ValueError):
        TimedFrame(-1.0, "pt", CanFrame(1))
    with pytest.raises(ValueError):
        TimedFrame(0.0, "p t", CanFrame(1))


@st.composite
def signal_and_value(draw):
    length = draw(st.integers(1, 32))
    start = draw(st.integers(0, 64 - length))
    scale = draw(st.sampled_from([1.0, 0.5, 0.1, 0.004, 0.03125, 2.0, 0.00390625]))
    offset = draw(st.sampled_from([0.0, -40.0, -273.0, 12.5]))
    sd = SignalDef("s", 0x55, start, length, scale, offset)
    lo, hi = sd.physical_range
    x = draw(st.floats(lo, hi, allow_nan=False))
    data = draw(st.binary(min_size=8, max_size=8))
    return sd, x, CanFrame(0x55, data)


@settings(max_examples=1000, deadline=None)
@given(signal_and_value())
def test_round_trip_within_half_scale(case):
    sd, x, frame = case
    y = decode_signal(sd, encode_signal(sd, x, frame))
    assert abs(y - x) <= abs(sd.scale) / 2 * (1 + 1e-9) + 1e-9 * max(1.0, abs(x))


@settings(max_examples=300, deadline=None)
@given(signal_and_value())
def test_encode_touches_only_its_bits(case):
    sd, x, frame = case
    out = encode_signal(sd, x, frame)
    mask = ((1 << sd.bit_length) - 1) << sd.start_bit
    before = int.from_bytes(frame.data, "little")
    after = int.from_bytes(out.data, "little")
    assert (before ^ after) & ~mask == 0
    assert decode_raw(sd, out) == (after & mask) >> sd.start_bit


def test_log_line_example_and_boundary():
    tf = TimedFrame(1.234, "pt", CanFrame(0x183, b"\x7d"))
    assert format_log_line(tf) == "(1.234000) pt 183#7D"
    parsed = parse_log_line("(0.000000) ch 388#01")
    assert parsed.frame.id == 0x388 == 904 and parsed.frame.data == b"\x01"
    assert format_log_line(TimedFrame(0.5, "ch", CanFrame(5))) == "(0.500000) ch 005#"


@pytest.mark.parametrize("line,offset", [
    ("1.0 pt 100#00", 0),
    ("(1.0) pt 100#00", 1),
    ("(1.000000)pt 100#00", 10),
    ("(1.000000) pt 1G0#00", 14),
    ("(1.000000) pt 800#00", 14),
    ("(1.000000) pt 100-00", 17),
    ("(1.000000) pt 100#0", 18),
    ("(1.000000) pt 100#0Z", 19),
    ("(1.000000) pt 100#" + "00" * 9, 18),
])
def test_malformed_log_lines_report_offset(line, offset):
    with pytest.raises(LogParseError) as info:
        parse_log_line(line)
    assert info.value.offset == offset


timed_frames = st.builds(
    TimedFrame,
    st.integers(0, 10**10).map(lambda us: us / 1e6),
    st.sampled_from(["pt", "ch", "can0"]),
    st.builds(CanFrame, st.integers(0, 0x7FF), st.binary(max_size=8)),
)


@settings(max_examples=500, deadline=None)
@given(timed_frames)
def test_log_format_parse_identity(tf):
    line = format_log_line(tf)
    assert parse_log_line(line) == tf
    assert format_log_line(parse_log_line(line)) == line


def test_read_write_log(tmp_path):
    frames = [TimedFrame(k * 0.1, "pt", CanFrame(k, bytes([k]))) for k in range(5)]
    write_log(tmp_path / "x.log", frames)
    assert read_log(tmp_path / "x.log") == frames


def test_bundled_dictionary():
    db = load_signal_dictionary()
    assert db.frame(387).name == "P_ENGINE_TEMP"
    assert db.frame(388).name == "C_FAN"
    assert db.frame_named("C_FAN").id == 388
    temp = db.signal("coolant_temp")
    frame = db.encode(387, {"coolant_temp": 95.5})
    assert decode_signal(temp, frame) == pytest.approx(95.5, abs=temp.scale / 2)
    for fd in db.frames.values():
        assert 0 <= fd.id <= 0x7FF and fd.dlc <= 8
    with pytest.raises(KeyError):
        db.signal("nope")


def test_dictionary_rejects_bad_files(tmp_path):
    bad = tmp_path / "d.json"
    bad.write_text('{"frames": [{"id": 1, "name": "A", "dlc": 1, "bus": "pt"}],'
                   '"signals": [{"name": "s", "frame_id": 1, "start_bit": 4, "bit_length": 8}]}')
    with pytest.raises(ValueError, match="does not fit"):
        load_signal_dictionary(bad)
    bad.write_text('{"frames": [], "signals": [{"name": "s", "frame_id": 1, "start_bit": 0, "bit_length": 8}]}')
    with pytest.raises(ValueError, match="undefined frame"):
        load_signal_dictionary(bad)


def test_in_range_encode_is_silent():
    sd = SignalDef("x", 1, 0, 8, 0.5)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        encode_signal(sd, 127.5, CanFrame.zeros(1, 1))
