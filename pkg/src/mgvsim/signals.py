"""CAN frames, scale/offset signal codecs and the text log format.

Signals are packed little-endian (Intel order) as unsigned raw integers:
``physical = raw * scale + offset``.  Log lines follow a candump-like grammar::

    (1.234000) pt 183#7D
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

MAX_ID = 0x7FF
MAX_DLC = 8


class CodecError(ValueError):
    """A signal field does not fit in the frame it is applied to."""


class SignalRangeWarning(UserWarning):
    """A physical value was clamped to the representable raw range."""


class LogParseError(ValueError):
    def __init__(self, message: str, line: str, offset: int):
        super().__init__(f"{message} at byte {offset}: {line!r}")
        self.line = line
        self.offset = offset


@dataclass(frozen=True)
class CanFrame:
    id: int
    data: bytes = b""

    def __post_init__(self):
        if not isinstance(self.data, bytes):
            object.__setattr__(self, "data", bytes(self.data))
        if not 0 <= self.id <= MAX_ID:
            raise ValueError(f"CAN id {self.id:#x} outside 11-bit range")
        if len(self.data) > MAX_DLC:
            raise ValueError(f"dlc {len(self.data)} exceeds {MAX_DLC}")

    @property
    def dlc(self) -> int:
        return len(self.data)

    @classmethod
    def zeros(cls, frame_id: int, dlc: int) -> "CanFrame":
        return cls(frame_id, bytes(dlc))


@dataclass(frozen=True)
class SignalDef:
    name: str
    frame_id: int
    start_bit: int
    bit_length: int
    scale: float = 1.0
    offset: float = 0.0
    unit: str = ""

    def __post_init__(self):
        if not 0 <= self.start_bit <= 63:
            raise ValueError(f"{self.name}: start_bit {self.start_bit} outside 0..63")
        if not 1 <= self.bit_length <= 32:
            raise ValueError(f"{self.name}: bit_length {self.bit_length} outside 1..32")
        if self.start_bit + self.bit_length > 64:
            raise ValueError(f"{self.name}: field runs past bit 63")
        if self.scale == 0:
            raise ValueError(f"{self.name}: scale must be non-zero")

    @property
    def raw_max(self) -> int:
        return (1 << self.bit_length) - 1

    @property
    def physical_range(self) -> tuple[float, float]:
        ends = (self.offset, self.raw_max * self.scale + self.offset)
        return min(ends), max(ends)


@dataclass(frozen=True)
class TimedFrame:
    """A frame seen on a named bus; timestamps carry microsecond precision."""

    timestamp: float
    bus: str
    frame: CanFrame = field(compare=True)

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError("timestamp must be non-negative")
        if not self.bus or any(c.isspace() for c in self.bus):
            raise ValueError(f"bus name {self.bus!r} must be non-empty without whitespace")
        object.__setattr__(self, "timestamp", round(self.timestamp, 6))


def _check_fits(defn: SignalDef, frame: CanFrame):
    if defn.frame_id != frame.id:
        raise CodecError(
            f"signal {defn.name} belongs to frame {defn.frame_id:#x}, got {frame.id:#x}"
        )
    if defn.start_bit + defn.bit_length > frame.dlc * 8:
        raise CodecError(
            f"signal {defn.name} needs {defn.start_bit + defn.bit_length} bits, "
            f"frame {frame.id:#x} has dlc {frame.dlc}"
        )


def to_raw(defn: SignalDef, physical: float) -> int:
    if math.isnan(physical):
        raise CodecError(f"cannot encode NaN into {defn.name}")
    raw = (physical - defn.offset) / defn.scale
    if raw < 0 or raw > defn.raw_max:
        warnings.warn(
            f"{defn.name}={physical!r} outside representable range {defn.physical_range}",
            SignalRangeWarning,
            stacklevel=3,
        )
        return 0 if raw < 0 else defn.raw_max
    return min(int(round(raw)), defn.raw_max)


def encode_signal(defn: SignalDef, physical: float, frame: CanFrame) -> CanFrame:
    """Return ``frame`` with the bits of ``defn`` replaced by ``physical``.

    Out-of-range values saturate at the raw limits and emit a
    :class:`SignalRangeWarning`.
    """
    _check_fits(defn, frame)
    raw = to_raw(defn, physical)
    word = int.from_bytes(frame.data, "little")
    mask = defn.raw_max << defn.start_bit
    word = (word & ~mask) | (raw << defn.start_bit)
    return CanFrame(frame.id, word.to_bytes(frame.dlc, "little"))


def decode_raw(defn: SignalDef, frame: CanFrame) -> int:
    _check_fits(defn, frame)
    word = int.from_bytes(frame.data, "little")
    return (word >> defn.start_bit) & defn.raw_max


def decode_signal(defn: SignalDef, frame: CanFrame) -> float:
    return decode_raw(defn, frame) * defn.scale + defn.offset


# -- log lines -------------------------------------------------------------

_HEX = "0123456789ABCDEFabcdef"


def format_log_line(tf: TimedFrame) -> str:
    return f"({tf.timestamp:.6f}) {tf.bus} {tf.frame.id:03X}#{tf.frame.data.hex().upper()}"


def parse_log_line(text: str) -> TimedFrame:
    line = text.rstrip("\n")
    if not line.startswith("("):
        raise LogParseError("expected '('", line, 0)
    close = line.find(")")
    if close < 0:
        raise LogParseError("missing ')'", line, len(line))
    ts_text = line[1:close]
    whole, dot, frac = ts_text.partition(".")
    if not (whole.isdigit() and dot and len(frac) == 6 and frac.isdigit()):
        raise LogParseError("timestamp must be <digits>.<6 digits>", line, 1)
    pos = close + 1
    if line[pos : pos + 1] != " ":
        raise LogParseError("expected ' ' after timestamp", line, pos)
    pos += 1
    space = line.find(" ", pos)
    if space <= pos:
        raise LogParseError("expected bus name", line, pos)
    bus = line[pos:space]
    pos = space + 1
    id_text = line[pos : pos + 3]
    if len(id_text) != 3 or any(c not in _HEX for c in id_text):
        raise LogParseError("expected 3 hex digit identifier", line, pos)
    frame_id = int(id_text, 16)
    if frame_id > MAX_ID:
        raise LogParseError(f"identifier {frame_id:#x} exceeds 0x7FF", line, pos)
    pos += 3
    if line[pos : pos + 1] != "#":
        raise LogParseError("expected '#'", line, pos)
    pos += 1
    payload = line[pos:]
    if len(payload) % 2 or len(payload) > 2 * MAX_DLC:
        raise LogParseError("payload must be 0..8 bytes of hex pairs", line, pos)
    for k, c in enumerate(payload):
        if c not in _HEX:
            raise LogParseError("non-hex payload character", line, pos + k)
    return TimedFrame(float(ts_text), bus, CanFrame(frame_id, bytes.fromhex(payload)))


def read_log(path) -> list[TimedFrame]:
    with open(path) as fh:
        return [parse_log_line(line) for line in fh if line.strip()]


def write_log(path, frames) -> None:
    with open(path, "w", newline="\n") as fh:
        for tf in frames:
            fh.write(format_log_line(tf) + "\n")


# -- signal dictionary -----------------------------------------------------


@dataclass(frozen=True)
class FrameDef:
    id: int
    name: str
    dlc: int
    bus: str
    watermark_bit: int | None = None


@dataclass
class SignalDictionary:
    frames: dict[int, FrameDef]
    signals: dict[str, SignalDef]

    def signal(self, name: str) -> SignalDef:
        try:
            return self.signals[name]
        except KeyError:
            raise KeyError(f"unknown signal {name!r}") from None

    def frame(self, frame_id: int) -> FrameDef:
        try:
            return self.frames[frame_id]
        except KeyError:
            raise KeyError(f"unknown frame id {frame_id:#x}") from None

    def frame_named(self, name: str) -> FrameDef:
        for fd in self.frames.values():
            if fd.name == name:
                return fd
        raise KeyError(f"unknown frame {name!r}")

    def signals_of(self, frame_id: int) -> list[SignalDef]:
        return [s for s in self.signals.values() if s.frame_id == frame_id]

    def blank(self, frame_id: int) -> CanFrame:
        return CanFrame.zeros(frame_id, self.frame(frame_id).dlc)

    def encode(self, frame_id: int, values: dict[str, float], base: CanFrame | None = None) -> CanFrame:
        frame = base if base is not None else self.blank(frame_id)
        for name, value in values.items():
            frame = encode_signal(self.signal(name), value, frame)
        return frame


def _parse_id(value) -> int:
    if isinstance(value, str):
        return int(value, 0)
    return int(value)


def load_signal_dictionary(path=None) -> SignalDictionary:
    """Load a JSON signal dictionary; ``None`` loads the bundled one."""
    if path is None:
        text = resources.files("mgvsim").joinpath("data/signals.json").read_text()
    else:
        text = Path(path).read_text()
    doc = json.loads(text)
    frames = {}
    for entry in doc["frames"]:
        fd = FrameDef(
            id=_parse_id(entry["id"]),
            name=entry["name"],
            dlc=int(entry["dlc"]),
            bus=entry["bus"],
            watermark_bit=entry.get("watermark_bit"),
        )
        if fd.id in frames:
            raise ValueError(f"duplicate frame id {fd.id:#x}")
        frames[fd.id] = fd
    signals = {}
    for entry in doc["signals"]:
        sd = SignalDef(
            name=entry["name"],
            frame_id=_parse_id(entry["frame_id"]),
            start_bit=int(entry["start_bit"]),
            bit_length=int(entry["bit_length"]),
            scale=float(entry.get("scale", 1.0)),
            offset=float(entry.get("offset", 0.0)),
            unit=entry.get("unit", ""),
        )
        if sd.name in signals:
            raise ValueError(f"duplicate signal {sd.name!r}")
        if sd.frame_id not in frames:
            raise ValueError(f"signal {sd.name!r} references undefined frame {sd.frame_id:#x}")
        if sd.start_bit + sd.bit_length > frames[sd.frame_id].dlc * 8:
            raise ValueError(f"signal {sd.name!r} does not fit its frame")
        signals[sd.name] = sd
    return SignalDictionary(frames, signals)
