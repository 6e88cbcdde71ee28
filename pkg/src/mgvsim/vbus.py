"""Virtual broadcast CAN bus, filter chains and the CAN <-> text gateway.

A :class:`Bus` works in discrete delivery rounds.  Frames published during
round ``k`` are delivered to every tap except their source when
:meth:`Bus.deliver` runs, ordered by identifier (lowest wins arbitration)
and then by submission order.  Frames published from inside a delivery
callback land in the next round.
"""
from __future__ import annotations

import json
import math
import socket
from collections import Counter, deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Optional

from .signals import (
    CanFrame,
    SignalDef,
    SignalDictionary,
    TimedFrame,
    decode_signal,
    encode_signal,
)

TOPICS = ("SimToVis", "VisToSim")


class BusConfigError(ValueError):
    pass


class BusUsageError(RuntimeError):
    pass


class GatewayError(ValueError):
    def __init__(self, message: str, line: str):
        super().__init__(f"{message}: {line!r}")
        self.line = line


# A filter stage returns the frame unchanged (pass), a different frame
# (replace) or None (drop).
FilterStage = Callable[[CanFrame, float], Optional[CanFrame]]


class FilterChain:
    def __init__(self, stages: Iterable[FilterStage] = ()):
        self.stages: list[FilterStage] = list(stages)

    def append(self, stage: FilterStage) -> None:
        self.stages.append(stage)

    def __call__(self, frame: CanFrame, now: float) -> CanFrame | None:
        for stage in self.stages:
            frame = stage(frame, now)
            if frame is None:
                return None
        return frame

    def __len__(self):
        return len(self.stages)


@dataclass(eq=False)
class Tap:
    name: str
    bus: "Bus"
    filters: FilterChain
    on_frame: Callable[[TimedFrame], None] | None = None
    inbox: deque = field(default_factory=deque)
    sent: int = 0
    received: int = 0
    dropped: int = 0
    attached: bool = True
    # applied to this tap's own frames before they reach the bus
    outbound: FilterChain | None = None

    def publish(self, frame: CanFrame, now: float) -> bool:
        if self.outbound:
            frame = self.outbound(frame, now)
            if frame is None:
                return False
        return self.bus.publish(self, frame, now)

    def drain(self) -> list[TimedFrame]:
        frames = list(self.inbox)
        self.inbox.clear()
        return frames

    def detach(self) -> None:
        self.bus.detach(self)


class Bus:
    def __init__(self, name: str, record: bool = True):
        self.name = name
        self.taps: list[Tap] = []
        self.pending: list[tuple[int, int, TimedFrame, Tap]] = []
        self.rounds = 0
        self._seq = 0
        # in-line stages seen by every receiver (man-in-the-middle placement)
        self.inline = FilterChain()
        self.inline_dropped = 0
        # every accepted frame with its source tap, in delivery order
        self.record = record
        self.history: list[tuple[TimedFrame, str]] = []

    def attach_tap(
        self,
        name: str,
        filters: FilterChain | None = None,
        on_frame: Callable[[TimedFrame], None] | None = None,
    ) -> Tap:
        if any(t.name == name for t in self.taps):
            raise BusConfigError(f"tap {name!r} already attached to bus {self.name!r}")
        tap = Tap(name, self, filters if filters is not None else FilterChain(), on_frame)
        self.taps.append(tap)
        return tap

    def tap(self, name: str) -> Tap:
        for t in self.taps:
            if t.name == name:
                return t
        raise KeyError(name)

    def detach(self, tap: Tap) -> None:
        if tap in self.taps:
            self.taps.remove(tap)
        tap.attached = False

    def publish(self, tap: Tap, frame: CanFrame, now: float) -> bool:
        if not tap.attached or tap.bus is not self:
            raise BusUsageError(f"tap {tap.name!r} is not attached to bus {self.name!r}")
        tf = TimedFrame(now, self.name, frame)
        self.pending.append((frame.id, self._seq, tf, tap))
        self._seq += 1
        tap.sent += 1
        return True

    def deliver(self) -> int:
        """Run one delivery round; returns the number of frames delivered."""
        if not self.pending:
            return 0
        batch = sorted(self.pending, key=lambda item: (item[0], item[1]))
        self.pending = []
        self.rounds += 1
        for _, _, tf, source in batch:
            if self.record:
                self.history.append((tf, source.name))
            if self.inline:
                frame = self.inline(tf.frame, tf.timestamp)
                if frame is None:
                    self.inline_dropped += 1
                    continue
                if frame is not tf.frame:
                    tf = TimedFrame(tf.timestamp, tf.bus, frame)
            for tap in list(self.taps):
                if tap is source:
                    continue
                frame = tap.filters(tf.frame, tf.timestamp) if tap.filters else tf.frame
                if frame is None:
                    tap.dropped += 1
                    continue
                out = tf if frame is tf.frame else TimedFrame(tf.timestamp, tf.bus, frame)
                tap.received += 1
                if tap.on_frame is not None:
                    tap.on_frame(out)
                else:
                    tap.inbox.append(out)
        return len(batch)

    def settle(self, max_rounds: int = 16) -> int:
        """Deliver until no frames are pending; returns frames delivered."""
        total = 0
        for _ in range(max_rounds):
            n = self.deliver()
            if n == 0:
                return total
            total += n
        if self.pending:
            raise BusUsageError(f"bus {self.name!r} did not settle in {max_rounds} rounds")
        return total


# -- gateway ---------------------------------------------------------------


@dataclass(frozen=True)
class GatewayEntry:
    signal: SignalDef
    parameter: str
    direction: str  # "to_text" | "from_text"
    topic: str

    def __post_init__(self):
        if self.direction not in ("to_text", "from_text"):
            raise BusConfigError(f"bad gateway direction {self.direction!r}")
        if self.topic not in TOPICS:
            raise BusConfigError(f"bad gateway topic {self.topic!r}")


class GatewayMapping:
    def __init__(self, entries: Iterable[GatewayEntry]):
        self.entries = list(entries)
        self.by_frame: dict[int, list[GatewayEntry]] = {}
        self.by_parameter: dict[str, GatewayEntry] = {}
        seen = set()
        for e in self.entries:
            key = (e.direction, e.parameter)
            if key in seen:
                raise BusConfigError(f"parameter {e.parameter!r} mapped twice for {e.direction}")
            seen.add(key)
            if e.direction == "to_text":
                self.by_frame.setdefault(e.signal.frame_id, []).append(e)
            else:
                self.by_parameter[e.parameter] = e

    @classmethod
    def from_dictionary(cls, sigdb: SignalDictionary, doc: list[dict] | None = None) -> "GatewayMapping":
        if doc is None:
            doc = json.loads(
                resources.files("mgvsim").joinpath("data/signals.json").read_text()
            )["gateway"]
        return cls(
            GatewayEntry(sigdb.signal(d["signal"]), d["parameter"], d["direction"], d["topic"])
            for d in doc
        )

    @classmethod
    def load(cls, sigdb: SignalDictionary, path) -> "GatewayMapping":
        return cls.from_dictionary(sigdb, json.loads(Path(path).read_text())["gateway"])


def format_value(value: float) -> str:
    # trim binary noise from scale multiplication, then shortest repr
    v = float(f"{value:.12g}")
    if v == 0:
        v = 0.0
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def parse_text_line(line: str) -> tuple[float, str, float]:
    parts = line.strip().split(",")
    if len(parts) != 3:
        raise GatewayError("expected <ts>,<parameter>,<value>", line)
    ts_text, param, value_text = (p.strip() for p in parts)
    try:
        ts = float(ts_text)
        value = float(value_text)
    except ValueError:
        raise GatewayError("non-numeric timestamp or value", line) from None
    if not (math.isfinite(ts) and math.isfinite(value)) or ts < 0:
        raise GatewayError("timestamp and value must be finite, timestamp >= 0", line)
    if not param or any(c.isspace() for c in param):
        raise GatewayError("empty or malformed parameter name", line)
    return ts, param, value


def gateway_to_text(mapping: GatewayMapping, tf: TimedFrame) -> list[str]:
    """Stateless conversion of one frame to ``<ts>,<parameter>,<value>`` lines."""
    entries = mapping.by_frame.get(tf.frame.id)
    if not entries:
        return []
    return [
        f"{tf.timestamp:.3f},{e.parameter},{format_value(decode_signal(e.signal, tf.frame))}"
        for e in entries
    ]


def gateway_from_text(
    mapping: GatewayMapping,
    line: str,
    sigdb: SignalDictionary,
    bus: str = "pt",
    base: CanFrame | None = None,
) -> TimedFrame:
    """Encode one text line into its frame (other signals from ``base`` or zero)."""
    ts, param, value = parse_text_line(line)
    entry = mapping.by_parameter.get(param)
    if entry is None:
        raise GatewayError(f"unknown parameter {param!r}", line)
    frame = base if base is not None else sigdb.blank(entry.signal.frame_id)
    return TimedFrame(ts, bus, encode_signal(entry.signal, value, frame))


class Gateway:
    """Stateful gateway: keeps a shadow copy of each frame it encodes so that
    updating one signal preserves the others, and counts unmapped frames."""

    def __init__(self, mapping: GatewayMapping, sigdb: SignalDictionary):
        self.mapping = mapping
        self.sigdb = sigdb
        self.shadow: dict[int, CanFrame] = {}
        self.stats = Counter()

    def to_text(self, tf: TimedFrame) -> list[str]:
        lines = gateway_to_text(self.mapping, tf)
        self.stats["unmapped" if not lines else "to_text"] += 1
        return lines

    def from_text(self, line: str, bus: str) -> TimedFrame:
        ts, param, _ = parse_text_line(line)
        entry = self.mapping.by_parameter.get(param)
        if entry is None:
            raise GatewayError(f"unknown parameter {param!r}", line)
        fid = entry.signal.frame_id
        tf = gateway_from_text(self.mapping, line, self.sigdb, bus, self.shadow.get(fid))
        self.shadow[fid] = tf.frame
        self.stats["from_text"] += 1
        return tf

    def from_lines(self, lines: Iterable[str], bus: str) -> list[TimedFrame]:
        """Encode a batch, one frame per identifier in order of first appearance."""
        out: dict[int, TimedFrame] = {}
        for line in lines:
            tf = self.from_text(line, bus)
            out[tf.frame.id] = tf
        return list(out.values())


# -- text transport --------------------------------------------------------


def format_wire(topic: str, line: str) -> bytes:
    if topic not in TOPICS:
        raise GatewayError(f"unknown topic {topic!r}", line)
    return f"{topic}:{line}\n".encode("ascii")


def parse_wire(raw: bytes | str) -> tuple[str, str]:
    text = raw.decode("ascii") if isinstance(raw, bytes) else raw
    text = text.rstrip("\n")
    topic, sep, line = text.partition(":")
    if not sep or topic not in TOPICS:
        raise GatewayError("expected <topic>:<payload>", text)
    return topic, line


class TextLink:
    """In-process pub-sub: per-topic FIFO queues of text lines."""

    def __init__(self):
        self.queues = {topic: deque() for topic in TOPICS}

    def send(self, topic: str, line: str) -> None:
        if topic not in self.queues:
            raise GatewayError(f"unknown topic {topic!r}", line)
        self.queues[topic].append(line)

    def receive(self, topic: str) -> list[str]:
        q = self.queues[topic]
        lines = list(q)
        q.clear()
        return lines


class TcpTextLink(TextLink):
    """Line-oriented TCP transport, one ``<topic>:<payload>\\n`` per message.

    Outbound lines go to the socket; :meth:`poll` reads whatever the peer
    has sent and files it by topic.
    All I/O happens on the caller's thread.
    """

    def __init__(self, sock: socket.socket):
        super().__init__()
        self.sock = sock
        self.sock.setblocking(False)
        self._buf = b""

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 5.0) -> "TcpTextLink":
        return cls(socket.create_connection((host, port), timeout=timeout))

    def send(self, topic: str, line: str) -> None:
        data = format_wire(topic, line)
        self.sock.setblocking(True)
        try:
            self.sock.sendall(data)
        finally:
            self.sock.setblocking(False)

    def poll(self) -> int:
        n = 0
        while True:
            try:
                chunk = self.sock.recv(65536)
            except BlockingIOError:
                break
            if not chunk:
                break
            self._buf += chunk
        *complete, self._buf = self._buf.split(b"\n")
        for raw in complete:
            if not raw:
                continue
            topic, line = parse_wire(raw)
            self.queues[topic].append(line)
            n += 1
        return n

    def close(self) -> None:
        self.sock.close()
