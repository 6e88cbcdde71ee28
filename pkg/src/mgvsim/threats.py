"""Attack and defense plugins that act on bus traffic.

Attacks: periodic injection, blocking, in-flight modification and a
firmware-compromise trigger for an ECU.  Defenses: keyed watermarks in
reserved frame bits, a linear-extrapolation plausibility filter and the
re-flash responder (see :class:`mgvsim.ecus.BonwareMonitor`).
"""
from __future__ import annotations

import hashlib
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .signals import CanFrame, SignalDictionary, decode_signal, encode_signal

ATTACK_KINDS = ("inject", "block", "modify", "firmware")
DEFENSE_KINDS = ("watermark", "plausibility", "reflash_responder")
EPS = 1e-9


class ThreatConfigError(ValueError):
    pass


def _frame_id(sigdb: SignalDictionary, ref) -> int:
    if isinstance(ref, str):
        try:
            return sigdb.frame_named(ref).id
        except KeyError:
            pass
        try:
            ref = int(ref, 0)
        except ValueError:
            raise ThreatConfigError(f"unknown frame {ref!r}") from None
    fid = int(ref)
    if fid not in sigdb.frames:
        raise ThreatConfigError(f"frame id {fid:#x} not in signal dictionary")
    return fid


@dataclass
class AttackSpec:
    """One attack.  ``target`` is a list of frame ids, or an ECU name for
    ``firmware``.  ``values`` is the inject payload or the modify rewrite."""

    kind: str
    start: float
    stop: float | None = None
    target: list[int] | str = field(default_factory=list)
    values: dict[str, float] = field(default_factory=dict)
    period: float = 0.1
    bus: str | None = None
    tap: str | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ThreatConfigError(f"attack kind must be one of {ATTACK_KINDS}, got {self.kind!r}")
        if self.start < 0:
            raise ThreatConfigError("attack start must be >= 0")
        if self.stop is not None and not self.start < self.stop:
            raise ThreatConfigError("attack start must be before stop")
        if self.kind == "inject" and not self.period > 0:
            raise ThreatConfigError("inject period must be > 0")
        if not self.name:
            self.name = f"{self.kind}@{self.start:g}"

    def active(self, now: float) -> bool:
        return now >= self.start - EPS and (self.stop is None or now < self.stop - EPS)

    @classmethod
    def from_dict(cls, doc: dict, sigdb: SignalDictionary) -> "AttackSpec":
        doc = dict(doc)
        kind = doc.get("kind")
        target = doc.get("target", [])
        if kind == "firmware":
            if not isinstance(target, str):
                raise ThreatConfigError("firmware attack target must be an ECU name")
        else:
            refs = target if isinstance(target, list) else [target]
            if not refs:
                raise ThreatConfigError(f"{kind} attack needs a target frame")
            target = [_frame_id(sigdb, r) for r in refs]
            values = doc.get("values", {})
            for sig in values:
                try:
                    sd = sigdb.signal(sig)
                except KeyError:
                    raise ThreatConfigError(f"attack rewrites unmapped signal {sig!r}") from None
                if sd.frame_id not in target:
                    raise ThreatConfigError(f"signal {sig!r} is not carried by the target frame")
            if kind == "inject" and len(target) != 1:
                raise ThreatConfigError("inject attack targets exactly one frame")
        spec = cls(
            kind=kind,
            start=float(doc.get("start", 0.0)),
            stop=None if doc.get("stop") is None else float(doc["stop"]),
            target=target,
            values={k: float(v) for k, v in doc.get("values", {}).items()},
            period=float(doc.get("period", 0.1)),
            bus=doc.get("bus"),
            tap=doc.get("tap"),
            name=doc.get("name", ""),
        )
        return spec


class InjectAttack:
    """Publishes the payload frame every ``period`` inside the window."""

    def __init__(self, spec: AttackSpec, sigdb: SignalDictionary):
        self.spec = spec
        self.frame = sigdb.encode(spec.target[0], spec.values)
        self.count = 0
        self.tap = None

    @property
    def tap_name(self) -> str:
        return f"attacker:{self.spec.name}"

    def attach(self, bus):
        self.tap = bus.attach_tap(self.tap_name)
        return self.tap

    def step(self, now: float) -> list[CanFrame]:
        spec = self.spec
        if not spec.active(now):
            return []
        # k-th frame is due at start + k*period; no drift from float sums
        if now < spec.start + self.count * spec.period - EPS:
            return []
        self.count = math.floor((now - spec.start) / spec.period + EPS) + 1
        if self.tap is not None:
            self.tap.publish(self.frame, now)
        return [self.frame]


class BlockFilter:
    """Filter stage dropping target frames inside the window."""

    def __init__(self, spec: AttackSpec):
        self.spec = spec
        self.ids = frozenset(spec.target)
        self.blocked = 0

    def __call__(self, frame: CanFrame, now: float) -> CanFrame | None:
        if frame.id in self.ids and self.spec.active(now):
            self.blocked += 1
            return None
        return frame


class ModifyFilter:
    """Filter stage rewriting signals of target frames inside the window."""

    def __init__(self, spec: AttackSpec, sigdb: SignalDictionary):
        self.spec = spec
        self.ids = frozenset(spec.target)
        self.defs = [(sigdb.signal(name), value) for name, value in spec.values.items()]
        self.modified = 0

    def __call__(self, frame: CanFrame, now: float) -> CanFrame:
        if frame.id not in self.ids or not self.spec.active(now):
            return frame
        for sd, value in self.defs:
            if sd.frame_id == frame.id:
                frame = encode_signal(sd, value, frame)
        self.modified += 1
        return frame


class FirmwareAttack:
    """Compromises a named ECU at ``start`` and releases it at ``stop``."""

    def __init__(self, spec: AttackSpec, ecu):
        self.spec = spec
        self.ecu = ecu
        self.triggered = False
        self.stopped = False

    def step(self, now: float) -> None:
        if not self.triggered and now >= self.spec.start - EPS:
            self.triggered = True
            self.ecu.trigger_attack(now)
        if (self.triggered and not self.stopped and self.spec.stop is not None
                and now >= self.spec.stop - EPS):
            self.stopped = True
            self.ecu.stop_attack(now)


# -- defenses ----------------------------------------------------------------


@dataclass
class DefenseSpec:
    kind: str
    key: str = ""
    frames: list[int] = field(default_factory=list)
    signal: str = ""
    tolerance: float = 5.0
    window: float = 5.0
    tap: str | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ThreatConfigError(f"defense kind must be one of {DEFENSE_KINDS}, got {self.kind!r}")
        if not self.tolerance > 0:
            raise ThreatConfigError("tolerance must be > 0")
        if not self.window > 0:
            raise ThreatConfigError("predictor window must be > 0")
        if self.kind == "watermark" and not self.key:
            raise ThreatConfigError("watermark defense needs a key")

    @classmethod
    def from_dict(cls, doc: dict, sigdb: SignalDictionary) -> "DefenseSpec":
        known = {"kind", "key", "frames", "signal", "tolerance", "window", "tap"}
        frames = [_frame_id(sigdb, r) for r in doc.get("frames", [])]
        if doc.get("kind") == "plausibility":
            try:
                sigdb.signal(doc.get("signal", ""))
            except KeyError:
                raise ThreatConfigError(f"plausibility signal {doc.get('signal')!r} unknown") from None
        return cls(
            kind=doc.get("kind"),
            key=str(doc.get("key", "")),
            frames=frames,
            signal=doc.get("signal", ""),
            tolerance=float(doc.get("tolerance", 5.0)),
            window=float(doc.get("window", 5.0)),
            tap=doc.get("tap"),
            params={k: v for k, v in doc.items() if k not in known},
        )


def default_watermark_bit(frame: CanFrame) -> int:
    return frame.dlc * 8 - 8


def _mac8(key: bytes, frame: CanFrame, counter: int, bit: int) -> int:
    payload = bytearray(frame.data)
    byte, shift = divmod(bit, 8)
    if shift:
        raise ThreatConfigError("watermark field must be byte aligned")
    payload[byte] = 0
    msg = frame.id.to_bytes(2, "little") + bytes(payload) + bytes([counter % 16])
    digest = hashlib.blake2b(msg, digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little") & 0xFF


def _key_bytes(key) -> bytes:
    return key if isinstance(key, bytes) else str(key).encode()


def _check_bit(frame: CanFrame, bit: int | None) -> int:
    bit = default_watermark_bit(frame) if bit is None else bit
    if frame.dlc == 0 or bit < 0 or bit + 8 > frame.dlc * 8:
        raise ThreatConfigError(f"frame {frame.id:#x} has no room for an 8-bit watermark")
    return bit


def watermark_apply(key, frame: CanFrame, counter: int = 0, bit: int | None = None) -> CanFrame:
    """Write the 8-bit keyed tag into ``frame`` at ``bit`` (default: last byte)."""
    bit = _check_bit(frame, bit)
    tag = _mac8(_key_bytes(key), frame, counter, bit)
    data = bytearray(frame.data)
    data[bit // 8] = tag
    return CanFrame(frame.id, bytes(data))


def watermark_verify(key, frame: CanFrame, counter: int = 0, bit: int | None = None) -> bool:
    bit = _check_bit(frame, bit)
    return frame.data[bit // 8] == _mac8(_key_bytes(key), frame, counter, bit)


class Watermarker:
    """Stateful sign/verify pair with strict per-identifier rolling counters.

    ``signer`` goes on the sending tap's outbound chain; each receiver gets
    its own ``verifier()`` stage, which drops frames whose tag does not match
    the next expected counter.
    """

    def __init__(self, key, sigdb: SignalDictionary, frame_ids):
        self.key = _key_bytes(key)
        self.bits: dict[int, int] = {}
        for fid in frame_ids:
            fd = sigdb.frame(fid)
            bit = fd.watermark_bit
            if bit is None:
                raise ThreatConfigError(f"frame {fid:#x} has no designated watermark bits")
            for sd in sigdb.signals_of(fid):
                if sd.start_bit < bit + 8 and bit < sd.start_bit + sd.bit_length:
                    raise ThreatConfigError(f"signal {sd.name!r} overlaps the watermark of {fid:#x}")
            if bit + 8 > fd.dlc * 8:
                raise ThreatConfigError(f"frame {fid:#x} has no room for an 8-bit watermark")
            self.bits[fid] = bit
        self.tx_counter: dict[int, int] = {fid: 0 for fid in self.bits}
        self.verifiers: list[WatermarkVerifier] = []

    def signer(self, frame: CanFrame, now: float) -> CanFrame:
        bit = self.bits.get(frame.id)
        if bit is None:
            return frame
        n = self.tx_counter[frame.id]
        self.tx_counter[frame.id] = (n + 1) % 16
        return watermark_apply(self.key, frame, n, bit)

    def verifier(self) -> "WatermarkVerifier":
        v = WatermarkVerifier(self)
        self.verifiers.append(v)
        return v

    @property
    def rejected(self) -> int:
        return sum(v.rejected for v in self.verifiers)


class WatermarkVerifier:
    def __init__(self, owner: Watermarker):
        self.owner = owner
        self.rx_counter = {fid: 0 for fid in owner.bits}
        self.accepted = 0
        self.rejected = 0

    def __call__(self, frame: CanFrame, now: float) -> CanFrame | None:
        bit = self.owner.bits.get(frame.id)
        if bit is None:
            return frame
        n = self.rx_counter[frame.id]
        if watermark_verify(self.owner.key, frame, n, bit):
            self.rx_counter[frame.id] = (n + 1) % 16
            self.accepted += 1
            return frame
        self.rejected += 1
        return None


class PlausibilityFilter:
    """Replaces implausible readings of one signal by a model prediction.

    The prediction is a least-squares line through the last ``window``
    seconds of accepted values, evaluated at the frame's time.  Until that
    much history exists frames pass untouched.  Substituted values enter the
    history in place of the observation.
    """

    def __init__(self, sigdb: SignalDictionary, signal: str, tolerance: float, window: float = 5.0):
        if not tolerance > 0:
            raise ThreatConfigError("tolerance must be > 0")
        self.signal = sigdb.signal(signal)
        self.tolerance = tolerance
        self.window = window
        self.history: deque[tuple[float, float]] = deque()
        self.substituted = 0
        self.checked = 0

    def predict(self, now: float) -> float | None:
        h = self.history
        if len(h) < 2 or h[-1][0] - h[0][0] < self.window - EPS:
            return None
        t = np.array([p[0] for p in h])
        v = np.array([p[1] for p in h])
        tc = t - t.mean()
        denom = float(tc @ tc)
        slope = float(tc @ (v - v.mean())) / denom if denom > 0 else 0.0
        return float(v.mean() + slope * (now - t.mean()))

    def __call__(self, frame: CanFrame, now: float) -> CanFrame:
        if frame.id != self.signal.frame_id:
            return frame
        observed = decode_signal(self.signal, frame)
        predicted = self.predict(now)
        value = observed
        if predicted is not None:
            self.checked += 1
            if abs(observed - predicted) > self.tolerance:
                self.substituted += 1
                value = predicted
                frame = encode_signal(self.signal, predicted, frame)
        h = self.history
        h.append((now, value))
        # keep one sample at or before the window start so coverage is exact
        while len(h) > 2 and h[1][0] <= now - self.window + EPS:
            h.popleft()
        return frame
