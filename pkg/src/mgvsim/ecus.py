"""Virtual ECUs: chassis (driver inputs), powertrain (pedal to throttle) and
the engine fan controller with simulated firmware compromise, re-flash and
an out-of-range watchdog."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

from .signals import CanFrame, SignalDictionary, TimedFrame, decode_signal

EPS = 1e-9

ONLINE = "online"
OFFLINE = "offline"
COMPROMISED = "compromised"


@dataclass
class EcuStatus:
    mode: str = ONLINE
    offline_until: float | None = None
    online_since: float = 0.0

    def uptime(self, now: float) -> float:
        return 0.0 if self.mode == OFFLINE else now - self.online_since


class Ecu:
    """Base for ECUs that can be taken offline for a fixed outage."""

    name = "ecu"

    def __init__(self):
        self.status = EcuStatus()
        self.tap = None
        self.sent = 0

    def attach(self, bus, on_frame=None):
        self.tap = bus.attach_tap(self.name, on_frame=on_frame)
        return self.tap

    def take_offline(self, now: float, duration: float) -> None:
        self.status.mode = OFFLINE
        self.status.offline_until = now + duration

    def _refresh(self, now: float) -> None:
        st = self.status
        if st.mode == OFFLINE and st.offline_until is not None and now >= st.offline_until - EPS:
            st.mode = ONLINE
            st.offline_until = None
            st.online_since = now
            self._on_restart(now)

    def _on_restart(self, now: float) -> None:
        pass

    def online(self, now: float) -> bool:
        self._refresh(now)
        return self.status.mode != OFFLINE

    def _send(self, frame: CanFrame, now: float) -> CanFrame:
        if self.tap is not None:
            self.tap.publish(frame, now)
        self.sent += 1
        return frame


# -- chassis ---------------------------------------------------------------


@dataclass(frozen=True)
class DriverOutputs:
    accelerator: float = 0.0
    brake: float = 0.0
    steering: float = 0.0


class ChassisEcu(Ecu):
    """Encodes driver pedal and steering positions at a fixed cadence."""

    name = "chassis_ecu"

    def __init__(self, sigdb: SignalDictionary, period: float = 0.1):
        super().__init__()
        self.sigdb = sigdb
        self.period = period
        self.frame_id = sigdb.signal("accelerator_pedal").frame_id
        self.last_emit = -math.inf

    def step(self, driver: DriverOutputs, now: float) -> CanFrame | None:
        if not self.online(now) or now - self.last_emit < self.period - EPS:
            return None
        self.last_emit = now
        frame = self.sigdb.encode(
            self.frame_id,
            {
                "accelerator_pedal": driver.accelerator,
                "brake_pedal": driver.brake,
                "steering_angle": driver.steering,
            },
        )
        return self._send(frame, now)


# -- powertrain ------------------------------------------------------------


class PowertrainEcu(Ecu):
    """Answers each driver-input frame with an engine command frame.

    Engine throttle follows the accelerator pedal through ``transform``
    (identity by default).  A torque/speed-control override frame with mode 1
    caps throttle at the requested fraction for ``override_timeout`` seconds,
    which is how a continuously injected idle request forces the engine to idle.
    """

    name = "powertrain_ecu"

    def __init__(self, sigdb: SignalDictionary, transform: Callable[[float], float] | None = None,
                 override_timeout: float = 0.3):
        super().__init__()
        self.sigdb = sigdb
        self.transform = transform or (lambda pedal: pedal)
        self.override_timeout = override_timeout
        self.cmd_id = sigdb.signal("engine_throttle").frame_id
        self.input_id = sigdb.signal("accelerator_pedal").frame_id
        self.override_id = sigdb.signal("requested_torque").frame_id
        self.override_limit: float | None = None
        self.override_until = -math.inf

    def attach(self, bus, on_frame=None):
        return super().attach(bus, on_frame or self.receive)

    def receive(self, tf: TimedFrame) -> None:
        self.step([tf], tf.timestamp)

    def step(self, frames, now: float) -> list[CanFrame]:
        if not self.online(now):
            return []
        out = []
        db = self.sigdb
        for tf in frames:
            fid = tf.frame.id
            if fid == self.override_id:
                mode = decode_signal(db.signal("override_mode"), tf.frame)
                if mode == 1:
                    self.override_limit = decode_signal(db.signal("requested_torque"), tf.frame)
                    self.override_until = now + self.override_timeout
                elif mode == 0:
                    self.override_limit = None
            elif fid == self.input_id:
                pedal = decode_signal(db.signal("accelerator_pedal"), tf.frame)
                brake = decode_signal(db.signal("brake_pedal"), tf.frame)
                throttle = min(max(self.transform(pedal), 0.0), 1.0)
                if self.override_limit is not None and now <= self.override_until + EPS:
                    throttle = min(throttle, self.override_limit)
                frame = db.encode(self.cmd_id, {"engine_throttle": throttle, "engine_brake": brake})
                out.append(self._send(frame, now))
        return out


# -- fan controller ----------------------------------------------------------


class Watchdog:
    """Fires when coolant temperature stays out of range for ~``window`` s.

    Out of range means colder than ``lower`` while the fan is commanded on
    (the stuck-fan signature) or hotter than ``upper + margin``.  The window
    is ``window + U(-jitter, +jitter)``, drawn once each time it arms.  It
    only runs after warm-up, i.e. once the coolant has reached ``lower``.
    """

    def __init__(self, rng, window: float = 100.0, jitter: float = 10.0,
                 upper: float = 103.0, lower: float = 85.0, margin: float = 10.0):
        self.rng = rng
        self.window = window
        self.jitter = jitter
        self.upper = upper
        self.lower = lower
        self.margin = margin
        self.warmed_up = False
        self.since: float | None = None
        self.armed_window: float | None = None
        self.fired_at: list[float] = []

    def reset(self) -> None:
        self.since = None
        self.armed_window = None

    def out_of_range(self, temp: float, fan_commanded: bool) -> bool:
        return (temp < self.lower and fan_commanded) or temp > self.upper + self.margin

    def check(self, temp: float | None, fan_commanded: bool, now: float) -> bool:
        if temp is None:
            return False
        if temp >= self.lower:
            self.warmed_up = True
        if not self.warmed_up:
            return False
        if not self.out_of_range(temp, fan_commanded):
            self.reset()
            return False
        if self.since is None:
            self.since = now
            self.armed_window = self.window + self.rng.uniform(-self.jitter, self.jitter)
            return False
        if now - self.since >= self.armed_window - EPS:
            self.fired_at.append(now)
            self.reset()
            return True
        return False


@dataclass
class FanControllerState:
    status: EcuStatus = field(default_factory=EcuStatus)
    fan_commanded: bool = False
    last_emit: float = -math.inf
    upper: float = 103.0
    lower: float = 85.0
    attack_pending: bool = False
    last_temp: float | None = None


class FanController(Ecu):
    """Hysteresis fan control: on at ``upper`` or above, off at ``lower`` or
    below, C_FAN broadcast once per ``period`` while online.

    When compromised the fan never switches off once on.  A re-flash takes
    the ECU offline for ``reflash_duration`` seconds and brings it back clean
    with the fan command reset to off.
    """

    name = "fan_controller"

    def __init__(self, sigdb: SignalDictionary, upper: float = 103.0, lower: float = 85.0,
                 period: float = 1.0, reflash_duration: float = 20.0,
                 watchdog: Watchdog | None = None):
        super().__init__()
        if lower >= upper:
            raise ValueError("lower threshold must be below upper threshold")
        self.sigdb = sigdb
        self.state = FanControllerState(status=self.status, upper=upper, lower=lower)
        self.period = period
        self.reflash_duration = reflash_duration
        self.watchdog = watchdog
        self.temp_signal = sigdb.signal("coolant_temp")
        self.fan_signal = sigdb.signal("fan_control")
        self.reflashes: list[float] = []
        self.emissions: list[tuple[float, int]] = []

    def attach(self, bus, on_frame=None):
        return super().attach(bus, on_frame or self.receive)

    @property
    def compromised(self) -> bool:
        return self.status.mode == COMPROMISED

    def receive(self, tf: TimedFrame) -> None:
        if tf.frame.id == self.temp_signal.frame_id:
            self.step(decode_signal(self.temp_signal, tf.frame), tf.timestamp)

    def _on_restart(self, now: float) -> None:
        st = self.state
        st.fan_commanded = False
        st.last_emit = -math.inf
        if self.watchdog is not None:
            self.watchdog.reset()
        if st.attack_pending:
            st.attack_pending = False
            self.status.mode = COMPROMISED

    def step(self, temp_reading: float | None, now: float) -> CanFrame | None:
        """Process an optional temperature reading; emit C_FAN if one is due."""
        if not self.online(now):
            return None
        st = self.state
        if temp_reading is not None:
            st.last_temp = temp_reading
            if not st.fan_commanded and temp_reading >= st.upper:
                st.fan_commanded = True
            elif st.fan_commanded and temp_reading <= st.lower and not self.compromised:
                st.fan_commanded = False
        if now - st.last_emit < self.period - EPS:
            return None
        st.last_emit = now
        value = 1 if st.fan_commanded else 0
        self.emissions.append((now, value))
        frame = self.sigdb.encode(self.fan_signal.frame_id, {"fan_control": value})
        return self._send(frame, now)

    def tick(self, now: float) -> CanFrame | None:
        """Periodic work without a new reading: watchdog, then emission."""
        if not self.online(now):
            return None
        if self.watchdog is not None and self.watchdog.check(
            self.state.last_temp, self.state.fan_commanded, now
        ):
            self.reflash(now)
            return None
        return self.step(None, now)

    def trigger_attack(self, now: float) -> None:
        if not self.online(now):
            self.state.attack_pending = True
        else:
            self.status.mode = COMPROMISED

    def stop_attack(self, now: float) -> None:
        self.state.attack_pending = False
        if self.status.mode == COMPROMISED:
            self.status.mode = ONLINE

    def reflash(self, now: float) -> None:
        self.reflashes.append(now)
        self.take_offline(now, self.reflash_duration)
        self.state.fan_commanded = False


class BonwareMonitor:
    """Watchdog placed on the bus instead of inside the ECU.

    It reads coolant temperature and C_FAN frames and re-flashes the target
    controller out of band when the watchdog fires.
    """

    name = "bonware_monitor"

    def __init__(self, sigdb: SignalDictionary, target: FanController, watchdog: Watchdog):
        self.target = target
        self.watchdog = watchdog
        self.temp_signal = sigdb.signal("coolant_temp")
        self.fan_signal = sigdb.signal("fan_control")
        self.temp: float | None = None
        self.fan_commanded = False
        self.tap = None

    def attach(self, bus):
        self.tap = bus.attach_tap(self.name, on_frame=self.receive)
        return self.tap

    def receive(self, tf: TimedFrame) -> None:
        if tf.frame.id == self.temp_signal.frame_id:
            self.temp = decode_signal(self.temp_signal, tf.frame)
        elif tf.frame.id == self.fan_signal.frame_id:
            self.fan_commanded = decode_signal(self.fan_signal, tf.frame) >= 0.5

    def tick(self, now: float) -> bool:
        if self.target.status.mode == OFFLINE:
            self.watchdog.reset()
            self.fan_commanded = False
            return False
        if self.watchdog.check(self.temp, self.fan_commanded, now):
            self.target.reflash(now)
            return True
        return False
