import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgvsim.ecus import (
    COMPROMISED, OFFLINE, ONLINE, BonwareMonitor, ChassisEcu, DriverOutputs, FanController,
    PowertrainEcu, Watchdog,
)
from mgvsim.rng import stream
from mgvsim.signals import TimedFrame, decode_signal
from mgvsim.vbus import Bus


def pedal_frame(sigdb, pedal, brake=0.0, t=0.0):
    return TimedFrame(t, "pt", sigdb.encode(0x0A0, {"accelerator_pedal": pedal, "brake_pedal": brake}))


def throttle_of(sigdb, frame):
    return decode_signal(sigdb.signal("engine_throttle"), frame)


# -- powertrain ------------------------------------------------------------


def test_powertrain_maps_pedal_to_throttle(sigdb):
    ecu = PowertrainEcu(sigdb)
    (out,) = ecu.step([pedal_frame(sigdb, 0.5)], 0.0)
    assert out.id == 0x0B0 and throttle_of(sigdb, out) == pytest.approx(0.5)
    (zero,) = ecu.step([pedal_frame(sigdb, 0.0)], 0.1)
    assert throttle_of(sigdb, zero) == 0.0


def test_powertrain_offline_and_transform(sigdb):
    ecu = PowertrainEcu(sigdb, transform=lambda p: 2 * p)
    (out,) = ecu.step([pedal_frame(sigdb, 0.3)], 0.0)
    assert throttle_of(sigdb, out) == pytest.approx(0.6, abs=0.004)
    ecu.take_offline(1.0, 5.0)
    assert ecu.step([pedal_frame(sigdb, 0.3)], 3.0) == []
    assert ecu.step([pedal_frame(sigdb, 0.3)], 6.0) != []


def test_override_caps_throttle_then_expires(sigdb):
    ecu = PowertrainEcu(sigdb, override_timeout=0.3)
    idle = TimedFrame(1.0, "pt", sigdb.encode(0x000, {"override_mode": 1, "requested_torque": 0.0}))
    (capped,) = ecu.step([idle, pedal_frame(sigdb, 0.8)], 1.0)
    assert throttle_of(sigdb, capped) == 0.0
    (still,) = ecu.step([pedal_frame(sigdb, 0.8)], 1.25)
    assert throttle_of(sigdb, still) == 0.0
    (free,) = ecu.step([pedal_frame(sigdb, 0.8)], 1.5)
    assert throttle_of(sigdb, free) == pytest.approx(0.8)
    ecu.step([idle], 2.0)
    release = TimedFrame(2.05, "pt", sigdb.encode(0x000, {"override_mode": 0}))
    (after,) = ecu.step([release, pedal_frame(sigdb, 0.8)], 2.05)
    assert throttle_of(sigdb, after) == pytest.approx(0.8)


def test_powertrain_answers_on_bus(sigdb):
    bus = Bus("pt")
    chassis, pt = ChassisEcu(sigdb), PowertrainEcu(sigdb)
    chassis.attach(bus)
    pt.attach(bus)
    chassis.step(DriverOutputs(0.5, 0.0), 0.0)
    bus.settle()
    got = chassis.tap.drain()
    assert len(got) == 1 and throttle_of(sigdb, got[0].frame) == pytest.approx(0.5)


# -- chassis -----------------------------------------------------------------


def test_chassis_cadence_and_encoding(sigdb):
    ecu = ChassisEcu(sigdb)
    frames = [f for k in range(100) if (f := ecu.step(DriverOutputs(0.3, 0.0, 0.0), k * 0.01))]
    assert len(frames) == 10
    assert decode_signal(sigdb.signal("accelerator_pedal"), frames[0]) == pytest.approx(0.3, abs=0.002)
    assert decode_signal(sigdb.signal("steering_angle"), frames[0]) == pytest.approx(0.0, abs=0.05)
    ecu.take_offline(1.0, 1.0)
    assert ecu.step(DriverOutputs(0.3), 1.5) is None


# -- fan controller ------------------------------------------------------------


def test_fan_thresholds(sigdb):
    fc = FanController(sigdb)
    fc.step(104.0, 0.0)
    assert fc.state.fan_commanded
    fc.step(90.0, 1.0)
    assert fc.state.fan_commanded
    fc.step(85.0, 2.0)
    assert not fc.state.fan_commanded
    fc.step(102.9, 3.0)
    assert not fc.state.fan_commanded
    fc.step(103.0, 4.0)
    assert fc.state.fan_commanded


def test_compromised_fan_sticks(sigdb):
    fc = FanController(sigdb)
    fc.step(104.0, 0.0)
    fc.trigger_attack(1.0)
    fc.trigger_attack(1.5)
    assert fc.status.mode == COMPROMISED
    fc.step(84.0, 2.0)
    fc.step(60.0, 3.0)
    assert fc.state.fan_commanded
    fc.stop_attack(4.0)
    assert fc.status.mode == ONLINE
    fc.step(84.0, 5.0)
    assert not fc.state.fan_commanded


def test_emits_once_per_second(sigdb):
    fc = FanController(sigdb)
    for k in range(50):
        fc.step(95.0, k * 0.1)
    assert [t for t, _ in fc.emissions] == [0.0, 1.0, 2.0, 3.0, 4.0]
    assert all(v == 0 for _, v in fc.emissions)


def test_reflash_silence_and_clean_restart(sigdb):
    fc = FanController(sigdb)
    fc.step(104.0, 400.0)
    fc.trigger_attack(405.0)
    fc.reflash(408.0)
    assert fc.status.mode == OFFLINE
    for k in range(1, 200):
        fc.step(104.0 if k % 2 else 70.0, 408.0 + k * 0.1)
    assert all(not 408.0 < t < 428.0 for t, _ in fc.emissions)
    out = fc.step(95.0, 428.0)
    assert out is not None and fc.emissions[-1] == (428.0, 0)
    assert fc.status.mode == ONLINE and fc.status.uptime(430.0) == pytest.approx(2.0)


def test_trigger_while_offline_is_deferred(sigdb):
    fc = FanController(sigdb)
    fc.reflash(10.0)
    fc.trigger_attack(15.0)
    assert fc.status.mode == OFFLINE and fc.state.attack_pending
    fc.step(104.0, 30.0)
    assert fc.status.mode == COMPROMISED and fc.state.fan_commanded
    fc.step(70.0, 31.0)
    assert fc.state.fan_commanded


def test_healthy_reflash_same_outage(sigdb):
    fc = FanController(sigdb)
    fc.reflash(0.0)
    assert fc.step(95.0, 19.9) is None
    assert fc.step(95.0, 20.0) is not None


def test_threshold_validation(sigdb):
    with pytest.raises(ValueError):
        FanController(sigdb, upper=80.0, lower=85.0)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(40, 130), min_size=1, max_size=80))
def test_hysteresis_safety(sigdb, temps):
    fc = FanController(sigdb)
    for k, temp in enumerate(temps):
        before = fc.state.fan_commanded
        fc.step(temp, k * 0.5)
        after = fc.state.fan_commanded
        if before and not after:
            assert temp <= fc.state.lower
        if after and not before:
            assert temp >= fc.state.upper


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(40, 130), min_size=1, max_size=60), st.floats(0, 20))
def test_compromised_never_turns_off(sigdb, temps, at):
    fc = FanController(sigdb)
    fc.trigger_attack(at)
    on = False
    for k, temp in enumerate(temps):
        fc.step(temp, at + k)
        on = on or fc.state.fan_commanded
        assert fc.state.fan_commanded == on


# -- watchdog --------------------------------------------------------------------


def test_watchdog_jitter_bounds_over_many_arms():
    wd = Watchdog(stream(7, "watchdog"))
    windows = []
    for k in range(1000):
        wd.reset()
        wd.check(70.0 if k else 90.0, True, 0.0)
        wd.check(70.0, True, 0.0)
        windows.append(wd.armed_window)
    assert min(windows) >= 90.0 and max(windows) <= 110.0
    assert max(windows) - min(windows) > 15.0


def test_watchdog_in_range_never_fires():
    wd = Watchdog(stream(0, "watchdog"))
    for k in range(3000):
        temp = 85.0 + 18.0 * abs(math.sin(k / 50))
        assert not wd.check(temp, k % 2 == 0, k * 0.1)
    assert wd.fired_at == []


def test_watchdog_waits_for_warm_up():
    wd = Watchdog(stream(0, "watchdog"))
    for k in range(2000):
        assert not wd.check(40.0 + k * 0.01, True, k * 0.1)
    assert not wd.warmed_up


def test_watchdog_overheat_fires_within_window():
    wd = Watchdog(stream(3, "watchdog"))
    fired = [t for k in range(1500) if wd.check(120.0, False, t := k * 0.1)]
    assert fired and 90.0 <= fired[0] <= 110.0


def test_stuck_fan_cleared_within_liveness_bound(sigdb):
    wd = Watchdog(stream(1, "watchdog"))
    fc = FanController(sigdb, watchdog=wd)
    temp = 100.0
    t = 0.0
    fc.trigger_attack(0.0)
    cleared_at = onset = None
    while t < 600.0:
        temp = temp + ((60.0 if fc.state.fan_commanded and fc.online(t) else 110.0) - temp) / 120.0 * 0.1
        fc.step(temp, t)
        fc.tick(t)
        if onset is None and fc.compromised and temp < fc.state.lower:
            onset = t
        if fc.reflashes and cleared_at is None:
            cleared_at = fc.reflashes[0]
        t = round(t + 0.1, 6)
    assert cleared_at is not None and onset is not None
    assert 90.0 <= cleared_at - onset <= 110.0 + 0.1
    assert fc.status.mode == ONLINE


def test_bonware_monitor_reflashes_target(sigdb):
    bus = Bus("ch")
    fc = FanController(sigdb)
    fc.attach(bus)
    mon = BonwareMonitor(sigdb, fc, Watchdog(stream(0, "bonware")))
    mon.attach(bus)
    sensor = bus.attach_tap("sensor")
    fc.trigger_attack(0.0)
    fired = None
    for k in range(2000):
        t = k * 0.1
        temp = 104.0 if t < 5 else 70.0
        sensor.publish(sigdb.encode(387, {"coolant_temp": temp}), t)
        bus.settle()
        fc.tick(t)
        bus.settle()
        if mon.tick(t):
            fired = t
            break
    assert fired is not None and 95.0 <= fired <= 120.0
    assert fc.reflashes == [fired] and fc.status.mode == OFFLINE
    assert not mon.tick(fired + 1.0)
