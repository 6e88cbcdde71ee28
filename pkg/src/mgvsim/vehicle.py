"""Longitudinal vehicle model for a six-wheeled, all-wheel-drive truck.

Engine output comes from piecewise-linear torque / horsepower / BSFC curves
indexed by engine RPM; RPM follows from road speed, wheel circumference and
the effective gear ratio.  The per-step physics loop lives in
:mod:`mgvsim.kernels`; the functions here are the scalar building blocks it
is assembled from, and are what the tests pin down.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from . import kernels
from ._kernels_py import (
    C_BRAKE_MAX, C_CDA, C_CIRC, C_DENSITY, C_FAN_HP, C_FAN_PEN, C_G, C_IDLE, C_MASS,
    C_REDLINE, C_SHIFT_HOLD, C_T_BASE, C_T_FAN, C_T_GAIN, C_TAU_COOL, C_TAU_HEAT,
    KW_PER_HP, N_CONSTS, N_STATE, S_COOLANT, S_FUEL, S_FUEL_G, S_GEAR, S_LAST_SHIFT,
    S_ODO, S_POS, S_RPM, S_SEG, S_SPEED, S_T, S_WORK,
)

SURFACES = ("main_road", "off_road", "hilly", "incline", "decline")
MAIN_ROAD_KMH = 60.0
OTHER_KMH = 40.0
FLAT_GRADE = 0.02


class RouteComplete(Exception):
    """Raised by :func:`vehicle_step` when the vehicle is past the last segment."""


@dataclass(frozen=True)
class VehicleParams:
    mass: float
    wheel_circumference: float
    gear_ratios: tuple
    rpm_knots: tuple
    torque_curve: tuple
    hp_curve: tuple
    bsfc_curve: tuple
    wheel_count: int = 6
    fan_power: float = 50.0
    fan_torque_penalty: float = 0.25
    fuel_density: float = 0.832
    drag_area: float = 5.6
    air_density: float = 1.2
    rolling_resistance: dict = field(default_factory=lambda: dict.fromkeys(SURFACES, 0.015))
    brake_force_max: float = 90000.0
    gravity: float = 9.81
    shift_hold: float = 1.0
    shift_gap: float = 200.0
    coolant_fan_eq: float = 60.0
    coolant_base_eq: float = 90.0
    coolant_load_gain: float = 30.0
    tau_cool: float = 120.0
    tau_heat: float = 180.0

    def __post_init__(self):
        if self.wheel_count != 6:
            raise ValueError("the modelled vehicle has six driven wheels")
        if self.mass <= 0 or self.wheel_circumference <= 0:
            raise ValueError("mass and wheel circumference must be positive")
        r = list(self.gear_ratios)
        if not r or any(b >= a for a, b in zip(r, r[1:])) or r[-1] <= 0:
            raise ValueError("gear ratios must be positive and strictly decreasing")
        knots = list(self.rpm_knots)
        if any(b <= a for a, b in zip(knots, knots[1:])):
            raise ValueError("rpm knots must be strictly increasing")
        for name in ("torque_curve", "hp_curve", "bsfc_curve"):
            if len(getattr(self, name)) != len(knots):
                raise ValueError(f"{name} must have one value per rpm knot")
        if not 0 <= self.fan_torque_penalty < 1:
            raise ValueError("fan torque penalty must be in [0, 1)")
        missing = set(SURFACES) - set(self.rolling_resistance)
        if missing:
            raise ValueError(f"rolling resistance missing for {sorted(missing)}")

    @property
    def idle_rpm(self) -> float:
        return float(self.rpm_knots[0])

    @property
    def redline_rpm(self) -> float:
        return float(self.rpm_knots[-1])

    @cached_property
    def arrays(self) -> dict:
        up, down = shift_tables(self)
        consts = np.zeros(N_CONSTS)
        consts[C_MASS] = self.mass
        consts[C_CIRC] = self.wheel_circumference
        consts[C_IDLE] = self.idle_rpm
        consts[C_REDLINE] = self.redline_rpm
        consts[C_FAN_HP] = self.fan_power
        consts[C_FAN_PEN] = self.fan_torque_penalty
        consts[C_DENSITY] = self.fuel_density
        consts[C_CDA] = 0.5 * self.air_density * self.drag_area
        consts[C_G] = self.gravity
        consts[C_BRAKE_MAX] = self.brake_force_max
        consts[C_TAU_COOL] = self.tau_cool
        consts[C_TAU_HEAT] = self.tau_heat
        consts[C_T_FAN] = self.coolant_fan_eq
        consts[C_T_BASE] = self.coolant_base_eq
        consts[C_T_GAIN] = self.coolant_load_gain
        consts[C_SHIFT_HOLD] = self.shift_hold
        f = lambda xs: np.ascontiguousarray(xs, dtype=float)  # noqa: E731
        return {
            "consts": consts,
            "rpm_knots": f(self.rpm_knots),
            "torque": f(self.torque_curve),
            "hp": f(self.hp_curve),
            "bsfc": f(self.bsfc_curve),
            "ratios": f(self.gear_ratios),
            "up": f(up),
            "down": f(down),
        }


def load_vehicle_params(path=None, **overrides) -> VehicleParams:
    """Read vehicle parameters and curves from JSON (bundled file if ``path`` is None)."""
    if path is None:
        text = resources.files("mgvsim").joinpath("data/vehicle.json").read_text()
    else:
        text = Path(path).read_text()
    doc = {k: v for k, v in json.loads(text).items() if not k.startswith("_")}
    curves = doc.pop("curves")
    doc["rpm_knots"] = tuple(curves["rpm"])
    doc["torque_curve"] = tuple(curves["torque_nm"])
    doc["hp_curve"] = tuple(curves["power_hp"])
    doc["bsfc_curve"] = tuple(curves["bsfc_g_per_kwh"])
    doc["gear_ratios"] = tuple(doc["gear_ratios"])
    doc.update(overrides)
    return VehicleParams(**doc)


# -- engine and drivetrain ---------------------------------------------------


def engine_rpm(speed: float, params: VehicleParams, gear: int) -> float:
    road = speed / params.wheel_circumference * params.gear_ratios[gear] * 60.0
    return max(params.idle_rpm, road)


def lookup_performance(params: VehicleParams, rpm: float) -> tuple[float, float, float]:
    """(torque N·m, power hp, BSFC g/kWh) at ``rpm``, clamped to the curve ends."""
    xs = params.rpm_knots
    return (
        kernels.interp(rpm, *map(_arr, (xs, params.torque_curve))),
        kernels.interp(rpm, *map(_arr, (xs, params.hp_curve))),
        kernels.interp(rpm, *map(_arr, (xs, params.bsfc_curve))),
    )


def _arr(xs):
    return np.ascontiguousarray(xs, dtype=float)


def wheel_torque(params: VehicleParams, engine_torque: float, throttle: float, gear: int,
                 fan_on: bool) -> float:
    """Torque at each of the six wheels."""
    total = engine_torque * throttle * params.gear_ratios[gear]
    if fan_on:
        total *= 1.0 - params.fan_torque_penalty
    return total / params.wheel_count


def fuel_burn(power_hp: float, bsfc: float, fan_on: bool, params: VehicleParams, dt: float) -> float:
    """Litres of fuel for ``dt`` seconds at ``power_hp`` delivered (plus the fan)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    effective = power_hp + (params.fan_power if fan_on else 0.0)
    grams = effective * KW_PER_HP * bsfc * dt / 3600.0
    return grams / (1000.0 * params.fuel_density)


def shift_tables(params: VehicleParams) -> tuple[list[float], list[float]]:
    """Up- and downshift RPM thresholds per gear.

    The upshift point of gear ``g`` is the lowest RPM at which the next gear
    would put at least as much torque on the wheels; if that never happens
    below redline the shift waits until just under redline.  Each downshift
    point sits ``shift_gap`` below the RPM the lower gear lands on after the
    matching upshift.
    """
    ratios = params.gear_ratios
    xs, ys = _arr(params.rpm_knots), _arr(params.torque_curve)
    idle, red = params.idle_rpm, params.redline_rpm
    gap = max(params.shift_gap, 200.0)
    up = [math.inf] * len(ratios)
    down = [-1.0] * len(ratios)
    for g in range(len(ratios) - 1):
        rho = ratios[g + 1] / ratios[g]
        point = red - 1.0
        for r in np.arange(math.ceil(idle), red, 1.0):
            after = r * rho
            if after < idle:
                continue
            if kernels.interp(after, xs, ys) * ratios[g + 1] >= kernels.interp(r, xs, ys) * ratios[g]:
                point = float(r)
                break
        up[g] = point
        down[g + 1] = point * rho - gap
    return up, down


def select_gear(state: "VehicleState", params: VehicleParams) -> int:
    up, down = params.arrays["up"], params.arrays["down"]
    g = state.gear
    road = state.speed / params.wheel_circumference * params.gear_ratios[g] * 60.0
    if g < len(params.gear_ratios) - 1 and road >= up[g]:
        return g + 1
    if g > 0 and road <= down[g]:
        return g - 1
    return g


# -- driver ----------------------------------------------------------------


@dataclass
class PidState:
    kp: float = 0.5
    ki: float = 0.05
    kd: float = 0.1
    integral_limit: float = 2.0
    integral: float = 0.0
    prev_error: float | None = None

    def reset(self):
        self.integral = 0.0
        self.prev_error = None


def pid_driver(pid: PidState, target_speed: float, speed: float, dt: float) -> tuple[float, float]:
    """One PID update on speed error (m/s); returns (throttle, brake).

    The integral term is clamped to ``±integral_limit`` (output units) and
    frozen while the output is saturated in the direction of the error.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    e = target_speed - speed
    de = 0.0 if pid.prev_error is None else (e - pid.prev_error) / dt
    pid.prev_error = e
    candidate = pid.integral + pid.ki * e * dt
    candidate = min(max(candidate, -pid.integral_limit), pid.integral_limit)
    u_raw = pid.kp * e + candidate + pid.kd * de
    saturated = (u_raw > 1.0 and e > 0) or (u_raw < -1.0 and e < 0)
    if not saturated:
        pid.integral = candidate
    u = min(max(pid.kp * e + pid.integral + pid.kd * de, -1.0), 1.0)
    return max(u, 0.0), max(-u, 0.0)


# -- coolant ---------------------------------------------------------------


def coolant_equilibrium(fan_on: bool, load: float, params: VehicleParams | None = None) -> float:
    p = params or _DEFAULT_COOLANT
    if fan_on:
        return p.coolant_fan_eq
    return p.coolant_base_eq + p.coolant_load_gain * load


def coolant_step(temp: float, fan_on: bool, load: float, dt: float,
                 params: VehicleParams | None = None) -> float:
    """Explicit Euler step of first-order relaxation toward the active equilibrium."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    p = params or _DEFAULT_COOLANT
    t_eq = coolant_equilibrium(fan_on, load, p)
    tau = p.tau_cool if temp > t_eq else p.tau_heat
    return min(max(temp + (t_eq - temp) / tau * dt, -40.0), 150.0)


@dataclass(frozen=True)
class _CoolantDefaults:
    coolant_fan_eq: float = 60.0
    coolant_base_eq: float = 90.0
    coolant_load_gain: float = 30.0
    tau_cool: float = 120.0
    tau_heat: float = 180.0


_DEFAULT_COOLANT = _CoolantDefaults()


# -- route -------------------------------------------------------------------


def target_speed_kmh(surface: str, grade: float) -> float:
    if surface == "main_road" and abs(grade) < FLAT_GRADE:
        return MAIN_ROAD_KMH
    return OTHER_KMH


@dataclass(frozen=True)
class Segment:
    length: float
    grade: float
    surface: str
    target_speed_kmh: float

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError("segment length must be positive")
        if self.surface not in SURFACES:
            raise ValueError(f"unknown surface {self.surface!r}")
        if self.target_speed_kmh <= 0:
            raise ValueError("target speed must be positive")


@dataclass(frozen=True)
class Route:
    segments: tuple
    name: str = ""
    start_altitude: float = 0.0

    def __post_init__(self):
        if not self.segments:
            raise ValueError("route needs at least one segment")

    @cached_property
    def ends(self) -> np.ndarray:
        return np.cumsum([s.length for s in self.segments])

    @property
    def length(self) -> float:
        return float(self.ends[-1])

    def segment_index(self, position: float) -> int:
        return min(int(np.searchsorted(self.ends, position, side="right")), len(self.segments) - 1)

    def target_speed(self, position: float) -> float:
        """Target speed in m/s set by the trigger at the start of the current segment."""
        return self.segments[self.segment_index(position)].target_speed_kmh / 3.6

    def altitudes(self) -> np.ndarray:
        rise = [s.length * s.grade / math.hypot(1.0, s.grade) for s in self.segments]
        return self.start_altitude + np.concatenate([[0.0], np.cumsum(rise)])

    def arrays(self, params: VehicleParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        grade = np.array([s.grade for s in self.segments], dtype=float)
        crr = np.array([params.rolling_resistance[s.surface] for s in self.segments], dtype=float)
        return np.ascontiguousarray(self.ends, dtype=float), grade, crr


def route_from_dict(doc: dict) -> Route:
    segs = []
    for s in doc["segments"]:
        surface = s["surface"]
        grade = float(s.get("grade", 0.0))
        target = s.get("target_speed_kmh", target_speed_kmh(surface, grade))
        segs.append(Segment(float(s["length"]), grade, surface, float(target)))
    return Route(tuple(segs), doc.get("name", ""), float(doc.get("start_altitude", 0.0)))


def load_route(route) -> Route:
    """Load a bundled route by id (1..5) or a route JSON file by path."""
    if isinstance(route, int):
        if not 1 <= route <= 5:
            raise ValueError(f"route id must be 1..5, got {route}")
        text = resources.files("mgvsim").joinpath(f"data/routes/route_{route}.json").read_text()
    else:
        text = Path(route).read_text()
    return route_from_dict(json.loads(text))


# -- state and stepping --------------------------------------------------------


@dataclass(frozen=True)
class VehicleState:
    t: float = 0.0
    position: float = 0.0
    speed: float = 0.0
    gear: int = 0
    rpm: float = 0.0
    throttle: float = 0.0
    brake: float = 0.0
    fuel_used: float = 0.0
    odometer: float = 0.0
    coolant_temp: float = 90.0
    fan_on: bool = False
    last_shift: float = -math.inf
    delivered_kwh: float = 0.0
    fuel_grams: float = 0.0

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError("speed must be non-negative")
        if not (0 <= self.throttle <= 1 and 0 <= self.brake <= 1):
            raise ValueError("throttle and brake must be in [0, 1]")


@dataclass(frozen=True)
class Inputs:
    throttle: float = 0.0
    brake: float = 0.0
    fan_on: bool = False


def _pack(state: VehicleState, route: Route) -> np.ndarray:
    s = np.zeros(N_STATE)
    s[S_T] = state.t
    s[S_POS] = state.position
    s[S_SPEED] = state.speed
    s[S_GEAR] = state.gear
    s[S_RPM] = state.rpm
    s[S_FUEL] = state.fuel_used
    s[S_ODO] = state.odometer
    s[S_COOLANT] = state.coolant_temp
    s[S_LAST_SHIFT] = state.last_shift if math.isfinite(state.last_shift) else -1e9
    s[S_WORK] = state.delivered_kwh
    s[S_SEG] = route.segment_index(state.position)
    s[S_FUEL_G] = state.fuel_grams
    return s


def _unpack(s: np.ndarray, inputs: Inputs) -> VehicleState:
    return VehicleState(
        t=float(s[S_T]),
        position=float(s[S_POS]),
        speed=float(s[S_SPEED]),
        gear=int(s[S_GEAR]),
        rpm=float(s[S_RPM]),
        throttle=inputs.throttle,
        brake=inputs.brake,
        fuel_used=float(s[S_FUEL]),
        odometer=float(s[S_ODO]),
        coolant_temp=float(s[S_COOLANT]),
        fan_on=bool(inputs.fan_on),
        last_shift=float(s[S_LAST_SHIFT]),
        delivered_kwh=float(s[S_WORK]),
        fuel_grams=float(s[S_FUEL_G]),
    )


def vehicle_step(state: VehicleState, inputs: Inputs, route: Route, params: VehicleParams,
                 dt: float) -> VehicleState:
    """Advance one physics step.

    Net force is drive minus grade, rolling, aerodynamic and brake forces;
    drive force is total wheel torque over the wheel radius.  Raises
    :class:`RouteComplete` once the vehicle has passed the end of the route.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    model = VehicleModel(params, route, state)
    if model.advance(inputs.throttle, inputs.brake, inputs.fan_on, 1, dt) == 0:
        raise RouteComplete(f"route ends at {route.length:.1f} m")
    return _unpack(model.state, inputs)


class VehicleModel:
    """Mutable vehicle bound to a route; the runner's handle on the kernel."""

    def __init__(self, params: VehicleParams, route: Route, initial: VehicleState | None = None):
        self.params = params
        self.route = route
        self._a = params.arrays
        self._route_arrays = route.arrays(params)
        initial = initial or VehicleState()
        self.state = _pack(initial, route)
        self.inputs = Inputs(initial.throttle, initial.brake, initial.fan_on)
        if initial.rpm == 0.0:
            self.state[S_RPM] = engine_rpm(initial.speed, params, initial.gear)

    def advance(self, throttle: float, brake: float, fan_on: bool, n_steps: int, dt: float) -> int:
        self.inputs = Inputs(throttle, brake, bool(fan_on))
        a = self._a
        ends, grade, crr = self._route_arrays
        return kernels.vehicle_advance(
            self.state, float(throttle), float(brake), int(bool(fan_on)), a["consts"],
            a["rpm_knots"], a["torque"], a["hp"], a["bsfc"], a["ratios"], a["up"], a["down"],
            ends, grade, crr, float(dt), int(n_steps),
        )

    def snapshot(self) -> VehicleState:
        return _unpack(self.state, self.inputs)

    @property
    def speed(self) -> float:
        return float(self.state[S_SPEED])

    @property
    def position(self) -> float:
        return float(self.state[S_POS])

    @property
    def coolant_temp(self) -> float:
        return float(self.state[S_COOLANT])

    def with_state(self, **changes) -> VehicleState:
        return replace(self.snapshot(), **changes)
