"""Scenario configuration and the deterministic simulation loop.

One run wires two buses ("pt" powertrain, "ch" chassis), the three ECUs, the
text gateway and any attack/defense plugins, then steps the vehicle at the
physics rate with all control and bus traffic at the control rate.
"""
from __future__ import annotations

import copy
import difflib
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .ecus import BonwareMonitor, ChassisEcu, DriverOutputs, FanController, PowertrainEcu, Watchdog
from .signals import SignalDictionary, format_log_line, load_signal_dictionary
from .threats import (
    AttackSpec,
    BlockFilter,
    DefenseSpec,
    FirmwareAttack,
    InjectAttack,
    ModifyFilter,
    PlausibilityFilter,
    ThreatConfigError,
    Watermarker,
)
from .vbus import Bus, FilterChain, Gateway, GatewayMapping, TextLink, parse_text_line
from .vehicle import PidState, VehicleModel, VehicleState, load_route, load_vehicle_params, pid_driver

CSV_COLUMNS = (
    "t", "speed_kmh", "rpm", "gear", "throttle", "brake", "fuel_used_L",
    "fuel_eff_km_per_L", "coolant_C", "fan_on", "odometer_km",
)
EFF_WINDOW_S = 10


class ScenarioError(ValueError):
    pass


# key -> default; nested dicts are sections with their own strict keys
_SCHEMA = {
    "name": "",
    "description": "",
    "duration": 800.0,
    "dt": 0.01,
    "control_period": 0.1,
    "seed": 0,
    "route": 1,
    "vehicle": None,
    "signals": None,
    "attacks": [],
    "defenses": [],
    "outputs": {"csv": None, "canlog": None, "summary": None},
    "initial": {"coolant_C": 90.0, "speed_kmh": 0.0, "position_m": 0.0},
    "pid": {"kp": 0.5, "ki": 0.05, "kd": 0.1, "integral_limit": 2.0},
    "ecu": {
        "fan_upper_C": 103.0,
        "fan_lower_C": 85.0,
        "fan_period": 1.0,
        "reflash_duration": 20.0,
        "watchdog": True,
        "watchdog_window": 100.0,
        "watchdog_jitter": 10.0,
        "watchdog_margin": 10.0,
        "chassis_period": 0.1,
        "override_timeout": 0.3,
        "fan_command_timeout": 3.0,
    },
}
_ATTACK_KEYS = ("kind", "start", "stop", "target", "values", "period", "bus", "tap", "name")
_DEFENSE_KEYS = ("kind", "key", "frames", "signal", "tolerance", "window", "tap",
                 "window_s", "jitter", "margin")


def _unknown(key: str, allowed, where: str, source: str) -> ScenarioError:
    hint = difflib.get_close_matches(key, list(allowed), n=1)
    msg = f"{source}: unknown key {where}{key!r}"
    if hint:
        msg += f" (did you mean {hint[0]!r}?)"
    return ScenarioError(msg)


def _merge(doc: dict, schema: dict, where: str, source: str) -> dict:
    out = {}
    for key in doc:
        if key not in schema:
            raise _unknown(key, schema, where, source)
    for key, default in schema.items():
        if key not in doc:
            out[key] = copy.deepcopy(default)
        elif isinstance(default, dict):
            if not isinstance(doc[key], dict):
                raise ScenarioError(f"{source}: {where}{key} must be an object")
            out[key] = _merge(doc[key], default, f"{where}{key}.", source)
        else:
            out[key] = doc[key]
    return out


@dataclass
class ScenarioConfig:
    """Validated scenario.  ``raw`` is the canonical document (defaults
    filled in) used for the config hash; paths in it are as written."""

    raw: dict
    base_dir: Path
    sigdb: SignalDictionary
    attacks: list[AttackSpec] = field(default_factory=list)
    defenses: list[DefenseSpec] = field(default_factory=list)

    def __getattr__(self, name):
        raw = self.__dict__.get("raw")
        if raw is not None and name in raw:
            return raw[name]
        raise AttributeError(name)

    @property
    def config_hash(self) -> str:
        text = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def resolve(self, path) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def without_attacks(self) -> "ScenarioConfig":
        raw = copy.deepcopy(self.raw)
        raw["attacks"] = []
        return ScenarioConfig(raw, self.base_dir, self.sigdb, [], list(self.defenses))


def scenario_from_dict(doc: dict, base_dir=".", source: str = "<scenario>") -> ScenarioConfig:
    if not isinstance(doc, dict):
        raise ScenarioError(f"{source}: top level must be an object")
    raw = _merge(doc, _SCHEMA, "", source)
    base_dir = Path(base_dir)

    def number(key, positive=True):
        v = raw[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ScenarioError(f"{source}: {key} must be a number")
        if positive and v <= 0:
            raise ScenarioError(f"{source}: {key} must be > 0, got {v}")
        raw[key] = float(v)

    number("duration")
    number("dt")
    number("control_period")
    steps = raw["control_period"] / raw["dt"]
    if abs(steps - round(steps)) > 1e-9:
        raise ScenarioError(f"{source}: control_period must be a whole number of dt steps")
    if isinstance(raw["seed"], bool) or not isinstance(raw["seed"], int) or not 0 <= raw["seed"] < 2**64:
        raise ScenarioError(f"{source}: seed must be an integer in [0, 2**64)")
    route = raw["route"]
    if isinstance(route, int) and not isinstance(route, bool):
        if not 1 <= route <= 5:
            raise ScenarioError(f"{source}: route must be 1..5 or a path, got {route}")
    elif not isinstance(route, str):
        raise ScenarioError(f"{source}: route must be 1..5 or a path")
    for key in ("vehicle", "signals") + (("route",) if isinstance(route, str) else ()):
        if raw[key] is not None:
            p = Path(raw[key])
            p = p if p.is_absolute() else base_dir / p
            if not p.exists():
                raise ScenarioError(f"{source}: {key} file not found: {p}")
    ecu = raw["ecu"]
    if not ecu["fan_lower_C"] < ecu["fan_upper_C"]:
        raise ScenarioError(f"{source}: ecu.fan_lower_C must be below ecu.fan_upper_C")
    for k in ("fan_period", "reflash_duration", "watchdog_window", "chassis_period", "fan_command_timeout"):
        if not ecu[k] > 0:
            raise ScenarioError(f"{source}: ecu.{k} must be > 0")
    if ecu["watchdog_jitter"] < 0 or ecu["watchdog_jitter"] >= ecu["watchdog_window"]:
        raise ScenarioError(f"{source}: ecu.watchdog_jitter must be in [0, watchdog_window)")

    sig_path = raw["signals"]
    if sig_path is not None:
        sig_path = Path(sig_path) if Path(sig_path).is_absolute() else base_dir / sig_path
    sigdb = load_signal_dictionary(sig_path)
    attacks, defenses = [], []
    for i, a in enumerate(raw["attacks"]):
        if not isinstance(a, dict):
            raise ScenarioError(f"{source}: attacks[{i}] must be an object")
        for k in a:
            if k not in _ATTACK_KEYS:
                raise _unknown(k, _ATTACK_KEYS, f"attacks[{i}].", source)
        try:
            attacks.append(AttackSpec.from_dict(a, sigdb))
        except ThreatConfigError as exc:
            raise ScenarioError(f"{source}: attacks[{i}]: {exc}") from None
    for i, d in enumerate(raw["defenses"]):
        if not isinstance(d, dict):
            raise ScenarioError(f"{source}: defenses[{i}] must be an object")
        for k in d:
            if k not in _DEFENSE_KEYS:
                raise _unknown(k, _DEFENSE_KEYS, f"defenses[{i}].", source)
        try:
            defenses.append(DefenseSpec.from_dict(d, sigdb))
        except ThreatConfigError as exc:
            raise ScenarioError(f"{source}: defenses[{i}]: {exc}") from None
    names = [a.name for a in attacks]
    if len(set(names)) != len(names):
        raise ScenarioError(f"{source}: attack names must be unique")
    return ScenarioConfig(raw, base_dir, sigdb, attacks, defenses)


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return scenario_from_dict(doc, path.parent, str(path))


def bundled_scenario(name: str) -> Path:
    """Path of a scenario shipped with the package, e.g. ``"stuck_fan_283"``."""
    ref = resources.files("mgvsim").joinpath(f"data/scenarios/{name}.json")
    return Path(str(ref))


# -- artifacts -----------------------------------------------------------------


@dataclass
class RunArtifacts:
    csv: str
    canlog: str
    summary: dict
    table: dict[str, np.ndarray]

    def write(self, csv=None, canlog=None, summary=None) -> None:
        for path, text in ((csv, self.csv), (canlog, self.canlog)):
            if path is not None:
                Path(path).parent.mkdir(parents=True, exist_ok=True)
                Path(path).write_text(text)
        if summary is not None:
            Path(summary).parent.mkdir(parents=True, exist_ok=True)
            Path(summary).write_text(json.dumps(self.summary, indent=2, sort_keys=True) + "\n")


def _csv_row(t, st, eff) -> str:
    return (
        f"{t:d},{st.speed * 3.6:.4f},{st.rpm:.2f},{st.gear + 1:d},{st.throttle:.4f},"
        f"{st.brake:.4f},{st.fuel_used:.6f},{eff:.6f},{st.coolant_temp:.4f},"
        f"{int(st.fan_on):d},{st.odometer / 1000.0:.6f}"
    )


class _Logger:
    def __init__(self):
        self.lines: list[str] = []

    def __call__(self, tf):
        self.lines.append(format_log_line(tf))


class Simulation:
    """All live objects of one run; :meth:`run` drives the loop."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        cfg = config.raw
        sigdb = config.sigdb
        self.sigdb = sigdb
        self.params = load_vehicle_params(config.resolve(cfg["vehicle"]))
        route = cfg["route"]
        self.route = load_route(route if isinstance(route, int) else config.resolve(route))
        init = cfg["initial"]
        self.vehicle = VehicleModel(
            self.params,
            self.route,
            VehicleState(
                position=float(init["position_m"]),
                speed=float(init["speed_kmh"]) / 3.6,
                coolant_temp=float(init["coolant_C"]),
            ),
        )
        self.pid = PidState(**{k: float(v) for k, v in cfg["pid"].items()})

        self.buses = {"pt": Bus("pt"), "ch": Bus("ch")}
        self.logger = _Logger()
        self.link = TextLink()
        self.gateway = Gateway(GatewayMapping.from_dictionary(sigdb, self._gateway_doc()), sigdb)
        ecu = cfg["ecu"]
        self.chassis = ChassisEcu(sigdb, period=ecu["chassis_period"])
        self.powertrain = PowertrainEcu(sigdb, override_timeout=ecu["override_timeout"])
        self.watchdog = None
        if ecu["watchdog"]:
            self.watchdog = Watchdog(
                rng_mod.stream(cfg["seed"], "watchdog"), ecu["watchdog_window"],
                ecu["watchdog_jitter"], ecu["fan_upper_C"], ecu["fan_lower_C"], ecu["watchdog_margin"],
            )
        self.fan = FanController(
            sigdb, ecu["fan_upper_C"], ecu["fan_lower_C"], ecu["fan_period"],
            ecu["reflash_duration"], self.watchdog,
        )

        pt, ch = self.buses["pt"], self.buses["ch"]
        self.chassis.attach(pt)
        self.powertrain.attach(pt)
        self.gw_taps = {
            name: bus.attach_tap("gateway", on_frame=self._gateway_rx) for name, bus in self.buses.items()
        }
        self.fan.attach(ch)

        self.injects: list[InjectAttack] = []
        self.firmware: list[FirmwareAttack] = []
        self.filters: list = []
        for spec in config.attacks:
            self._install_attack(spec)
        self.bonware: list[BonwareMonitor] = []
        self.defense_stats: list = []
        for spec in config.defenses:
            self._install_defense(spec)
        for bus in self.buses.values():
            bus.attach_tap("logger", on_frame=self.logger)

        self.fan_input = False
        self.fan_heard = -math.inf
        self.throttle_input = 0.0
        self.brake_input = 0.0

    @staticmethod
    def _gateway_doc():
        doc = json.loads(resources.files("mgvsim").joinpath("data/signals.json").read_text())
        return doc["gateway"]

    # -- wiring ---------------------------------------------------------------

    def _bus_of(self, frame_id: int, override: str | None) -> Bus:
        name = override or self.sigdb.frame(frame_id).bus
        try:
            return self.buses[name]
        except KeyError:
            raise ScenarioError(f"unknown bus {name!r}") from None

    def _install_attack(self, spec: AttackSpec) -> None:
        if spec.kind == "firmware":
            if spec.target != self.fan.name:
                raise ScenarioError(f"firmware attack target {spec.target!r} is not a compromisable ECU")
            self.firmware.append(FirmwareAttack(spec, self.fan))
            return
        bus = self._bus_of(spec.target[0], spec.bus)
        if spec.kind == "inject":
            plugin = InjectAttack(spec, self.sigdb)
            plugin.attach(bus)
            self.injects.append(plugin)
            return
        stage = BlockFilter(spec) if spec.kind == "block" else ModifyFilter(spec, self.sigdb)
        if spec.tap is None:
            bus.inline.append(stage)
        else:
            bus.tap(spec.tap).filters.append(stage)
        self.filters.append(stage)

    def _install_defense(self, spec: DefenseSpec) -> None:
        if spec.kind == "reflash_responder":
            p = spec.params
            ecu = self.config.raw["ecu"]
            wd = Watchdog(
                rng_mod.stream(self.config.raw["seed"], "bonware"),
                float(p.get("window_s", ecu["watchdog_window"])),
                float(p.get("jitter", ecu["watchdog_jitter"])),
                ecu["fan_upper_C"], ecu["fan_lower_C"],
                float(p.get("margin", ecu["watchdog_margin"])),
            )
            mon = BonwareMonitor(self.sigdb, self.fan, wd)
            mon.attach(self.buses["ch"])
            self.bonware.append(mon)
            self.defense_stats.append(("reflash_responder", mon))
        elif spec.kind == "watermark":
            frames = spec.frames or [self.sigdb.signal("coolant_temp").frame_id]
            wm = Watermarker(spec.key, self.sigdb, frames)
            for fid in frames:
                bus = self._bus_of(fid, None)
                sender = self._sender_of(fid, bus)
                if sender.outbound is None:
                    sender.outbound = FilterChain()
                if wm.signer not in sender.outbound.stages:
                    sender.outbound.append(wm.signer)
                for tap in bus.taps:
                    if tap is not sender and not tap.name.startswith("attacker:"):
                        tap.filters.stages.insert(0, wm.verifier())
            self.defense_stats.append(("watermark", wm))
        elif spec.kind == "plausibility":
            sd = self.sigdb.signal(spec.signal)
            bus = self._bus_of(sd.frame_id, None)
            stage = PlausibilityFilter(self.sigdb, spec.signal, spec.tolerance, spec.window)
            tap = bus.tap(spec.tap or self._default_receiver(sd.frame_id))
            tap.filters.append(stage)
            self.defense_stats.append(("plausibility", stage))

    def _sender_of(self, frame_id: int, bus: Bus):
        owners = {
            self.sigdb.signal("accelerator_pedal").frame_id: "chassis_ecu",
            self.sigdb.signal("engine_throttle").frame_id: "powertrain_ecu",
            self.sigdb.signal("fan_control").frame_id: "fan_controller",
        }
        return bus.tap(owners.get(frame_id, "gateway"))

    def _default_receiver(self, frame_id: int) -> str:
        if frame_id == self.sigdb.signal("coolant_temp").frame_id:
            return "fan_controller"
        if frame_id == self.sigdb.signal("accelerator_pedal").frame_id:
            return "powertrain_ecu"
        return "gateway"

    def _gateway_rx(self, tf) -> None:
        for line in self.gateway.to_text(tf):
            self.link.send("SimToVis", line)

    # -- loop -------------------------------------------------------------------

    def _vehicle_report(self, now: float) -> list[str]:
        v = self.vehicle
        st = v.state
        ts = f"{now:.3f}"
        return [
            f"{ts},coolant_temp,{v.coolant_temp!r}",
            f"{ts},speed,{v.speed * 3.6!r}",
            f"{ts},rpm,{float(st[4])!r}",
        ]

    def _apply_sim_inputs(self, now: float) -> None:
        for line in self.link.receive("SimToVis"):
            _, param, value = parse_text_line(line)
            if param == "spn91":
                self.throttle_input = min(max(value, 0.0), 1.0)
            elif param == "brake":
                self.brake_input = min(max(value, 0.0), 1.0)
            elif param == "fan_control":
                self.fan_input = value >= 0.5
                self.fan_heard = now
        # fan relay drops out when the controller goes quiet
        if now - self.fan_heard > self.config.raw["ecu"]["fan_command_timeout"] + 1e-9:
            self.fan_input = False

    def run(self) -> RunArtifacts:
        cfg = self.config.raw
        dt = cfg["dt"]
        period = cfg["control_period"]
        sub = int(round(period / dt))
        n_events = int(round(cfg["duration"] / period))
        per_second = int(round(1.0 / period))
        pt, ch = self.buses["pt"], self.buses["ch"]

        rows = []
        odo_hist: list[float] = []
        fuel_hist: list[float] = []
        eff = None
        completed = True
        end_time = cfg["duration"]
        for k in range(n_events + 1):
            now = k * period
            if k % per_second == 0 and abs(now - round(now)) < 1e-9:
                st = self.vehicle.with_state(
                    throttle=self.throttle_input, brake=self.brake_input, fan_on=self.fan_input
                )
                odo_hist.append(st.odometer)
                fuel_hist.append(st.fuel_used)
                j = max(0, len(odo_hist) - 1 - EFF_WINDOW_S)
                d_fuel = fuel_hist[-1] - fuel_hist[j]
                if d_fuel > 0:
                    eff = (odo_hist[-1] - odo_hist[j]) / 1000.0 / d_fuel
                rows.append((int(round(now)), st, eff))
            if k == n_events:
                break

            thr, brk = pid_driver(self.pid, self.route.target_speed(self.vehicle.position),
                                  self.vehicle.speed, period)
            self.chassis.step(DriverOutputs(thr, brk, 0.0), now)
            for line in self._vehicle_report(now):
                self.link.send("VisToSim", line)
            for tf in self.gateway.from_lines(self.link.receive("VisToSim"), "ch"):
                if self.sigdb.frame(tf.frame.id).bus == "ch":
                    self.gw_taps["ch"].publish(tf.frame, now)
            for fw in self.firmware:
                fw.step(now)
            for inj in self.injects:
                inj.step(now)
            pt.settle()
            ch.settle()
            self.fan.tick(now)
            for mon in self.bonware:
                mon.tick(now)
            ch.settle()
            self._apply_sim_inputs(now)

            taken = self.vehicle.advance(self.throttle_input, self.brake_input, self.fan_input, sub, dt)
            if taken < sub:
                completed = False
                end_time = float(self.vehicle.state[0])
                break

        return self._artifacts(rows, completed, end_time)

    def _artifacts(self, rows, completed: bool, end_time: float) -> RunArtifacts:
        # rows before any fuel was burnt take the first defined efficiency
        first = next((e for _, _, e in rows if e is not None), 0.0)
        rows = [(t, st, first if e is None else e) for t, st, e in rows]
        buf = io.StringIO()
        buf.write(",".join(CSV_COLUMNS) + "\n")
        for t, st, eff in rows:
            buf.write(_csv_row(t, st, eff) + "\n")
        csv_text = buf.getvalue()
        canlog = "".join(line + "\n" for line in self.logger.lines)

        table = read_csv_table(io.StringIO(csv_text))
        final = self.vehicle.snapshot()
        distance_km = final.odometer / 1000.0
        provenance = {}
        for name, bus in self.buses.items():
            counts: dict[str, int] = {}
            for _, src in bus.history:
                counts[src] = counts.get(src, 0) + 1
            provenance[name] = dict(sorted(counts.items()))
        defenses = {}
        for kind, obj in self.defense_stats:
            if kind == "watermark":
                defenses.setdefault(kind, {"rejected": 0})["rejected"] += obj.rejected
            elif kind == "plausibility":
                d = defenses.setdefault(kind, {"checked": 0, "substituted": 0})
                d["checked"] += obj.checked
                d["substituted"] += obj.substituted
            else:
                d = defenses.setdefault(kind, {"fired_at": []})
                d["fired_at"].extend(round(t, 3) for t in obj.watchdog.fired_at)
        attacks = {}
        for f in self.filters:
            attacks[f.spec.name] = {"blocked": f.blocked} if isinstance(f, BlockFilter) else {"modified": f.modified}
        for inj in self.injects:
            attacks[inj.spec.name] = {"injected": inj.tap.sent if inj.tap else inj.count}
        for fw in self.firmware:
            attacks[fw.spec.name] = {"triggered": fw.triggered}
        summary = {
            "name": self.config.raw["name"],
            "seed": self.config.raw["seed"],
            "config_hash": self.config.config_hash,
            "completed": completed,
            "end_time_s": round(end_time, 6),
            "distance_km": round(distance_km, 6),
            "fuel_used_L": round(final.fuel_used, 6),
            "mean_speed_kmh": round(distance_km / (end_time / 3600.0), 6) if end_time > 0 else 0.0,
            "mean_fuel_eff_km_per_L": round(distance_km / final.fuel_used, 6) if final.fuel_used > 0 else 0.0,
            "frames_by_source": provenance,
            "reflash_times_s": [round(t, 3) for t in self.fan.reflashes],
            "watchdog_fired_s": [round(t, 3) for t in (self.watchdog.fired_at if self.watchdog else [])],
            "attacks": attacks,
            "defenses": defenses,
            "gateway": dict(sorted(self.gateway.stats.items())),
        }
        if not completed:
            summary["note"] = "route exhausted before duration; run ended early"
        return RunArtifacts(csv_text, canlog, summary, table)


def run(config: ScenarioConfig, write: bool = True) -> RunArtifacts:
    """Execute a scenario; writes the configured outputs when ``write``."""
    artifacts = Simulation(config).run()
    if write:
        out = config.raw["outputs"]
        artifacts.write(config.resolve(out["csv"]), config.resolve(out["canlog"]), config.resolve(out["summary"]))
    return artifacts


def read_csv_table(source) -> dict[str, np.ndarray]:
    """Read a run CSV into column arrays (path or text stream)."""
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            return read_csv_table(fh)
    header = source.readline().strip().split(",")
    if not header or header[0] != "t":
        raise ValueError("not a run CSV: first column must be 't'")
    data = np.loadtxt(source, delimiter=",", ndmin=2)
    if data.size == 0:
        data = np.empty((0, len(header)))
    if data.shape[1] != len(header):
        raise ValueError(f"expected {len(header)} columns, got {data.shape[1]}")
    return {name: data[:, i] for i, name in enumerate(header)}
