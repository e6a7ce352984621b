"""Scenario configuration: defaults, validation, and the YAML file format.

Scenario files are nested key/value documents whose keys mirror the
``ScenarioConfig`` field names one-to-one, so any field visible here can be
set from a file. Unknown keys are rejected with the offending key path.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import yaml

from .constraints import BarrierParams, ClfParams, ControlBounds, QpWeights
from .controller import MODE_EVENT, MODE_TIME, ControllerConfig
from .robust import BoundVectors, VEHICLE_IDS
from .vehicles import DisturbanceConfig, VehicleState

log = logging.getLogger("mixedlane")

DEFAULT_INITIAL_STATES = {
    "C": VehicleState(20.0, 0.0, 0.0, 25.0),
    "1": VehicleState(50.0, 4.0, 0.0, 29.0),
    "H": VehicleState(10.0, 4.0, 0.0, 28.0),
    "U": VehicleState(60.0, 0.0, 0.0, 20.0),
}

RANDOM_U_RANGE = (-1.7, 1.7)
RANDOM_PHI_RANGE = (-0.2 * math.pi, 0.2 * math.pi)
HDV_U_LIMIT = 7.0
HDV_PHI_LIMIT = math.pi / 4

POLICY_KINDS = ("random", "aggressive", "conservative", "hesitant", "external")


@dataclass(frozen=True)
class HdvPolicyConfig:
    """Scripted human-driver archetypes plus the live/replay external kind."""

    kind: str = "random"
    u_range: tuple = RANDOM_U_RANGE
    phi_range: tuple = RANDOM_PHI_RANGE
    # Random steering draws a target (lane-hold feedback plus uniform noise
    # of amplitude phi_noise, clamped into phi_range) at every controller
    # tick; the applied steering slews toward the target at phi_slew rad/s.
    # Discontinuous full-range steering would mean lateral lunges of
    # ~17 m/s, which no physical driver produces; phi_range stays the hard
    # membership bound. random_lane_hold False gives the unfiltered
    # uniform-jump policy.
    random_lane_hold: bool = True
    phi_noise: float = 0.2
    phi_slew: float = 0.6
    aggressive_u: float = 1.7
    conservative_decel: float = -2.0
    conservative_gap: float = 30.0
    conservative_lat_rate: float = 0.1
    hesitant_u: float = 1.5
    hesitant_dwell: tuple = (0.5, 1.5)
    # Lane-hold steering feedback used by every scripted archetype.
    lane_hold_y_gain: float = 0.5
    lane_hold_theta_gain: float = 1.0
    lane_hold_phi_max: float = 0.2 * math.pi

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything a run needs; defaults reproduce the reference lane-change
    scene (two cooperating vehicles, one human, one slow obstacle)."""

    initial_states: dict = field(
        default_factory=lambda: dict(DEFAULT_INITIAL_STATES))
    lane_width: float = 4.0
    wheelbase: float = 2.7
    v_min: float = 15.0
    v_max: float = 35.0
    v_d: float = 30.0
    control_bounds: ControlBounds = field(default_factory=ControlBounds)
    barrier: dict = field(default_factory=lambda: {
        "a_c": 0.6, "b_c": 0.1, "a_1": 0.6, "b_1": 0.1,
        "k_ch": 6.0, "k_1c": 2.0, "k_1h": 2.0, "k_cu": 2.0,
        "k_speed": 2.0, "k_lateral": 15.0})
    clf: dict = field(default_factory=lambda: {
        "m1": 1.0, "m2": 1.0, "m3": 1.0, "m4": 1.0})
    weights: QpWeights = field(default_factory=QpWeights)
    disturbance: DisturbanceConfig = field(default_factory=DisturbanceConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    hdv_policy: HdvPolicyConfig = field(default_factory=HdvPolicyConfig)
    dt_sim: float = 0.001
    seed: int = 0

    def __post_init__(self):
        missing = set(VEHICLE_IDS) - set(self.initial_states)
        if missing:
            raise ValueError(f"initial_states missing {sorted(missing)}")
        if self.v_min >= self.v_max:
            raise ValueError("need v_min < v_max")
        if self.v_min <= 0:
            raise ValueError("v_min must be positive")
        if self.dt_sim <= 0:
            raise ValueError("dt_sim must be positive")
        if self.lane_width <= 0 or self.wheelbase <= 0:
            raise ValueError("lane_width and wheelbase must be positive")
        self.warn_event_rate()

    # Derived parameter views -------------------------------------------

    @property
    def barrier_params(self) -> dict:
        b = self.barrier
        return {"CH": BarrierParams(b["a_c"], b["b_c"], b["k_ch"]),
                "CU": BarrierParams(b["a_c"], b["b_c"], b["k_cu"]),
                "1C": BarrierParams(b["a_1"], b["b_1"], b["k_1c"]),
                "1H": BarrierParams(b["a_1"], b["b_1"], b["k_1h"])}

    @property
    def k_speed(self) -> float:
        return self.barrier["k_speed"]

    @property
    def k_lateral(self) -> float:
        return self.barrier["k_lateral"]

    @property
    def clf_params(self) -> ClfParams:
        return ClfParams(self.clf["m1"], self.clf["m2"], self.clf["m3"],
                         self.clf["m4"], self.v_d, self.lane_width)

    def warn_event_rate(self):
        """Warn when drift bounds imply triggers nearly every micro-step."""
        if self.controller.mode != MODE_EVENT:
            return
        worst = math.inf
        for vid in ("1", "C", "U"):
            v0 = self.initial_states[vid].v
            if v0 > 0:
                worst = min(worst, self.controller.bounds.s[vid][0] / v0)
        if worst < 5 * self.dt_sim:
            log.warning(
                "state-drift bound s_x implies a mean inter-event time of "
                "%.2g ms (< 5 micro-steps); the event loop will update "
                "nearly every step", worst * 1e3)

    def config_hash(self) -> str:
        """Stable hash of the full configuration, for report provenance."""
        blob = json.dumps(to_dict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# dict / YAML round trip


def to_dict(sc: ScenarioConfig) -> dict:
    d = {
        "initial_states": {vid: {"x": s.x, "y": s.y, "theta": s.theta,
                                 "v": s.v}
                           for vid, s in sc.initial_states.items()},
        "lane_width": sc.lane_width,
        "wheelbase": sc.wheelbase,
        "v_min": sc.v_min,
        "v_max": sc.v_max,
        "v_d": sc.v_d,
        "control_bounds": asdict(sc.control_bounds),
        "barrier": dict(sc.barrier),
        "clf": dict(sc.clf),
        "weights": asdict(sc.weights),
        "disturbance": {
            "sigma_range": list(sc.disturbance.sigma_range),
            "eps_ranges": [list(r) for r in sc.disturbance.eps_ranges],
            "seed": sc.disturbance.seed,
        },
        "controller": {
            "mode": sc.controller.mode,
            "delta": sc.controller.delta,
            "epsilon": sc.controller.epsilon,
            "t_max": sc.controller.t_max,
            "hdv_known": sc.controller.hdv_known,
            "grid_points": sc.controller.grid_points,
            "bounds": {
                "w": list(sc.controller.bounds.w),
                "nu": list(sc.controller.bounds.nu),
                "s": {vid: list(v) for vid, v in sc.controller.bounds.s.items()},
            },
        },
        "hdv_policy": {k: (list(v) if isinstance(v, tuple) else v)
                       for k, v in asdict(sc.hdv_policy).items()},
        "dt_sim": sc.dt_sim,
        "seed": sc.seed,
    }
    return d


class ScenarioError(ValueError):
    """Scenario file problem, carrying the offending key path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


def _take(mapping: dict, allowed: set, path: str):
    unknown = set(mapping) - allowed
    if unknown:
        raise ScenarioError(f"{path}.{sorted(unknown)[0]}", "unknown key")


def _vehicle_state(raw, path: str) -> VehicleState:
    if not isinstance(raw, dict):
        raise ScenarioError(path, "expected a mapping with x, y, theta, v")
    _take(raw, {"x", "y", "theta", "v"}, path)
    try:
        return VehicleState(float(raw["x"]), float(raw["y"]),
                            float(raw["theta"]), float(raw["v"]))
    except KeyError as exc:
        raise ScenarioError(f"{path}.{exc.args[0]}", "missing") from exc


def from_dict(raw: dict) -> ScenarioConfig:
    """Build a validated ScenarioConfig from nested plain data.

    Every section is optional; anything omitted takes its default. Errors
    name the offending key path.
    """
    if not isinstance(raw, dict):
        raise ScenarioError("<root>", "scenario must be a mapping")
    top_keys = {f.name for f in fields(ScenarioConfig)}
    _take(raw, top_keys, "<root>")
    kwargs = {}

    if "initial_states" in raw:
        states = {}
        for vid, sub in raw["initial_states"].items():
            if vid not in VEHICLE_IDS:
                raise ScenarioError(f"initial_states.{vid}", "unknown vehicle")
            states[vid] = _vehicle_state(sub, f"initial_states.{vid}")
        merged = dict(DEFAULT_INITIAL_STATES)
        merged.update(states)
        kwargs["initial_states"] = merged

    for key in ("lane_width", "wheelbase", "v_min", "v_max", "v_d",
                "dt_sim"):
        if key in raw:
            kwargs[key] = float(raw[key])
    if "seed" in raw:
        kwargs["seed"] = int(raw["seed"])

    def build(key, cls, path):
        sub = raw.get(key)
        if sub is None:
            return
        if not isinstance(sub, dict):
            raise ScenarioError(path, "expected a mapping")
        allowed = {f.name for f in fields(cls)}
        _take(sub, allowed, path)
        coerced = {}
        for k, v in sub.items():
            coerced[k] = tuple(v) if isinstance(v, list) else v
        try:
            kwargs[key] = cls(**coerced)
        except (TypeError, ValueError) as exc:
            raise ScenarioError(path, str(exc)) from exc

    build("control_bounds", ControlBounds, "control_bounds")
    build("weights", QpWeights, "weights")
    build("hdv_policy", HdvPolicyConfig, "hdv_policy")

    for key in ("barrier", "clf"):
        if key in raw:
            base = dict(getattr(ScenarioConfig(), key))
            sub = raw[key]
            if not isinstance(sub, dict):
                raise ScenarioError(key, "expected a mapping")
            _take(sub, set(base), key)
            base.update({k: float(v) for k, v in sub.items()})
            kwargs[key] = base

    if "disturbance" in raw:
        sub = raw["disturbance"]
        _take(sub, {"sigma_range", "eps_ranges", "seed"}, "disturbance")
        try:
            kwargs["disturbance"] = DisturbanceConfig(
                sigma_range=tuple(sub.get("sigma_range",
                                          DisturbanceConfig().sigma_range)),
                eps_ranges=tuple(tuple(r) for r in
                                 sub.get("eps_ranges",
                                         DisturbanceConfig().eps_ranges)),
                seed=sub.get("seed"))
        except ValueError as exc:
            raise ScenarioError("disturbance", str(exc)) from exc

    if "controller" in raw:
        sub = raw["controller"]
        _take(sub, {"mode", "delta", "epsilon", "t_max", "hdv_known",
                    "grid_points", "bounds"}, "controller")
        bounds = ControllerConfig().bounds
        if "bounds" in sub:
            bsub = sub["bounds"]
            _take(bsub, {"w", "nu", "s"}, "controller.bounds")
            s_raw = bsub.get("s", BoundVectors().s)
            if isinstance(s_raw, dict):
                s_val = {vid: tuple(v) for vid, v in s_raw.items()}
            else:
                s_val = tuple(s_raw)
            try:
                bounds = BoundVectors(w=tuple(bsub.get("w", BoundVectors().w)),
                                      nu=tuple(bsub.get("nu",
                                                        BoundVectors().nu)),
                                      s=s_val)
            except ValueError as exc:
                raise ScenarioError("controller.bounds", str(exc)) from exc
        try:
            kwargs["controller"] = ControllerConfig(
                mode=sub.get("mode", MODE_EVENT),
                delta=float(sub.get("delta", 0.05)),
                epsilon=float(sub.get("epsilon", 0.3)),
                t_max=float(sub.get("t_max", 15.0)),
                hdv_known=bool(sub.get("hdv_known", False)),
                grid_points=int(sub.get("grid_points", 3)),
                bounds=bounds)
        except ValueError as exc:
            raise ScenarioError("controller", str(exc)) from exc

    try:
        return ScenarioConfig(**kwargs)
    except ValueError as exc:
        raise ScenarioError("<root>", str(exc)) from exc


def load_scenario(path) -> ScenarioConfig:
    """Parse and validate a YAML scenario file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ScenarioError("<file>", f"not valid YAML: {exc}") from exc
    return from_dict(raw or {})


def save_scenario(sc: ScenarioConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(to_dict(sc), fh, sort_keys=False)
