"""World loop, scripted human-driver policies, trajectory logs, and metrics.

The world advances on a fixed 1 ms micro-step: at each step boundary it
samples the human policy and disturbances, reads the sensors, logs, checks
termination, and (in event mode) fires the trigger monitors; then it
integrates every vehicle over the step with all controls held. Runs are
bit-exactly reproducible from (config, seed), and a recorded control
timeline can be replayed through the same loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .constraints import barrier_value
from .controller import (ABORT, COMPLETE, EVENT_ABORT, EVENT_PERIODIC,
                         EVENT_TERMINATION, MODE_EVENT, EventRecord,
                         TriggerHit, WorldSnapshot, check_termination,
                         control_step, detect_trigger)
from .scenario import (HDV_PHI_LIMIT, HDV_U_LIMIT, HdvPolicyConfig,
                       ScenarioConfig)
from .vehicles import (AdaptiveTerms, ControlInput, ErrorVector, VehicleState,
                       cav_derivative, hdv_adaptive_derivative,
                       hdv_disturbed_derivative, integrate_step,
                       measure_error, sample_disturbance)

PAIR_IDS = ("CH", "1C", "1H", "CU")

LOG_COLUMNS = (
    ("t",)
    + tuple(f"{vid}_{c}" for vid in ("1", "C", "H", "U")
            for c in ("x", "y", "theta", "v"))
    + tuple(f"est_{c}" for c in ("x", "y", "theta", "v"))
    + tuple(f"e_{c}" for c in ("x", "y", "theta", "v"))
    + tuple(f"edot_{c}" for c in ("x", "y", "theta", "v"))
    + tuple(f"b_{p}" for p in PAIR_IDS)
    + ("u_C", "phi_C", "u_1", "phi_1", "u_H", "phi_H")
)
COL = {name: i for i, name in enumerate(LOG_COLUMNS)}
CONTROL_COLS = slice(COL["u_C"], COL["phi_H"] + 1)


@dataclass
class TrajectoryLog:
    """Self-contained record of one run (config + seed + per-step series)."""

    config: ScenarioConfig
    rows: list
    events: list
    outcome: str
    t_f: float
    degraded: bool

    def column(self, name: str) -> np.ndarray:
        i = COL[name]
        return np.array([r[i] for r in self.rows])


@dataclass
class Metrics:
    """Per-run summary in the shape of the reported study columns."""

    outcome: str
    t_f: float
    min_barrier: dict
    energy: float
    merge_side: str | None
    trigger_count: int
    qp_solves: int
    solve_time_mean: float
    solve_time_max: float
    kkt_max: float
    infeasible_count: int

    @property
    def min_barrier_overall(self) -> float:
        return min(self.min_barrier.values())

    def export_dict(self) -> dict:
        """Serializable form; wall-clock solve times are intentionally
        dropped so exported artifacts stay byte-reproducible."""
        return {
            "outcome": self.outcome,
            "t_f": self.t_f,
            "min_barrier": dict(self.min_barrier),
            "min_barrier_overall": self.min_barrier_overall,
            "energy": self.energy,
            "merge_side": self.merge_side,
            "trigger_count": self.trigger_count,
            "qp_solves": self.qp_solves,
            "kkt_max": self.kkt_max,
            "infeasible_count": self.infeasible_count,
        }


def lane_hold_phi(state: VehicleState, policy: HdvPolicyConfig,
                  lane_center: float) -> float:
    """Proportional steering that keeps a scripted driver in its lane."""
    raw = (-policy.lane_hold_y_gain * (state.y - lane_center)
           - policy.lane_hold_theta_gain * state.theta)
    return max(-policy.lane_hold_phi_max, min(policy.lane_hold_phi_max, raw))


class HdvDriver:
    """Stateful scripted human driver; one instance per run."""

    def __init__(self, policy: HdvPolicyConfig, scenario: ScenarioConfig):
        self.policy = policy
        self.sc = scenario
        self.lane_center = scenario.lane_width
        self.held = ControlInput(0.0, 0.0)
        self.phi_current = 0.0
        self.yielding = False
        self.hesitant_sign = 1.0
        self.next_switch = None

    def sample(self, states: dict, ydot_c: float, t: float, tick: bool,
               rng, dt: float = 0.0) -> ControlInput:
        p = self.policy
        kind = p.kind
        h = states["H"]
        if kind == "random":
            if tick:
                if p.random_lane_hold:
                    phi = (lane_hold_phi(h, p, self.lane_center)
                           + rng.uniform(-p.phi_noise, p.phi_noise))
                    phi = max(p.phi_range[0], min(p.phi_range[1], phi))
                else:
                    phi = rng.uniform(*p.phi_range)
                self.held = ControlInput(rng.uniform(*p.u_range), phi)
            if p.random_lane_hold:
                # Steering tracks the drawn target at a bounded slew rate.
                step = p.phi_slew * dt
                delta = self.held.phi - self.phi_current
                if delta > step:
                    delta = step
                elif delta < -step:
                    delta = -step
                self.phi_current += delta
                return ControlInput(self.held.u, self.phi_current)
            return self.held
        if kind == "aggressive":
            u = p.aggressive_u if h.v < self.sc.v_max else 0.0
            return ControlInput(u, lane_hold_phi(h, p, self.lane_center))
        if kind == "conservative":
            c = states["C"]
            if (not self.yielding and ydot_c > p.conservative_lat_rate
                    and abs(c.x - h.x) < p.conservative_gap):
                self.yielding = True
            if self.yielding and c.x > h.x:
                self.yielding = False
            u = p.conservative_decel if (self.yielding and h.v > 0) else 0.0
            return ControlInput(u, lane_hold_phi(h, p, self.lane_center))
        if kind == "hesitant":
            if self.next_switch is None or t >= self.next_switch:
                if self.next_switch is not None:
                    self.hesitant_sign = -self.hesitant_sign
                self.next_switch = t + rng.uniform(*p.hesitant_dwell)
            u = self.hesitant_sign * p.hesitant_u
            if h.v <= 0 and u < 0:
                u = 0.0
            if h.v >= self.sc.v_max and u > 0:
                u = 0.0
            return ControlInput(u, lane_hold_phi(h, p, self.lane_center))
        raise ValueError(f"policy kind {kind!r} cannot be sampled")


def hdv_policy_sample(policy: HdvPolicyConfig, states: dict, ydot_c: float,
                      t: float, rng, driver: HdvDriver | None = None,
                      scenario: ScenarioConfig | None = None) -> ControlInput:
    """One policy draw; stateless entry over a throwaway driver unless an
    existing driver (carrying archetype state) is supplied."""
    if driver is None:
        driver = HdvDriver(policy, scenario or ScenarioConfig())
    return driver.sample(states, ydot_c, t, True, rng)


def clamp_hdv_control(ctrl: ControlInput) -> ControlInput:
    """Physical actuation limits of the human vehicle."""
    u = max(-HDV_U_LIMIT, min(HDV_U_LIMIT, ctrl.u))
    phi = max(-HDV_PHI_LIMIT, min(HDV_PHI_LIMIT, ctrl.phi))
    return ControlInput(u, phi)


def _clamp_speed(state: VehicleState) -> VehicleState:
    if state.v >= 0.0:
        return state
    return VehicleState(state.x, state.y, state.theta, 0.0)


class World:
    """Single mutable simulation state; one instance per run."""

    def __init__(self, scenario: ScenarioConfig,
                 policy: HdvPolicyConfig | None = None,
                 replay_controls: list | None = None,
                 external_control: Callable[[int], ControlInput] | None = None):
        self.sc = scenario
        self.policy = policy or scenario.hdv_policy
        self.replay_controls = replay_controls
        self.external_control = external_control
        if self.policy.kind == "external" and external_control is None \
                and replay_controls is None:
            raise ValueError("external policy needs a control source")

        ss = np.random.SeedSequence(scenario.seed)
        dist_child, policy_child = ss.spawn(2)
        if scenario.disturbance.seed is not None:
            self.dist_rng = np.random.default_rng(scenario.disturbance.seed)
        else:
            self.dist_rng = np.random.default_rng(dist_child)
        self.policy_rng = np.random.default_rng(policy_child)

        self.states = dict(scenario.initial_states)
        self.est = scenario.initial_states["H"]
        self.terms = AdaptiveTerms()
        self.t = 0.0
        self.step = 0
        self.control_c = ControlInput(0.0, 0.0)
        self.control_1 = ControlInput(0.0, 0.0)
        self.hdv_control = ControlInput(0.0, 0.0)
        self.driver = HdvDriver(self.policy, scenario)
        self.thresholds = None
        self.prev_monitor = None
        self.dist = None
        self.hdv_rate = (0.0, 0.0, 0.0, 0.0)
        self.e = ErrorVector()
        self.e_dot = ErrorVector()

        self.rows: list = []
        self.events: list = []
        self.outcome: str | None = None
        self.t_f: float | None = None
        self.degraded = False

        self.policy_period = max(1, round(scenario.controller.delta
                                          / scenario.dt_sim))
        self.control_period = self.policy_period

    # ------------------------------------------------------------------
    def _snapshot(self) -> WorldSnapshot:
        return WorldSnapshot(self.t, dict(self.states), self.est, self.terms,
                             self.hdv_control, self.hdv_rate)

    def _ydot_c(self) -> float:
        c = self.states["C"]
        return (c.v * math.sin(c.theta)
                + c.v * math.cos(c.theta) * self.control_c.phi)

    def _log_row(self):
        s1 = self.states["1"]
        sc_ = self.states["C"]
        sh = self.states["H"]
        su = self.states["U"]
        bp = self.sc.barrier_params
        self.rows.append(
            (self.t,) + tuple(s1) + tuple(sc_) + tuple(sh) + tuple(su)
            + tuple(self.est) + tuple(self.e) + tuple(self.e_dot)
            + (barrier_value("CH", sc_, sh, bp["CH"]),
               barrier_value("1C", s1, sc_, bp["1C"]),
               barrier_value("1H", s1, sh, bp["1H"]),
               barrier_value("CU", sc_, su, bp["CU"]),
               self.control_c.u, self.control_c.phi,
               self.control_1.u, self.control_1.phi,
               self.hdv_control.u, self.hdv_control.phi))

    def _solve(self, kind: str, detail: dict):
        result = control_step(self._snapshot(), self.sc, kind, detail)
        self.control_c = result.control_c
        self.control_1 = result.control_1
        self.est = result.est_hdv
        self.terms = result.terms
        self.thresholds = result.thresholds
        self.events.append(result.record)
        if result.infeasible:
            self.degraded = True
        # Refresh the logged control and error-rate columns: a policy redraw
        # or synchronization at this boundary supersedes the pre-update row.
        row = list(self.rows[-1])
        row[CONTROL_COLS] = (self.control_c.u, self.control_c.phi,
                             self.control_1.u, self.control_1.phi,
                             self.hdv_control.u, self.hdv_control.phi)
        row[COL["edot_x"]:COL["edot_v"] + 1] = tuple(self.e_dot)
        self.rows[-1] = tuple(row)

    def _prev_magnitude(self, hit: TriggerHit) -> float:
        if self.prev_monitor is None:
            return 0.0
        e_prev, edot_prev, states_prev, est_prev = self.prev_monitor
        if hit.kind == "Event1_error":
            return abs(e_prev[hit.component])
        if hit.kind == "Event2_error_rate":
            return abs(edot_prev[hit.component])
        anchor = self.thresholds.anchors[hit.vehicle]
        prev_state = est_prev if hit.vehicle == "H" else states_prev[hit.vehicle]
        return abs(prev_state[hit.component] - anchor[hit.component])

    def _sense(self):
        sc = self.sc
        self.hdv_rate = hdv_disturbed_derivative(
            self.states["H"], self.hdv_control, self.dist, sc.wheelbase)
        est_rate = hdv_adaptive_derivative(self.est, self.terms, sc.wheelbase)
        self.e = measure_error(self.states["H"], self.est)
        self.e_dot = ErrorVector(*(a - b for a, b in
                                   zip(self.hdv_rate, est_rate)))

    def boundary(self) -> bool:
        """Process the instant t: sense, log, terminate or update control.

        Returns False when the run has ended. The random human policy
        redraws exactly at control-update instants (ticks in time mode,
        trigger instants in event mode); scripted archetypes act at every
        boundary, since they model a continuously reacting driver.
        """
        sc = self.sc

        if self.replay_controls is not None:
            row = self.replay_controls[min(self.step,
                                           len(self.replay_controls) - 1)]
            self.control_c = ControlInput(row[0], row[1])
            self.control_1 = ControlInput(row[2], row[3])
            self.hdv_control = ControlInput(row[4], row[5])
        elif self.external_control is not None:
            self.hdv_control = clamp_hdv_control(
                self.external_control(self.step))
        else:
            ctrl = self.driver.sample(self.states, self._ydot_c(), self.t,
                                      False, self.policy_rng, sc.dt_sim)
            self.hdv_control = clamp_hdv_control(ctrl)

        self.dist = sample_disturbance(sc.disturbance, self.dist_rng)
        self._sense()
        self._log_row()

        status = check_termination(self.states["C"].y, self.t, sc.lane_width,
                                   sc.controller)
        if status == COMPLETE:
            self.outcome = "complete"
            self.t_f = self.t
            self.events.append(EventRecord(
                self.t, EVENT_TERMINATION, {"y_c": self.states["C"].y},
                (self.control_c.u, self.control_c.phi,
                 self.control_1.u, self.control_1.phi)))
            return False
        if status == ABORT:
            self.outcome = "abort"
            self.t_f = self.t
            self.events.append(EventRecord(
                self.t, EVENT_ABORT, {"y_c": self.states["C"].y},
                (self.control_c.u, self.control_c.phi,
                 self.control_1.u, self.control_1.phi)))
            return False

        if self.replay_controls is None:
            kind = None
            detail: dict = {}
            if sc.controller.mode == MODE_EVENT:
                if self.thresholds is None:
                    kind = EVENT_PERIODIC
                    detail = {"initial": True}
                else:
                    hit = detect_trigger(self.e, self.e_dot, self.states,
                                         self.est, self.thresholds)
                    if hit is not None:
                        kind = hit.kind
                        detail = {"vehicle": hit.vehicle,
                                  "component": ("x", "y", "theta", "v")[hit.component],
                                  "value": hit.value, "bound": hit.bound,
                                  "prev": self._prev_magnitude(hit)}
            elif self.step % self.control_period == 0:
                kind = EVENT_PERIODIC
            if kind is not None:
                if self.policy.kind == "random" \
                        and self.external_control is None:
                    ctrl = self.driver.sample(self.states, self._ydot_c(),
                                              self.t, True, self.policy_rng,
                                              0.0)
                    self.hdv_control = clamp_hdv_control(ctrl)
                    self._sense()  # rows must see the redrawn control
                self._solve(kind, detail)

        self.prev_monitor = (self.e, self.e_dot, dict(self.states), self.est)
        return True

    def advance(self):
        """Integrate one micro-step with every control held."""
        sc = self.sc
        dt = sc.dt_sim
        lw = sc.wheelbase
        ctrl_c = self.control_c
        ctrl_1 = self.control_1
        ctrl_h = self.hdv_control
        dist = self.dist
        self.states["C"] = _clamp_speed(integrate_step(
            self.states["C"], lambda s: cav_derivative(s, ctrl_c, lw), dt))
        self.states["1"] = _clamp_speed(integrate_step(
            self.states["1"], lambda s: cav_derivative(s, ctrl_1, lw), dt))
        self.states["H"] = _clamp_speed(integrate_step(
            self.states["H"],
            lambda s: hdv_disturbed_derivative(s, ctrl_h, dist, lw), dt))
        self.states["U"] = _clamp_speed(integrate_step(
            self.states["U"],
            lambda s: (s.v * math.cos(s.theta), s.v * math.sin(s.theta),
                       0.0, 0.0), dt))
        self.est = _clamp_speed(integrate_step(
            self.est, lambda s: hdv_adaptive_derivative(s, self.terms, lw),
            dt))
        self.step += 1
        self.t = self.step * dt

    def finish(self) -> TrajectoryLog:
        if self.outcome is None:
            raise RuntimeError("run has not terminated")
        return TrajectoryLog(config=self.sc, rows=self.rows,
                             events=self.events, outcome=self.outcome,
                             t_f=self.t_f, degraded=self.degraded)


def run_scenario(config: ScenarioConfig,
                 policy: HdvPolicyConfig | None = None) -> TrajectoryLog:
    """Run one maneuver to completion or abort and return the full log."""
    world = World(config, policy)
    while world.boundary():
        world.advance()
    return world.finish()


def run_replay(config: ScenarioConfig, control_rows: list) -> TrajectoryLog:
    """Re-integrate a run from its recorded per-step control timeline.

    With the same config and seed the disturbance stream regenerates
    identically, so the produced trajectory matches the original log
    bit-exactly.
    """
    world = World(config, replay_controls=control_rows)
    while world.boundary():
        world.advance()
    return world.finish()


def compute_metrics(log: TrajectoryLog) -> Metrics:
    """Fold a trajectory log into the study-style per-run summary."""
    dt = log.config.dt_sim
    rows = log.rows
    min_barrier = {}
    for pair in PAIR_IDS:
        i = COL[f"b_{pair}"]
        min_barrier[pair] = min(r[i] for r in rows)
    iu = COL["u_C"]
    energy = sum(r[iu] * r[iu] for r in rows[:-1]) * dt if len(rows) > 1 else 0.0

    merge_side = None
    if log.outcome == "complete":
        final = rows[-1]
        merge_side = "A-HDV" if final[COL["C_x"]] > final[COL["H_x"]] \
            else "B-HDV"

    trigger_kinds = ("Event1_error", "Event2_error_rate", "Event3_state_drift")
    trigger_count = sum(1 for ev in log.events if ev.kind in trigger_kinds)
    solves = [ev for ev in log.events if ev.diag]
    qp_solves = sum(ev.diag.get("qp_passes", 0) for ev in solves)
    times = [ev.diag["solve_time"] for ev in solves if "solve_time" in ev.diag]
    kkts = [ev.diag["kkt_residual"] for ev in solves
            if "kkt_residual" in ev.diag and math.isfinite(ev.diag["kkt_residual"])]
    infeasible = sum(1 for ev in log.events
                     if ev.kind == "infeasible_fallback")
    return Metrics(outcome=log.outcome, t_f=log.t_f, min_barrier=min_barrier,
                   energy=energy, merge_side=merge_side,
                   trigger_count=trigger_count, qp_solves=qp_solves,
                   solve_time_mean=(sum(times) / len(times)) if times else 0.0,
                   solve_time_max=max(times) if times else 0.0,
                   kkt_max=max(kkts) if kkts else 0.0,
                   infeasible_count=infeasible)
