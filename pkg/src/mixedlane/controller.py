"""Control loops: time-driven baseline and event-driven robust variant.

A control step synchronizes the adaptive human-vehicle model, assembles the
constraint rows, and solves the QP. The event-driven mode solves twice: a
nominal pass to read the control signs, then a robust pass whose CBF rows
are worst-cased over the uncertainty box; the resulting controls stay valid
until a monitored quantity reaches its bound and the next event fires.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from . import qp
from .constraints import (IDX_PHI_1, IDX_PHI_C, IDX_U_1, IDX_U_C,
                          ConstraintRow, assemble_qp, cbf_row_pair, clf_rows,
                          limit_cbf_rows)
from .robust import (BoundVectors, UncertaintyBox, build_uncertainty_box,
                     robustify_rows)
from .vehicles import (NEUTRAL_DISTURBANCE, AdaptiveTerms, ControlInput,
                       ErrorVector, VehicleState, hdv_adaptive_derivative,
                       hdv_disturbed_derivative, measure_error,
                       synchronize_adaptive_model)

MODE_TIME = "time_driven"
MODE_EVENT = "event_driven"

EVENT_ERROR = "Event1_error"
EVENT_ERROR_RATE = "Event2_error_rate"
EVENT_STATE_DRIFT = "Event3_state_drift"
EVENT_PERIODIC = "periodic"
EVENT_FALLBACK = "infeasible_fallback"
EVENT_TERMINATION = "termination"
EVENT_ABORT = "abort"

COMPONENT_NAMES = ("x", "y", "theta", "v")
# Order in which simultaneous crossings are attributed.
_EVENT3_VEHICLES = ("1", "C", "U", "H")

CONTINUE = "continue"
COMPLETE = "complete"
ABORT = "abort"


@dataclass(frozen=True)
class ControllerConfig:
    mode: str = MODE_EVENT
    delta: float = 0.05
    bounds: BoundVectors = field(default_factory=BoundVectors)
    epsilon: float = 0.3
    t_max: float = 15.0
    hdv_known: bool = False
    grid_points: int = 3

    def __post_init__(self):
        if self.mode not in (MODE_TIME, MODE_EVENT):
            raise ValueError(f"unknown controller mode {self.mode!r}")
        if self.delta <= 0 or self.epsilon <= 0 or self.t_max <= 0:
            raise ValueError("delta, epsilon, t_max must be positive")


@dataclass
class EventRecord:
    """One control update, trigger, fallback, or terminal event."""

    time: float
    kind: str
    detail: dict
    controls: tuple  # (u_C, phi_C, u_1, phi_1) applied from this instant
    diag: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TriggerThresholds:
    """Anchors and bounds that the micro-step monitors compare against."""

    anchors: dict  # vehicle id -> VehicleState ("H" anchored at the estimate)
    bounds: BoundVectors


@dataclass(frozen=True)
class WorldSnapshot:
    """Measurements available to the controller at one instant."""

    t: float
    states: dict  # vehicle id -> VehicleState (true)
    est_hdv: VehicleState
    terms: AdaptiveTerms
    hdv_control: ControlInput
    hdv_rate: tuple  # sensed true state derivative of the human vehicle


@dataclass
class ControlStepResult:
    control_c: ControlInput
    control_1: ControlInput
    est_hdv: VehicleState
    terms: AdaptiveTerms
    record: EventRecord
    thresholds: TriggerThresholds
    infeasible: bool = False


@dataclass(frozen=True)
class TriggerHit:
    kind: str
    vehicle: str | None
    component: int
    value: float
    bound: float


def check_termination(y_c: float, t: float, lane_width: float,
                      config: ControllerConfig) -> str:
    """Maneuver status: complete inside the tolerance band, abort past the
    horizon, otherwise continue."""
    if abs(y_c - lane_width) <= config.epsilon:
        return COMPLETE
    if t >= config.t_max:
        return ABORT
    return CONTINUE


def detect_trigger(e: ErrorVector, e_dot: ErrorVector,
                   states: dict, est_hdv: VehicleState,
                   thresholds: TriggerThresholds) -> TriggerHit | None:
    """First monitor at or past its bound at this micro-step, if any.

    Evaluated every micro-step between control updates; ties break by event
    kind, then component order (x, y, theta, v), then vehicle order
    (1, C, U, H). The human vehicle's drift is monitored on the estimate.
    """
    w = thresholds.bounds.w
    for j in range(4):
        if abs(e[j]) >= w[j]:
            return TriggerHit(EVENT_ERROR, None, j, abs(e[j]), w[j])
    nu = thresholds.bounds.nu
    for j in range(4):
        if abs(e_dot[j]) >= nu[j]:
            return TriggerHit(EVENT_ERROR_RATE, None, j, abs(e_dot[j]), nu[j])
    for vid in _EVENT3_VEHICLES:
        anchor = thresholds.anchors[vid]
        current = est_hdv if vid == "H" else states[vid]
        s = thresholds.bounds.s[vid]
        for j in range(4):
            drift = abs(current[j] - anchor[j])
            if drift >= s[j]:
                return TriggerHit(EVENT_STATE_DRIFT, vid, j, drift, s[j])
    return None


def _signs(z) -> tuple:
    return tuple(z[i] >= 0 for i in (IDX_U_C, IDX_PHI_C, IDX_U_1, IDX_PHI_1))


def _min_cbf_margin(rows: list[ConstraintRow], z) -> float:
    margin = math.inf
    for row in rows:
        if row.kind != "cbf":
            continue
        val = row.c_f + sum(g * zi for g, zi in zip(row.c_g, z))
        margin = min(margin, val)
    return margin


def build_nominal_rows(snapshot: WorldSnapshot, scenario) -> list[ConstraintRow]:
    """All nominal rows at one instant: four pair rows, speed and lateral
    band rows for each controlled vehicle, and the four tracking rows."""
    sc = scenario
    states = snapshot.states
    bp = sc.barrier_params
    rows = []
    if sc.controller.hdv_known:
        rate = hdv_disturbed_derivative(states["H"], snapshot.hdv_control,
                                        NEUTRAL_DISTURBANCE, sc.wheelbase)
        h_rate = (rate[0], rate[1])
        zero = ErrorVector()
        rows.append(cbf_row_pair("CH", states["C"], states["H"], None, zero,
                                 zero, bp["CH"], other_rate=h_rate))
        rows.append(cbf_row_pair("1H", states["1"], states["H"], None, zero,
                                 zero, bp["1H"], other_rate=h_rate))
    else:
        e = measure_error(states["H"], snapshot.est_hdv)
        est_rate = hdv_adaptive_derivative(snapshot.est_hdv, snapshot.terms,
                                           sc.wheelbase)
        e_dot = ErrorVector(*(a - b for a, b in zip(snapshot.hdv_rate,
                                                    est_rate)))
        rows.append(cbf_row_pair("CH", states["C"], snapshot.est_hdv,
                                 snapshot.terms, e, e_dot, bp["CH"]))
        rows.append(cbf_row_pair("1H", states["1"], snapshot.est_hdv,
                                 snapshot.terms, e, e_dot, bp["1H"]))
    zero = ErrorVector()
    rows.append(cbf_row_pair("1C", states["1"], states["C"], None, zero, zero,
                             bp["1C"]))
    rows.append(cbf_row_pair("CU", states["C"], states["U"], None, zero, zero,
                             bp["CU"]))
    rows.extend(limit_cbf_rows(states, sc.v_min, sc.v_max, sc.lane_width,
                               sc.k_speed, sc.k_lateral))
    rows.extend(clf_rows(states, sc.clf_params))
    return rows


def control_step(snapshot: WorldSnapshot, scenario,
                 kind: str = EVENT_PERIODIC,
                 detail: dict | None = None) -> ControlStepResult:
    """Solve for the controls held from this instant until the next update.

    Event mode synchronizes the adaptive model first (so the state error is
    exactly zero afterwards), solves the nominal QP for the control signs,
    worst-cases the CBF rows over the uncertainty box, and solves the robust
    QP. Time mode synchronizes and solves the nominal QP only. Either QP
    reporting non-optimal drops to the maximum-braking fallback.
    """
    sc = scenario
    cfg: ControllerConfig = sc.controller
    detail = dict(detail or {})

    est = snapshot.est_hdv
    terms = snapshot.terms
    if not cfg.hdv_known:
        est_rate = hdv_adaptive_derivative(est, terms, sc.wheelbase)
        e_dot_pre = ErrorVector(*(a - b for a, b in zip(snapshot.hdv_rate,
                                                        est_rate)))
        terms, est = synchronize_adaptive_model(terms, [e_dot_pre],
                                                snapshot.states["H"])
        snapshot = WorldSnapshot(snapshot.t, snapshot.states, est, terms,
                                 snapshot.hdv_control, snapshot.hdv_rate)

    rows = build_nominal_rows(snapshot, sc)
    problem = assemble_qp(rows, sc.weights, sc.control_bounds)
    sol1 = qp.solve(problem)
    diag = {"qp_passes": 1, "iterations": sol1.iterations,
            "kkt_residual": sol1.kkt_residual,
            "solve_time": sol1.solve_time, "sign_oscillation": False}

    anchors = {vid: snapshot.states[vid] for vid in ("1", "C", "U")}
    anchors["H"] = est
    thresholds = TriggerThresholds(anchors=anchors, bounds=cfg.bounds)

    def fallback(stage: str, status: str) -> ControlStepResult:
        u_fb = ControlInput(sc.control_bounds.u_min, 0.0)
        detail["stage"] = stage
        detail["status"] = status
        rec = EventRecord(snapshot.t, EVENT_FALLBACK, detail,
                          (u_fb.u, u_fb.phi, u_fb.u, u_fb.phi), diag)
        return ControlStepResult(u_fb, u_fb, est, terms, rec, thresholds,
                                 infeasible=True)

    if sol1.status != qp.STATUS_OPTIMAL:
        return fallback("nominal", sol1.status)

    if cfg.mode == MODE_TIME:
        z = sol1.z
        rec = EventRecord(snapshot.t, kind, detail,
                          (z[IDX_U_C], z[IDX_PHI_C], z[IDX_U_1], z[IDX_PHI_1]),
                          diag)
        return ControlStepResult(ControlInput(z[IDX_U_C], z[IDX_PHI_C]),
                                 ControlInput(z[IDX_U_1], z[IDX_PHI_1]),
                                 est, terms, rec, thresholds)

    box = build_uncertainty_box(snapshot.states, est, cfg.bounds, snapshot.t)

    def solve_robust(signs):
        rrows = robustify_rows(rows, box, signs,
                               barrier_params=sc.barrier_params, terms=terms,
                               v_min=sc.v_min, v_max=sc.v_max,
                               lane_width=sc.lane_width, k_speed=sc.k_speed,
                               k_lateral=sc.k_lateral,
                               hdv_error_free=cfg.hdv_known,
                               grid_points=cfg.grid_points)
        return rrows, qp.solve(assemble_qp(rrows, sc.weights,
                                           sc.control_bounds))

    signs1 = sol1.z
    rrows2, sol2 = solve_robust(signs1)
    diag["qp_passes"] += 1
    diag["iterations"] += sol2.iterations
    diag["solve_time"] += sol2.solve_time
    if sol2.status != qp.STATUS_OPTIMAL:
        return fallback("robust", sol2.status)
    diag["kkt_residual"] = max(diag["kkt_residual"], sol2.kkt_residual)

    chosen = sol2
    if _signs(sol2.z) != _signs(signs1):
        rrows3, sol3 = solve_robust(sol2.z)
        diag["qp_passes"] += 1
        diag["iterations"] += sol3.iterations
        diag["solve_time"] += sol3.solve_time
        if sol3.status != qp.STATUS_OPTIMAL:
            return fallback("robust_resolve", sol3.status)
        diag["kkt_residual"] = max(diag["kkt_residual"], sol3.kkt_residual)
        if _signs(sol3.z) != _signs(sol2.z):
            # Sign fixed point not reached: keep whichever controls leave
            # the larger worst-case margin across both row sets.
            diag["sign_oscillation"] = True
            m2 = min(_min_cbf_margin(rrows2, sol2.z),
                     _min_cbf_margin(rrows3, sol2.z))
            m3 = min(_min_cbf_margin(rrows2, sol3.z),
                     _min_cbf_margin(rrows3, sol3.z))
            chosen = sol2 if m2 > m3 else sol3
        else:
            chosen = sol3

    z = chosen.z
    rec = EventRecord(snapshot.t, kind, detail,
                      (z[IDX_U_C], z[IDX_PHI_C], z[IDX_U_1], z[IDX_PHI_1]),
                      diag)
    return ControlStepResult(ControlInput(z[IDX_U_C], z[IDX_PHI_C]),
                             ControlInput(z[IDX_U_1], z[IDX_PHI_1]),
                             est, terms, rec, thresholds)
