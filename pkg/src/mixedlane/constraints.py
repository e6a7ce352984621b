"""Barrier/Lyapunov row construction and assembly of the controller QP.

Every hard constraint (pairwise ellipsoidal safety, speed band, lateral
band) becomes an affine-in-control CBF row  c_f + c_g.z >= 0; each soft
tracking objective becomes a CLF row  c_f + c_g.z <= 0 whose slack variable
appears in c_g with coefficient -1. The shared decision vector is

    z = [u_C, phi_C, u_1, phi_1, delta_1..delta_4]
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .qp import QpProblem
from .vehicles import AdaptiveTerms, ErrorVector, VehicleState

DECISION_DIM = 8
IDX_U_C, IDX_PHI_C, IDX_U_1, IDX_PHI_1 = 0, 1, 2, 3
IDX_DELTA = (4, 5, 6, 7)

# (ego, other) per pair id; the ego's speed scales the safety ellipse.
PAIR_VEHICLES = {"CH": ("C", "H"), "1C": ("1", "C"),
                 "1H": ("1", "H"), "CU": ("C", "U")}

ZERO_ERROR = ErrorVector()
ZERO_TERMS = AdaptiveTerms()


@dataclass(frozen=True)
class BarrierParams:
    """Ellipse axis weights [s] and the linear class-K gain [1/s] of one ego."""

    a: float = 0.6
    b: float = 0.1
    k: float = 1.0

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0 or self.k <= 0:
            raise ValueError("barrier parameters must be positive")


@dataclass(frozen=True)
class ClfParams:
    """Exponential tracking rates, desired speed, and target-lane center."""

    m1: float = 1.0
    m2: float = 1.0
    m3: float = 1.0
    m4: float = 1.0
    v_d: float = 30.0
    lane_width: float = 4.0

    def __post_init__(self):
        if min(self.m1, self.m2, self.m3, self.m4) <= 0:
            raise ValueError("CLF rates must be positive")


@dataclass(frozen=True)
class QpWeights:
    """Control-effort weights and slack penalties of the QP objective."""

    alpha_u_c: float = 1.0
    alpha_u_1: float = 1.0
    p1: float = 1.0
    p2: float = 1.0
    p3: float = 100.0
    p4: float = 1.0

    def __post_init__(self):
        if min(self.alpha_u_c, self.alpha_u_1,
               self.p1, self.p2, self.p3, self.p4) < 0:
            raise ValueError("QP weights must be non-negative")


@dataclass(frozen=True)
class ControlBounds:
    u_min: float = -7.0
    u_max: float = 3.3
    phi_min: float = -math.pi / 4
    phi_max: float = math.pi / 4


class ConstraintRow(NamedTuple):
    """One affine row over the decision vector.

    kind "cbf": c_f + c_g.z >= 0 (hard); kind "clf": c_f + c_g.z <= 0
    (soft, the slack coefficient lives inside c_g). ``tag`` records which
    constraint produced the row, e.g. "pair:CH" or "vmax:1".
    """

    kind: str
    c_f: float
    c_g: tuple
    tag: str


def barrier_value(pair: str, ego: VehicleState, other: VehicleState,
                  params: BarrierParams) -> float:
    """Polynomial ellipsoidal margin dx^2/a^2 + dy^2/b^2 - v_ego^2.

    Positive means the other vehicle's center lies outside the ego's
    speed-scaled safe ellipse. The polynomial form stays smooth at v = 0.
    """
    dx = ego.x - other.x
    dy = ego.y - other.y
    return dx * dx / (params.a * params.a) + dy * dy / (params.b * params.b) \
        - ego.v * ego.v


def cbf_row_pair(pair: str, ego: VehicleState, other_est: VehicleState,
                 terms: AdaptiveTerms | None, e: ErrorVector,
                 e_dot: ErrorVector, params: BarrierParams,
                 other_rate: tuple[float, float] | None = None) -> ConstraintRow:
    """CBF row for one vehicle pair.

    For pairs against the human vehicle the other state is the adaptive
    estimate and the measured error/error-rate enter the row; pass
    ``other_rate`` to override the other vehicle's planar drift when its
    motion is known (the slow obstacle, or a run with the human model
    known). For pair "1C" both vehicles are controlled and the row carries
    coefficients in both vehicles' control slots.
    """
    if pair not in PAIR_VEHICLES:
        raise ValueError(f"unknown pair {pair!r}")
    a2 = params.a * params.a
    b2 = params.b * params.b
    dx = ego.x - other_est.x - e.e_x
    dy = ego.y - other_est.y - e.e_y
    ve = ego.v
    ct = math.cos(ego.theta)
    st = math.sin(ego.theta)

    if other_rate is not None:
        rx, ry = other_rate
    elif pair == "1C":
        rx = other_est.v * math.cos(other_est.theta)
        ry = other_est.v * math.sin(other_est.theta)
    elif pair == "CU":
        rx = other_est.v * math.cos(other_est.theta)
        ry = other_est.v * math.sin(other_est.theta)
    else:
        t = terms if terms is not None else ZERO_TERMS
        co = math.cos(other_est.theta)
        so = math.sin(other_est.theta)
        rx = other_est.v * co + t.h_x + e_dot.e_x
        ry = other_est.v * so + t.h_y + e_dot.e_y

    bval = dx * dx / a2 + dy * dy / b2 - ve * ve
    lf = 2.0 * dx / a2 * (ve * ct - rx) + 2.0 * dy / b2 * (ve * st - ry)
    c_f = lf + params.k * bval

    c_g = [0.0] * DECISION_DIM
    ego_u, ego_phi = (IDX_U_C, IDX_PHI_C) if PAIR_VEHICLES[pair][0] == "C" \
        else (IDX_U_1, IDX_PHI_1)
    c_g[ego_u] = -2.0 * ve
    c_g[ego_phi] = 2.0 * ve * (-dx / a2 * st + dy / b2 * ct)
    if pair == "1C":
        # The other vehicle is controlled too: its steering moves the gap.
        co = math.cos(other_est.theta)
        so = math.sin(other_est.theta)
        c_g[IDX_PHI_C] = 2.0 * other_est.v * (dx / a2 * so - dy / b2 * co)
    return ConstraintRow("cbf", c_f, tuple(c_g), f"pair:{pair}")


def limit_cbf_rows(states: dict[str, VehicleState], v_min: float, v_max: float,
                   lane_width: float, k_speed: float = 1.0,
                   k_lateral: float = 1.0) -> list[ConstraintRow]:
    """Speed-band and lateral-band CBF rows for both controlled vehicles."""
    if v_min >= v_max:
        raise ValueError("need v_min < v_max")
    rows = []
    half = lane_width / 2.0
    upper = 1.5 * lane_width
    for vid, (iu, iphi) in (("C", (IDX_U_C, IDX_PHI_C)),
                            ("1", (IDX_U_1, IDX_PHI_1))):
        s = states[vid]
        ydot_drift = s.v * math.sin(s.theta)
        ydot_phi = s.v * math.cos(s.theta)

        c_g = [0.0] * DECISION_DIM
        c_g[iu] = 1.0
        rows.append(ConstraintRow("cbf", k_speed * (s.v - v_min),
                                  tuple(c_g), f"vmin:{vid}"))
        c_g = [0.0] * DECISION_DIM
        c_g[iu] = -1.0
        rows.append(ConstraintRow("cbf", k_speed * (v_max - s.v),
                                  tuple(c_g), f"vmax:{vid}"))
        c_g = [0.0] * DECISION_DIM
        c_g[iphi] = ydot_phi
        rows.append(ConstraintRow("cbf", ydot_drift + k_lateral * (s.y + half),
                                  tuple(c_g), f"ylow:{vid}"))
        c_g = [0.0] * DECISION_DIM
        c_g[iphi] = -ydot_phi
        rows.append(ConstraintRow("cbf", -ydot_drift + k_lateral * (upper - s.y),
                                  tuple(c_g), f"yhigh:{vid}"))
    return rows


def clf_rows(states: dict[str, VehicleState],
             params: ClfParams) -> list[ConstraintRow]:
    """Soft tracking rows: speed toward v_d and lateral position toward the
    fast-lane center, one slack variable each."""
    rows = []
    specs = (("C", IDX_U_C, IDX_PHI_C, params.m1, params.m3, IDX_DELTA[0], IDX_DELTA[2]),
             ("1", IDX_U_1, IDX_PHI_1, params.m2, params.m4, IDX_DELTA[1], IDX_DELTA[3]))
    for vid, iu, iphi, m_speed, m_lat, d_speed, d_lat in specs:
        s = states[vid]
        dv = s.v - params.v_d
        c_g = [0.0] * DECISION_DIM
        c_g[iu] = 2.0 * dv
        c_g[d_speed] = -1.0
        rows.append(ConstraintRow("clf", m_speed * dv * dv,
                                  tuple(c_g), f"clf_v:{vid}"))

        ey = s.y - params.lane_width
        c_g = [0.0] * DECISION_DIM
        c_g[iphi] = 2.0 * ey * s.v * math.cos(s.theta)
        c_g[d_lat] = -1.0
        rows.append(ConstraintRow("clf",
                                  2.0 * ey * s.v * math.sin(s.theta)
                                  + m_lat * ey * ey,
                                  tuple(c_g), f"clf_y:{vid}"))
    return rows


_objective_cache: dict = {}
_bounds_cache: dict = {}


def assemble_qp(rows: list[ConstraintRow], weights: QpWeights,
                control_bounds: ControlBounds) -> QpProblem:
    """Build the QP over [u_C, phi_C, u_1, phi_1, delta_1..4].

    Objective: control effort per vehicle plus quadratic slack penalties,
    all constraint rows rewritten into A z <= b, control box bounds applied,
    slacks bounded below at zero.
    """
    cached = _objective_cache.get(weights)
    if cached is None:
        cached = np.diag([2.0 * weights.alpha_u_c, 2.0 * weights.alpha_u_c,
                          2.0 * weights.alpha_u_1, 2.0 * weights.alpha_u_1,
                          2.0 * weights.p1, 2.0 * weights.p2,
                          2.0 * weights.p3, 2.0 * weights.p4])
        _objective_cache[weights] = cached
    H = cached
    f = np.zeros(DECISION_DIM)

    m = len(rows)
    A = np.empty((m, DECISION_DIM))
    b = np.empty(m)
    for i, row in enumerate(rows):
        if len(row.c_g) != DECISION_DIM:
            raise ValueError(f"row {row.tag!r} has width {len(row.c_g)}")
        if row.kind == "cbf":
            A[i] = row.c_g
            A[i] *= -1.0
            b[i] = row.c_f
        elif row.kind == "clf":
            A[i] = row.c_g
            b[i] = -row.c_f
        else:
            raise ValueError(f"unknown row kind {row.kind!r}")

    cached_b = _bounds_cache.get(control_bounds)
    if cached_b is None:
        cb = control_bounds
        cached_b = (np.array([cb.u_min, cb.phi_min, cb.u_min, cb.phi_min,
                              0.0, 0.0, 0.0, 0.0]),
                    np.array([cb.u_max, cb.phi_max, cb.u_max, cb.phi_max,
                              np.inf, np.inf, np.inf, np.inf]))
        _bounds_cache[control_bounds] = cached_b
    return QpProblem(H=H, f=f, A=A, b=b, lb=cached_b[0], ub=cached_b[1])
