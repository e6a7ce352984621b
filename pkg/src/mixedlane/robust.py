"""Worst-casing of CBF rows over the inter-event uncertainty region.

Between control updates the world drifts inside a box: each vehicle's state
within +/- s of its anchor, the estimation error within +/- w, and the error
rate within +/- nu. A control held over that interval keeps a CBF row
nonnegative if it does so against the row's worst case over the box, so the
event-driven QP replaces each row's drift term by its minimum and each
control coefficient by its sign-dependent extreme.

The minima are certified lower bounds computed analytically: dimensions
that enter the objective linearly or concavely collapse to interval
endpoints (exact); each heading interval is split into grid sub-intervals
whose (cos, sin) arcs are enclosed in boxes (sound relaxation, tight for
the small drift bounds used here); and the two aggregate position gaps, in
which the objective is convex-quadratic, are minimized in closed form.
Conservative is the safe direction: a lower value only tightens the
constraint, and on a degenerate point box everything collapses to the
nominal row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .constraints import (DECISION_DIM, IDX_PHI_1, IDX_PHI_C, IDX_U_1,
                          IDX_U_C, PAIR_VEHICLES, BarrierParams,
                          ConstraintRow)
from .vehicles import AdaptiveTerms, VehicleState

VEHICLE_IDS = ("1", "C", "H", "U")
DEFAULT_GRID_POINTS = 3

DEFAULT_W = (0.2, 0.1, 0.1, 1.0)
DEFAULT_NU = (0.5, 0.2, 0.1, 1.0)
DEFAULT_S = (0.01, 0.005, 0.01, 1.0)

_ZERO_TERMS = AdaptiveTerms()


def _check_nonneg(name, vec):
    if len(vec) != 4:
        raise ValueError(f"{name} must have four components")
    if min(vec) < 0:
        raise ValueError(f"{name} components must be non-negative")
    return tuple(float(v) for v in vec)


@dataclass(frozen=True)
class BoundVectors:
    """Error bound w, error-rate bound nu, and per-vehicle state-drift bounds."""

    w: tuple = DEFAULT_W
    nu: tuple = DEFAULT_NU
    s: dict | tuple = DEFAULT_S

    def __post_init__(self):
        object.__setattr__(self, "w", _check_nonneg("w", self.w))
        object.__setattr__(self, "nu", _check_nonneg("nu", self.nu))
        if isinstance(self.s, dict):
            s = {vid: _check_nonneg(f"s[{vid}]", vec)
                 for vid, vec in self.s.items()}
            missing = set(VEHICLE_IDS) - set(s)
            if missing:
                raise ValueError(f"s missing vehicles {sorted(missing)}")
        else:
            vec = _check_nonneg("s", self.s)
            s = {vid: vec for vid in VEHICLE_IDS}
        object.__setattr__(self, "s", s)

    @classmethod
    def zero(cls) -> "BoundVectors":
        """Degenerate point box; collapses the robust QP onto the nominal one."""
        z = (0.0, 0.0, 0.0, 0.0)
        return cls(w=z, nu=z, s=z)


@dataclass(frozen=True)
class UncertaintyBox:
    """Per-vehicle state intervals plus error and error-rate boxes at t_k.

    The human vehicle's interval is anchored at the *estimated* state; the
    others at their measured true states.
    """

    t_k: float
    lo: dict
    hi: dict
    e_lo: tuple
    e_hi: tuple
    edot_lo: tuple
    edot_hi: tuple

    def interval(self, vid: str, component: int) -> tuple[float, float]:
        return self.lo[vid][component], self.hi[vid][component]


def build_uncertainty_box(states_at_tk: dict[str, VehicleState],
                          est_hdv: VehicleState,
                          bounds: BoundVectors,
                          t_k: float = 0.0) -> UncertaintyBox:
    """Box of states/errors reachable before the next trigger fires."""
    lo = {}
    hi = {}
    for vid in VEHICLE_IDS:
        anchor = est_hdv if vid == "H" else states_at_tk[vid]
        s = bounds.s[vid]
        lo[vid] = (anchor[0] - s[0], anchor[1] - s[1],
                   anchor[2] - s[2], anchor[3] - s[3])
        hi[vid] = (anchor[0] + s[0], anchor[1] + s[1],
                   anchor[2] + s[2], anchor[3] + s[3])
    w = bounds.w
    nu = bounds.nu
    return UncertaintyBox(t_k=t_k, lo=lo, hi=hi,
                          e_lo=(-w[0], -w[1], -w[2], -w[3]), e_hi=w,
                          edot_lo=(-nu[0], -nu[1], -nu[2], -nu[3]),
                          edot_hi=nu)


def _range_cos(lo: float, hi: float) -> tuple[float, float]:
    """Exact range of cos over [lo, hi]."""
    c1 = math.cos(lo)
    c2 = math.cos(hi)
    cmin = c1 if c1 < c2 else c2
    cmax = c1 if c1 > c2 else c2
    k0 = math.ceil(lo / math.pi)
    k1 = math.floor(hi / math.pi)
    for k in range(k0, k1 + 1):
        v = 1.0 if k % 2 == 0 else -1.0
        cmin = min(cmin, v)
        cmax = max(cmax, v)
    return cmin, cmax


def _range_sin(lo: float, hi: float) -> tuple[float, float]:
    """Exact range of sin over [lo, hi]."""
    s1 = math.sin(lo)
    s2 = math.sin(hi)
    smin = s1 if s1 < s2 else s2
    smax = s1 if s1 > s2 else s2
    k0 = math.ceil((lo - math.pi / 2) / math.pi)
    k1 = math.floor((hi - math.pi / 2) / math.pi)
    for k in range(k0, k1 + 1):
        v = 1.0 if k % 2 == 0 else -1.0
        smin = min(smin, v)
        smax = max(smax, v)
    return smin, smax


def _trig_boxes(lo: float, hi: float, grid_points: int) -> list:
    """(cos, sin) range boxes enclosing the heading arc, one per piece.

    The interval is split into grid_points - 1 pieces; each piece's box is
    a superset of its sub-arc, so minimizing over the boxes lower-bounds
    minimizing over the arc.
    """
    if hi <= lo:
        c = math.cos(lo)
        s = math.sin(lo)
        return [(c, c, s, s)]
    pieces = max(1, grid_points - 1)
    step = (hi - lo) / pieces
    out = []
    a = lo
    for i in range(1, pieces + 1):
        b = hi if i == pieces else lo + i * step
        out.append(_range_cos(a, b) + _range_sin(a, b))
        a = b
    return out


def _mul_range(alo, ahi, blo, bhi):
    p1 = alo * blo
    p2 = alo * bhi
    p3 = ahi * blo
    p4 = ahi * bhi
    return (min(p1, p2, p3, p4), max(p1, p2, p3, p4))


def _pblock(r, lo, hi, axis2, k):
    """Exact min over p in [lo, hi] of (2*p*r + k*p^2)/axis2 (convex in p)."""
    p = -r / k
    if p < lo:
        p = lo
    elif p > hi:
        p = hi
    return (2.0 * p * r + k * p * p) / axis2


def _pair_geometry(pair: str, box: UncertaintyBox,
                   terms: AdaptiveTerms | None,
                   include_error: bool | None = None):
    """Interval data shared by the L_f and L_g enumerations of one pair.

    Returns the ego/other ids, the aggregate position-gap intervals, and
    the other vehicle's planar drift-rate intervals (adaptive terms and
    error-rate box folded in for human pairs).
    """
    ego_id, other_id = PAIR_VEHICLES[pair]
    if include_error is None:
        include_error = other_id == "H"
    if include_error:
        ex_lo, ex_hi = box.e_lo[0], box.e_hi[0]
        ey_lo, ey_hi = box.e_lo[1], box.e_hi[1]
        edx_lo, edx_hi = box.edot_lo[0], box.edot_hi[0]
        edy_lo, edy_hi = box.edot_lo[1], box.edot_hi[1]
    else:
        ex_lo = ex_hi = ey_lo = ey_hi = 0.0
        edx_lo = edx_hi = edy_lo = edy_hi = 0.0
    h = terms if (terms is not None and other_id == "H") else _ZERO_TERMS

    p_lo = box.lo[ego_id][0] - box.hi[other_id][0] - ex_hi
    p_hi = box.hi[ego_id][0] - box.lo[other_id][0] - ex_lo
    q_lo = box.lo[ego_id][1] - box.hi[other_id][1] - ey_hi
    q_hi = box.hi[ego_id][1] - box.lo[other_id][1] - ey_lo

    co_lo, co_hi = _range_cos(box.lo[other_id][2], box.hi[other_id][2])
    so_lo, so_hi = _range_sin(box.lo[other_id][2], box.hi[other_id][2])
    vo_lo, vo_hi = box.lo[other_id][3], box.hi[other_id][3]
    vc_lo, vc_hi = _mul_range(vo_lo, vo_hi, co_lo, co_hi)
    vs_lo, vs_hi = _mul_range(vo_lo, vo_hi, so_lo, so_hi)
    # Other vehicle's planar drift rate ranges (x then y).
    ox_lo = vc_lo + h.h_x + edx_lo
    ox_hi = vc_hi + h.h_x + edx_hi
    oy_lo = vs_lo + h.h_y + edy_lo
    oy_hi = vs_hi + h.h_y + edy_hi
    return (ego_id, other_id, p_lo, p_hi, q_lo, q_hi,
            ox_lo, ox_hi, oy_lo, oy_hi)


def _pair_lf_min_core(box, ego_id, p_lo, p_hi, q_lo, q_hi,
                      ox_lo, ox_hi, oy_lo, oy_hi,
                      a2, b2, k, grid_points) -> float:
    ve_lo, ve_hi = box.lo[ego_id][3], box.hi[ego_id][3]
    th_lo, th_hi = box.lo[ego_id][2], box.hi[ego_id][2]
    ve_cands = (ve_lo,) if ve_hi <= ve_lo else (ve_lo, ve_hi)
    best = math.inf
    for clo, chi, slo, shi in _trig_boxes(th_lo, th_hi, grid_points):
        ce_cands = (clo,) if chi <= clo else (clo, chi)
        se_cands = (slo,) if shi <= slo else (slo, shi)
        for ve in ve_cands:
            for ce in ce_cands:
                vece = ve * ce
                pb = min(_pblock(vece - ox_hi, p_lo, p_hi, a2, k),
                         _pblock(vece - ox_lo, p_lo, p_hi, a2, k))
                for se in se_cands:
                    vese = ve * se
                    qb = min(_pblock(vese - oy_hi, q_lo, q_hi, b2, k),
                             _pblock(vese - oy_lo, q_lo, q_hi, b2, k))
                    val = pb + qb - k * ve * ve
                    if val < best:
                        best = val
    return best


def robust_lf_min(pair: str, box: UncertaintyBox, params: BarrierParams,
                  terms: AdaptiveTerms | None = None,
                  grid_points: int = DEFAULT_GRID_POINTS) -> float:
    """Minimum of the pair row's drift-plus-class-K term over the box.

    A certified lower bound: every admissible realization of the states,
    error, and error rate evaluates at or above the returned value. On a
    degenerate point box it reduces to the nominal row constant.
    """
    (ego_id, _other, p_lo, p_hi, q_lo, q_hi,
     ox_lo, ox_hi, oy_lo, oy_hi) = _pair_geometry(pair, box, terms)
    if p_lo > p_hi or q_lo > q_hi:
        raise ValueError("inverted interval in uncertainty box")
    return _pair_lf_min_core(box, ego_id, p_lo, p_hi, q_lo, q_hi,
                             ox_lo, ox_hi, oy_lo, oy_hi,
                             params.a * params.a, params.b * params.b,
                             params.k, grid_points)


def _phi_coeff_extremes(box, vid, p_lo, p_hi, q_lo, q_hi, a2, b2,
                        grid_points, flip: bool):
    """Extremes of 2*v*(-p*sin/a2 + q*cos/b2) (flip=False, ego steering) or
    2*v*(p*sin/a2 - q*cos/b2) (flip=True, the other controlled vehicle)."""
    v_lo, v_hi = box.lo[vid][3], box.hi[vid][3]
    th_lo, th_hi = box.lo[vid][2], box.hi[vid][2]
    v_cands = (v_lo,) if v_hi <= v_lo else (v_lo, v_hi)
    p_cands = (p_lo,) if p_hi <= p_lo else (p_lo, p_hi)
    q_cands = (q_lo,) if q_hi <= q_lo else (q_lo, q_hi)
    gmin = math.inf
    gmax = -math.inf
    for clo, chi, slo, shi in _trig_boxes(th_lo, th_hi, grid_points):
        c_cands = (clo,) if chi <= clo else (clo, chi)
        s_cands = (slo,) if shi <= slo else (slo, shi)
        for v in v_cands:
            for c in c_cands:
                for s in s_cands:
                    for p in p_cands:
                        for q in q_cands:
                            g = 2.0 * v * (p * s / a2 - q * c / b2)
                            if not flip:
                                g = -g
                            if g < gmin:
                                gmin = g
                            if g > gmax:
                                gmax = g
    return gmin, gmax


def robust_lg_extremes(pair: str, box: UncertaintyBox, params: BarrierParams,
                       grid_points: int = DEFAULT_GRID_POINTS) -> dict:
    """Min/max of each control coefficient of a pair row over the box.

    Returns {channel: (min, max)} with channels "u", "phi" for the ego and,
    for the pair of two controlled vehicles, "phi_other".
    """
    (ego_id, other_id, p_lo, p_hi, q_lo, q_hi,
     _ox_lo, _ox_hi, _oy_lo, _oy_hi) = _pair_geometry(pair, box, None)
    a2 = params.a * params.a
    b2 = params.b * params.b
    ve_lo, ve_hi = box.lo[ego_id][3], box.hi[ego_id][3]
    out = {"u": (-2.0 * ve_hi, -2.0 * ve_lo)}
    out["phi"] = _phi_coeff_extremes(box, ego_id, p_lo, p_hi, q_lo, q_hi,
                                     a2, b2, grid_points, flip=False)
    if pair == "1C":
        out["phi_other"] = _phi_coeff_extremes(box, other_id, p_lo, p_hi,
                                               q_lo, q_hi, a2, b2,
                                               grid_points, flip=True)
    return out


def robust_lg_min(pair: str, box: UncertaintyBox, params: BarrierParams,
                  sign_u: float, sign_phi: float,
                  grid_points: int = DEFAULT_GRID_POINTS) -> tuple[float, float]:
    """Sign-split worst-case control coefficients for the ego channels.

    A channel whose held control is non-negative takes the coefficient
    minimum, otherwise the maximum, so that coefficient*control is
    worst-cased over the box.
    """
    ext = robust_lg_extremes(pair, box, params, grid_points)
    u_mm = ext["u"]
    phi_mm = ext["phi"]
    return (u_mm[0] if sign_u >= 0 else u_mm[1],
            phi_mm[0] if sign_phi >= 0 else phi_mm[1])


def _limit_row_robust(tag: str, box: UncertaintyBox, v_min: float,
                      v_max: float, lane_width: float, k_speed: float,
                      k_lateral: float, signs) -> ConstraintRow:
    """Worst-cased speed/lateral band row (all enumerations here are exact)."""
    name, vid = tag.split(":")
    iu, iphi = (IDX_U_C, IDX_PHI_C) if vid == "C" else (IDX_U_1, IDX_PHI_1)
    v_lo, v_hi = box.interval(vid, 3)

    c_g = [0.0] * DECISION_DIM
    if name == "vmin":
        c_g[iu] = 1.0
        return ConstraintRow("cbf", k_speed * (v_lo - v_min), tuple(c_g), tag)
    if name == "vmax":
        c_g[iu] = -1.0
        return ConstraintRow("cbf", k_speed * (v_max - v_hi), tuple(c_g), tag)

    y_lo, y_hi = box.interval(vid, 1)
    th_lo, th_hi = box.interval(vid, 2)
    c_lo, c_hi = _range_cos(th_lo, th_hi)
    s_lo, s_hi = _range_sin(th_lo, th_hi)
    vs_lo, vs_hi = _mul_range(v_lo, v_hi, s_lo, s_hi)
    vc_lo, vc_hi = _mul_range(v_lo, v_hi, c_lo, c_hi)

    phi_sign = signs[iphi]
    if name == "ylow":
        c_f = vs_lo + k_lateral * (y_lo + lane_width / 2.0)
        c_g[iphi] = vc_lo if phi_sign >= 0 else vc_hi
        return ConstraintRow("cbf", c_f, tuple(c_g), tag)
    if name == "yhigh":
        c_f = -vs_hi + k_lateral * (1.5 * lane_width - y_hi)
        c_g[iphi] = -vc_hi if phi_sign >= 0 else -vc_lo
        return ConstraintRow("cbf", c_f, tuple(c_g), tag)
    raise ValueError(f"unknown limit row {tag!r}")


def robustify_rows(nominal_rows: list[ConstraintRow], box: UncertaintyBox,
                   signs, *, barrier_params: dict,
                   terms: AdaptiveTerms | None, v_min: float, v_max: float,
                   lane_width: float, k_speed: float = 1.0,
                   k_lateral: float = 1.0, hdv_error_free: bool = False,
                   grid_points: int = DEFAULT_GRID_POINTS) -> list[ConstraintRow]:
    """Replace every CBF row by its worst case over the box.

    ``signs`` is the nominal decision vector (only the signs of the four
    control entries matter). CLF rows pass through untouched: they are soft
    and their slacks absorb model error. ``hdv_error_free`` drops the
    error/error-rate boxes from human-vehicle pairs for runs where the
    human model is known to the controller.
    """
    out = []
    for row in nominal_rows:
        if row.kind != "cbf":
            out.append(row)
            continue
        name, _, rest = row.tag.partition(":")
        if name == "pair":
            pair = rest
            params = barrier_params[pair]
            include_error = False if hdv_error_free else None
            (ego_id, _other, p_lo, p_hi, q_lo, q_hi,
             ox_lo, ox_hi, oy_lo, oy_hi) = _pair_geometry(
                pair, box, terms, include_error)
            a2 = params.a * params.a
            b2 = params.b * params.b
            c_f = _pair_lf_min_core(box, ego_id, p_lo, p_hi, q_lo, q_hi,
                                    ox_lo, ox_hi, oy_lo, oy_hi,
                                    a2, b2, params.k, grid_points)
            ext = robust_lg_extremes(pair, box, params, grid_points)
            iu, iphi = (IDX_U_C, IDX_PHI_C) if ego_id == "C" \
                else (IDX_U_1, IDX_PHI_1)
            c_g = [0.0] * DECISION_DIM
            mm = ext["u"]
            c_g[iu] = mm[0] if signs[iu] >= 0 else mm[1]
            mm = ext["phi"]
            c_g[iphi] = mm[0] if signs[iphi] >= 0 else mm[1]
            if pair == "1C":
                mm = ext["phi_other"]
                c_g[IDX_PHI_C] = mm[0] if signs[IDX_PHI_C] >= 0 else mm[1]
            out.append(ConstraintRow("cbf", c_f, tuple(c_g), row.tag))
        else:
            out.append(_limit_row_robust(row.tag, box, v_min, v_max,
                                         lane_width, k_speed, k_lateral,
                                         signs))
    return out
