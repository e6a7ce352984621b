"""Dense convex quadratic programming via a dual active-set method.

Solves  min 1/2 z'Hz + f'z  s.t.  A z <= b,  lb <= z <= ub  for small dense
problems (the controller's are 8 variables and a few dozen rows). The dual
active-set scheme starts from the unconstrained minimizer and adds violated
constraints one at a time, so no feasible starting point is needed and
primal infeasibility surfaces as an unbounded dual step. H must be positive
definite, which every problem built by this package satisfies.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

DEFAULT_MAX_ITER = 200

STATUS_OPTIMAL = "optimal"
STATUS_INFEASIBLE = "infeasible"
STATUS_MAX_ITER = "max_iter"


@dataclass
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        n = self.H.shape[0] if self.H.ndim else 0
        self.f = np.asarray(self.f, dtype=float)
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        self.b = np.asarray(self.b, dtype=float)
        self.lb = np.asarray(self.lb, dtype=float)
        self.ub = np.asarray(self.ub, dtype=float)
        if n == 0:
            raise ValueError("empty decision vector")
        if self.H.shape != (n, n):
            raise ValueError("H must be square")
        if not (self.H == self.H.T).all() \
                and not np.allclose(self.H, self.H.T, atol=1e-12):
            raise ValueError("H must be symmetric")
        if self.f.shape != (n,):
            raise ValueError("f has wrong length")
        if self.b.shape != (self.A.shape[0],):
            raise ValueError("A and b row counts differ")
        if self.lb.shape != (n,) or self.ub.shape != (n,):
            raise ValueError("bound vectors have wrong length")
        if np.any(self.lb > self.ub):
            raise ValueError("lb must not exceed ub")

    @property
    def n(self) -> int:
        return self.H.shape[0]


@dataclass
class QpSolution:
    z: np.ndarray
    status: str
    kkt_residual: float
    iterations: int
    solve_time: float
    mult_ineq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mult_lb: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mult_ub: np.ndarray = field(default_factory=lambda: np.zeros(0))
    certificate: dict | None = None


def _standard_rows(problem: QpProblem):
    """Rewrite everything as C z >= d.

    Returns (C, d, lb_rows, ub_rows) where lb_rows/ub_rows map bound rows
    back to their variable index: row m_ineq + i is the lb_rows[i] lower
    bound, and the ub rows follow the lb block.
    """
    n = problem.n
    eye = np.eye(n)
    lb_rows = np.flatnonzero(np.isfinite(problem.lb))
    ub_rows = np.flatnonzero(np.isfinite(problem.ub))
    C = np.concatenate([-problem.A, eye[lb_rows], -eye[ub_rows]])
    d = np.concatenate([-problem.b, problem.lb[lb_rows],
                        -problem.ub[ub_rows]])
    return C, d, lb_rows, ub_rows


def solve(problem: QpProblem, max_iter: int = DEFAULT_MAX_ITER) -> QpSolution:
    """Global minimizer of the convex QP, or a certified non-optimal status.

    Deterministic: identical problems yield bit-identical solutions (ties in
    constraint selection break toward the lowest row index).
    """
    t_start = time.perf_counter()
    H = problem.H
    f = problem.f
    n = problem.n
    try:
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise ValueError("H must be positive definite") from exc

    C, d, lb_rows, ub_rows = _standard_rows(problem)
    m = C.shape[0]
    m_ineq = problem.A.shape[0]
    # Per-row violation tolerance, scaled so large-offset rows do not spin.
    viol_tol = 1e-10 * (1.0 + np.abs(d))

    x = np.linalg.solve(H, -f)
    W: list[int] = []          # active row indices into C
    u: list[float] = []        # their multipliers (>= 0)
    iters = 0

    def finish(status, cert=None):
        mult_ineq = np.zeros(m_ineq)
        mult_lb = np.zeros(n)
        mult_ub = np.zeros(n)
        n_lb = lb_rows.size
        for idx, ui in zip(W, u):
            if idx < m_ineq:
                mult_ineq[idx] = ui
            elif idx < m_ineq + n_lb:
                mult_lb[lb_rows[idx - m_ineq]] = ui
            else:
                mult_ub[ub_rows[idx - m_ineq - n_lb]] = ui
        sol = QpSolution(z=x.copy(), status=status, kkt_residual=np.inf,
                         iterations=iters,
                         solve_time=time.perf_counter() - t_start,
                         mult_ineq=mult_ineq, mult_lb=mult_lb,
                         mult_ub=mult_ub, certificate=cert)
        if status == STATUS_OPTIMAL:
            report = verify_kkt(problem, sol, tol=1e-6)
            sol.kkt_residual = report["max_residual"]
            if not report["ok"]:
                sol.status = STATUS_MAX_ITER
        return sol

    if m == 0:
        return finish(STATUS_OPTIMAL)

    while True:
        iters += 1
        if iters > max_iter:
            return finish(STATUS_MAX_ITER)
        s = C @ x - d
        shifted = s + viol_tol
        worst = int(np.argmin(shifted))
        if shifted[worst] >= 0.0:
            return finish(STATUS_OPTIMAL)
        p = worst
        u_p = 0.0

        while True:
            iters += 1
            if iters > max_iter:
                return finish(STATUS_MAX_ITER)
            cp = C[p]
            k = len(W)
            if k:
                N = C[W].T
                kkt = np.zeros((n + k, n + k))
                kkt[:n, :n] = H
                kkt[:n, n:] = N
                kkt[n:, :n] = N.T
                rhs = np.zeros(n + k)
                rhs[:n] = cp
                try:
                    sol_kkt = np.linalg.solve(kkt, rhs)
                except np.linalg.LinAlgError:
                    sol_kkt, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
                zdir = sol_kkt[:n]
                r = sol_kkt[n:]
            else:
                zdir = np.linalg.solve(H, cp)
                r = None

            ztcp = float(zdir @ cp)
            sp = float(cp @ x - d[p])
            t2 = -sp / ztcp if ztcp > 1e-12 else np.inf

            t1 = np.inf
            drop = -1
            if k:
                for i in range(k):
                    ri = r[i]
                    if ri > 1e-12:
                        cand = u[i] / ri
                        if cand < t1 - 1e-15:
                            t1 = cand
                            drop = i

            t = t1 if t1 < t2 else t2
            if not np.isfinite(t):
                cert = {"violated_row": int(p), "violation": sp,
                        "active_rows": list(W),
                        "dual_combination":
                            r.tolist() if r is not None else []}
                return finish(STATUS_INFEASIBLE, cert)

            if np.isfinite(t2):
                x = x + t * zdir
            if k:
                for i in range(k):
                    u[i] -= t * r[i]
            u_p += t
            if t2 <= t1:
                W.append(p)
                u.append(u_p)
                break
            W.pop(drop)
            u.pop(drop)


def kkt_residuals(problem: QpProblem, solution: QpSolution) -> dict:
    """Per-condition KKT residuals for a candidate solution with multipliers."""
    z = solution.z
    lam = solution.mult_ineq
    mlb = solution.mult_lb
    mub = solution.mult_ub

    grad = problem.H @ z + problem.f
    if problem.A.shape[0]:
        grad = grad + problem.A.T @ lam
    grad = grad - mlb + mub
    stationarity = float(np.max(np.abs(grad))) if grad.size else 0.0

    primal = 0.0
    comp = 0.0
    if problem.A.shape[0]:
        slack = problem.A @ z - problem.b
        primal = max(primal, float(np.max(slack)))
        comp = max(comp, float(np.max(np.abs(lam * slack))))
    lb_slack = problem.lb - z
    ub_slack = z - problem.ub
    finite_lb = np.isfinite(problem.lb)
    finite_ub = np.isfinite(problem.ub)
    if finite_lb.any():
        primal = max(primal, float(np.max(lb_slack[finite_lb])))
        comp = max(comp, float(np.max(np.abs(mlb[finite_lb]
                                             * lb_slack[finite_lb]))))
    if finite_ub.any():
        primal = max(primal, float(np.max(ub_slack[finite_ub])))
        comp = max(comp, float(np.max(np.abs(mub[finite_ub]
                                             * ub_slack[finite_ub]))))
    primal = max(primal, 0.0)

    dual = 0.0
    for arr in (lam, mlb, mub):
        if arr.size:
            dual = max(dual, float(np.max(-arr)))
    dual = max(dual, 0.0)

    return {"stationarity": stationarity, "primal": primal,
            "dual": dual, "complementarity": comp}


def verify_kkt(problem: QpProblem, solution: QpSolution, tol: float = 1e-6) -> dict:
    """Check stationarity, feasibility, dual feasibility, and complementarity.

    Returns the per-condition residuals plus the max and an ``ok`` flag.
    Complementarity is checked relative to the row scale so large constraint
    offsets do not inflate the product residual.
    """
    res = kkt_residuals(problem, solution)
    scale = 1.0 + float(np.max(np.abs(problem.b))) if problem.b.size else 1.0
    res["complementarity_scaled"] = res["complementarity"] / scale
    res["max_residual"] = max(res["stationarity"], res["primal"], res["dual"],
                              res["complementarity_scaled"])
    res["ok"] = (res["stationarity"] <= tol and res["primal"] <= 1e-8 + tol
                 and res["dual"] <= tol and res["complementarity_scaled"] <= tol)
    return res
