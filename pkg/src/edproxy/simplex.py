"""Dense two-phase simplex for bounded-variable linear programs.

Solves  min c.x  s.t.  A_ub x <= b_ub,  A_eq x = b_eq,  lower <= x <= upper.
Every variable must have at least one finite bound (true for dispatch LPs,
where everything is boxed or a priced slack).

Design notes:
* Revised simplex with an explicit dense basis inverse, refactored
  periodically to bound drift.  Problem sizes here are desk scale (tens to a
  few hundred rows), so dense algebra is the right tool.
* Bland's rule for both the entering and the leaving choice: slower than
  steepest edge but immune to cycling under degeneracy, which matters because
  merit-order dispatch problems are heavily degenerate.
* Phase 1 starts from artificial variables on every row; phase 2 pins the
  artificials to zero rather than removing columns, which keeps the basis
  bookkeeping trivial.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STATUS_OPTIMAL = "optimal"
STATUS_INFEASIBLE = "infeasible"
STATUS_ITERATION_LIMIT = "iteration_limit"
STATUS_UNBOUNDED = "unbounded"

_REFACTOR_EVERY = 64
_RATIO_TIE = 1e-10


@dataclass
class LPResult:
    status: str
    x: np.ndarray | None = None
    objective: float | None = None
    pivots: int = 0
    # diagnostics over all internal columns (structural + slack + artificial)
    reduced_costs: np.ndarray | None = None
    at_upper: np.ndarray | None = None
    in_basis: np.ndarray | None = None
    movable: np.ndarray | None = None  # False for fixed (pinned) columns
    n_structural: int = 0


class _Tableau:
    def __init__(self, a, b, lower, upper, tol):
        self.a = a
        self.b = b
        self.lower = lower
        self.upper = upper
        self.tol = tol
        self.m, self.n = a.shape
        self.basis = np.empty(self.m, dtype=np.int64)
        self.in_basis = np.zeros(self.n, dtype=bool)
        self.at_upper = np.zeros(self.n, dtype=bool)
        self.binv = np.eye(self.m)
        self._since_refactor = 0

    def refactor(self):
        self.binv = np.linalg.inv(self.a[:, self.basis])
        self._since_refactor = 0

    def nonbasic_values(self) -> np.ndarray:
        x = np.where(self.at_upper, self.upper, self.lower)
        x[self.in_basis] = 0.0
        return x

    def solution(self) -> np.ndarray:
        x = self.nonbasic_values()
        x[self.basis] = self.binv @ (self.b - self.a @ x)
        return x

    def pivot_update(self, w: np.ndarray, row: int):
        """Rank-1 update of the basis inverse after column `row` is replaced."""
        self.binv[row] /= w[row]
        mask = np.arange(self.m) != row
        self.binv[mask] -= np.outer(w[mask], self.binv[row])
        self._since_refactor += 1
        if self._since_refactor >= _REFACTOR_EVERY:
            self.refactor()


def _simplex_core(t: _Tableau, c: np.ndarray, max_pivots: int) -> tuple[str, int]:
    tol = t.tol
    pivots = 0
    while pivots < max_pivots:
        x_nb = t.nonbasic_values()
        x_b = t.binv @ (t.b - t.a @ x_nb)
        y = t.binv.T @ c[t.basis]
        d = c - t.a.T @ y

        movable = ~t.in_basis & (t.upper - t.lower > 0.0)
        improving = movable & np.where(t.at_upper, d > tol, d < -tol)
        candidates = np.flatnonzero(improving)
        if candidates.size == 0:
            return STATUS_OPTIMAL, pivots
        j = int(candidates[0])  # Bland: smallest entering index
        direction = -1.0 if t.at_upper[j] else 1.0

        w = t.binv @ t.a[:, j]
        dw = direction * w
        # ratio test: smallest blocking step; the entering variable's own
        # opposite bound competes like any blocker, with Bland index ties
        best_t = t.upper[j] - t.lower[j]
        best_var = j
        best_pos = -1
        for i in range(t.m):
            bi = t.basis[i]
            if dw[i] > tol:
                ti = max((x_b[i] - t.lower[bi]) / dw[i], 0.0)
            elif dw[i] < -tol:
                ti = max((t.upper[bi] - x_b[i]) / (-dw[i]), 0.0)
            else:
                continue
            if ti < best_t - _RATIO_TIE or (ti < best_t + _RATIO_TIE and bi < best_var):
                best_t = min(best_t, ti)
                best_var = bi
                best_pos = i

        if not np.isfinite(best_t):
            return STATUS_UNBOUNDED, pivots

        pivots += 1
        if best_pos < 0:
            t.at_upper[j] = not t.at_upper[j]  # bound flip, basis unchanged
            continue

        leaving = t.basis[best_pos]
        t.in_basis[leaving] = False
        t.at_upper[leaving] = dw[best_pos] < 0.0  # rose to its upper bound
        t.basis[best_pos] = j
        t.in_basis[j] = True
        t.pivot_update(w, best_pos)
    return STATUS_ITERATION_LIMIT, pivots


def solve_bounded_lp(c, a_ub=None, b_ub=None, a_eq=None, b_eq=None,
                     lower=None, upper=None, max_pivots: int = 50_000,
                     tol: float = 1e-9) -> LPResult:
    c = np.asarray(c, dtype=np.float64)
    n = c.size
    a_ub = np.zeros((0, n)) if a_ub is None else np.atleast_2d(np.asarray(a_ub, dtype=np.float64))
    b_ub = np.zeros(0) if b_ub is None else np.atleast_1d(np.asarray(b_ub, dtype=np.float64))
    a_eq = np.zeros((0, n)) if a_eq is None else np.atleast_2d(np.asarray(a_eq, dtype=np.float64))
    b_eq = np.zeros(0) if b_eq is None else np.atleast_1d(np.asarray(b_eq, dtype=np.float64))
    lower = np.zeros(n) if lower is None else np.asarray(lower, dtype=np.float64)
    upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=np.float64)
    if (lower > upper).any():
        raise ValueError("lower > upper on some variable")
    if (~np.isfinite(lower) & ~np.isfinite(upper)).any():
        raise ValueError("free variables (both bounds infinite) are not supported")

    m_ub, m_eq = a_ub.shape[0], a_eq.shape[0]
    m = m_ub + m_eq
    b = np.concatenate([b_ub, b_eq])

    # columns: structural | slack (ub rows) | artificial (all rows)
    n_tot = n + m_ub + m
    a = np.zeros((m, n_tot))
    a[:m_ub, :n] = a_ub
    a[m_ub:, :n] = a_eq
    a[np.arange(m_ub), n + np.arange(m_ub)] = 1.0

    lo = np.concatenate([lower, np.zeros(m_ub), np.zeros(m)])
    hi = np.concatenate([upper, np.full(m_ub, np.inf), np.full(m, np.inf)])

    t = _Tableau(a, b, lo, hi, tol)
    t.at_upper[:] = ~np.isfinite(lo)  # start such vars at their finite upper
    start = np.where(t.at_upper, hi, lo)
    resid = b - a[:, :n + m_ub] @ start[:n + m_ub]
    sigma = np.where(resid >= 0.0, 1.0, -1.0)
    art = n + m_ub + np.arange(m)
    a[np.arange(m), art] = sigma
    t.basis[:] = art
    t.in_basis[art] = True
    t.refactor()

    # phase 1: minimize total artificial infeasibility
    c1 = np.zeros(n_tot)
    c1[art] = 1.0
    status, piv1 = _simplex_core(t, c1, max_pivots)
    if status == STATUS_ITERATION_LIMIT:
        return LPResult(STATUS_ITERATION_LIMIT, pivots=piv1)
    infeas = float(c1 @ t.solution())
    if infeas > 1e-8 * (1.0 + np.abs(b).max(initial=0.0)):
        return LPResult(STATUS_INFEASIBLE, pivots=piv1)

    # phase 2: pin artificials at zero and optimize the true objective
    t.upper[art] = 0.0
    t.at_upper[art] = False
    c2 = np.concatenate([c, np.zeros(m_ub + m)])
    status, piv2 = _simplex_core(t, c2, max_pivots - piv1)
    if status in (STATUS_UNBOUNDED, STATUS_ITERATION_LIMIT):
        return LPResult(status, pivots=piv1 + piv2)

    t.refactor()
    x = t.solution()
    y = t.binv.T @ c2[t.basis]
    reduced = c2 - t.a.T @ y
    return LPResult(STATUS_OPTIMAL, x=x[:n], objective=float(c @ x[:n]),
                    pivots=piv1 + piv2, reduced_costs=reduced,
                    at_upper=t.at_upper.copy(), in_basis=t.in_basis.copy(),
                    movable=(t.upper - t.lower) > 0.0, n_structural=n)
