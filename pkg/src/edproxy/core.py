"""Economic dispatch problem objects, metrics, and the exact reference solver.

Units: dispatch quantities are per-unit on the case MVA base.  Cost
coefficients ($/MWh) and penalty prices ($/MW) are applied directly to
per-unit quantities, so reported objectives are in dollars per base_mva MW;
multiply by base_mva for plain dollar figures.  Relative metrics (gaps) are
invariant to that scaling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import simplex
from .grid import SystemCase

logger = logging.getLogger(__name__)

DEFAULT_M_TH = 1500.0   # thermal violation penalty, $/MW
DEFAULT_M_PB = 3500.0   # power balance penalty (value of lost load), $/MW
DEFAULT_M_R = 1100.0    # reserve shortage penalty, $/MW

FEAS_TOL = 1e-4  # p.u., feasibility reporting tolerance


@dataclass
class EDInstance:
    """One dispatch problem: nodal demand, reserve requirement, limits, prices."""

    case_ref: str
    d: np.ndarray
    reserve_req: float
    p_max: np.ndarray
    r_max: np.ndarray
    c: np.ndarray
    gen_bus: np.ndarray | None = None      # bus position of each generator
    ptdf: np.ndarray | None = None         # (|E|, |N|)
    f_min: np.ndarray = field(default_factory=lambda: np.zeros(0))
    f_max: np.ndarray = field(default_factory=lambda: np.zeros(0))
    m_th: float = DEFAULT_M_TH
    m_pb: float = DEFAULT_M_PB
    m_r: float = DEFAULT_M_R

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64)
        self.p_max = np.asarray(self.p_max, dtype=np.float64)
        self.r_max = np.asarray(self.r_max, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        if not np.isfinite(self.d).all():
            raise ValueError("demand vector must be finite")
        if (self.p_max < 0).any():
            raise ValueError("p_max must be nonnegative")
        if ((self.r_max < 0) | (self.r_max > self.p_max + 1e-12)).any():
            raise ValueError("r_max must satisfy 0 <= r_max <= p_max")
        if self.reserve_req < 0:
            raise ValueError("reserve requirement must be nonnegative")
        if min(self.m_th, self.m_pb, self.m_r) <= 0:
            raise ValueError("penalty prices must be positive")
        if self.ptdf is not None:
            self.f_min = np.asarray(self.f_min, dtype=np.float64)
            self.f_max = np.asarray(self.f_max, dtype=np.float64)
            if (self.f_min > 0).any() or (self.f_max < 0).any():
                raise ValueError("flow limits must satisfy f_min <= 0 <= f_max")
        self._psi = None
        self._phi_d = None

    @classmethod
    def from_case(cls, case: SystemCase, d: np.ndarray | None = None,
                  reserve_req: float = 0.0, case_ref: str = "case",
                  m_th: float = DEFAULT_M_TH, m_pb: float = DEFAULT_M_PB,
                  m_r: float = DEFAULT_M_R) -> "EDInstance":
        pmin = np.array([g.p_min_pu for g in case.generators])
        if (np.abs(pmin) > 1e-12).any():
            raise ValueError("case has nonzero generator minimums; run normalize_case first")
        fmin, fmax = case.flow_limits()
        return cls(case_ref=case_ref,
                   d=case.demand_vector() if d is None else d,
                   reserve_req=reserve_req,
                   p_max=case.p_max(), r_max=case.r_max(), c=case.cost_linear(),
                   gen_bus=case.gen_bus_positions(), ptdf=case.ptdf,
                   f_min=fmin, f_max=fmax, m_th=m_th, m_pb=m_pb, m_r=m_r)

    @classmethod
    def from_flow_data(cls, case_ref: str, d: np.ndarray, reserve_req: float,
                       p_max: np.ndarray, r_max: np.ndarray, c: np.ndarray,
                       psi: np.ndarray | None = None, phi: np.ndarray | None = None,
                       f_min: np.ndarray | None = None, f_max: np.ndarray | None = None,
                       m_th: float = DEFAULT_M_TH, m_pb: float = DEFAULT_M_PB,
                       m_r: float = DEFAULT_M_R) -> "EDInstance":
        """Build an instance from precomputed flow sensitivities.

        ``psi`` maps generator dispatch to branch flows and ``phi`` maps nodal
        demand to branch flows, for the thermally limited branches only.
        """
        inst = cls(case_ref=case_ref, d=d, reserve_req=reserve_req, p_max=p_max,
                   r_max=r_max, c=c, m_th=m_th, m_pb=m_pb, m_r=m_r)
        if psi is not None and psi.shape[0]:
            inst.ptdf = phi
            inst._psi = np.asarray(psi, dtype=np.float64)
            inst._phi_d = phi @ inst.d
            inst.f_min = np.asarray(f_min, dtype=np.float64)
            inst.f_max = np.asarray(f_max, dtype=np.float64)
        return inst

    @property
    def n_gen(self) -> int:
        return self.p_max.size

    @property
    def demand_total(self) -> float:
        return float(self.d.sum())

    def flow_matrices(self):
        """(psi, phi_d): branch flow = psi @ p - phi_d."""
        if self.ptdf is None:
            return None, None
        if self._psi is None:
            self._psi = np.ascontiguousarray(self.ptdf[:, self.gen_bus])
            self._phi_d = self.ptdf @ self.d
        return self._psi, self._phi_d


@dataclass
class DispatchSolution:
    p: np.ndarray
    r: np.ndarray
    xi_th: np.ndarray
    objective: float
    status: str


@dataclass
class FeasibilityReport:
    feasible: bool
    violations: dict[str, float]
    tol: float


def thermal_violations(inst: EDInstance, p: np.ndarray) -> np.ndarray:
    """Per-branch violation of the soft flow limits for dispatch p."""
    psi, phi_d = inst.flow_matrices()
    if psi is None or psi.shape[0] == 0:
        return np.zeros(0)
    flow = psi @ p - phi_d
    return np.maximum(0.0, np.maximum(flow - inst.f_max, inst.f_min - flow))


def objective_value(inst: EDInstance, p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != inst.p_max.shape:
        raise ValueError(f"dispatch has shape {p.shape}, expected {inst.p_max.shape}")
    return float(inst.c @ p + inst.m_th * thermal_violations(inst, p).sum())


def reserve_shortage(inst: EDInstance, p: np.ndarray) -> float:
    recoverable = np.minimum(inst.r_max, inst.p_max - p).sum()
    return float(max(0.0, inst.reserve_req - recoverable))


def penalized_objective(inst: EDInstance, p: np.ndarray) -> float:
    """Objective plus hard-constraint penalties (balance and reserve)."""
    balance = abs(float(p.sum()) - inst.demand_total)
    return (objective_value(inst, p)
            + inst.m_pb * balance
            + inst.m_r * reserve_shortage(inst, p))


def check_feasibility(inst: EDInstance, p: np.ndarray, r: np.ndarray | None = None,
                      tol: float = FEAS_TOL) -> FeasibilityReport:
    """Per-family maximum violations of the hard constraints (thermal is soft).

    When no reserve vector is given, reserves are assumed recovered optimally
    (r = min(r_max, p_max - p)), which makes the reserve-bound and eco-max
    families hold by construction.
    """
    p = np.asarray(p, dtype=np.float64)
    if r is None:
        r = np.minimum(inst.r_max, inst.p_max - p)
    r = np.asarray(r, dtype=np.float64)
    v = {
        "power_balance": abs(float(p.sum()) - inst.demand_total),
        "dispatch_bounds": float(np.maximum(np.maximum(-p, p - inst.p_max), 0.0).max(initial=0.0)),
        "reserve_bounds": float(np.maximum(np.maximum(-r, r - inst.r_max), 0.0).max(initial=0.0)),
        "eco_max": float(np.maximum(p + r - inst.p_max, 0.0).max(initial=0.0)),
        "reserve_requirement": float(max(0.0, inst.reserve_req - r.sum())),
    }
    return FeasibilityReport(feasible=all(x <= tol for x in v.values()), violations=v, tol=tol)


# ---------------------------------------------------------------------------
# reference solver: restricted master with lazy thermal rows
# ---------------------------------------------------------------------------


def _master_lp(inst: EDInstance, active: list[int], psi, phi_d, max_pivots: int):
    n = inst.n_gen
    with_r = inst.reserve_req > 0.0
    n_r = n if with_r else 0
    k = len(active)
    n_var = n + n_r + k

    c = np.concatenate([inst.c, np.zeros(n_r), np.full(k, inst.m_th)])
    lower = np.zeros(n_var)
    upper = np.concatenate([inst.p_max,
                            inst.r_max if with_r else np.zeros(0),
                            np.full(k, np.inf)])

    a_eq = np.zeros((1, n_var))
    a_eq[0, :n] = 1.0
    b_eq = np.array([inst.demand_total])

    rows = []
    rhs = []
    if with_r:
        row = np.zeros(n_var)
        row[n:n + n_r] = -1.0
        rows.append(row)
        rhs.append(-inst.reserve_req)
        for g in range(n):
            row = np.zeros(n_var)
            row[g] = 1.0
            row[n + g] = 1.0
            rows.append(row)
            rhs.append(inst.p_max[g])
    for slot, e in enumerate(active):
        up = np.zeros(n_var)
        up[:n] = psi[e]
        up[n + n_r + slot] = -1.0
        rows.append(up)
        rhs.append(inst.f_max[e] + phi_d[e])
        dn = np.zeros(n_var)
        dn[:n] = -psi[e]
        dn[n + n_r + slot] = -1.0
        rows.append(dn)
        rhs.append(-inst.f_min[e] - phi_d[e])

    a_ub = np.array(rows) if rows else None
    b_ub = np.array(rhs) if rhs else None
    res = simplex.solve_bounded_lp(c, a_ub, b_ub, a_eq, b_eq, lower, upper,
                                   max_pivots=max_pivots)
    return res, with_r


def solve_reference(inst: EDInstance, tol: float = 1e-8, rows_per_round: int = 20,
                    max_rounds: int = 100, max_pivots: int = 50_000) -> DispatchSolution:
    """Exact optimum of the dispatch LP via lazy thermal-row generation.

    The restricted master omits thermal rows; after each solve the most
    violated branches (up to ``rows_per_round``) are added with their priced
    slack variables until no branch is violated beyond ``tol``.
    """
    n = inst.n_gen
    cap = float(inst.p_max.sum())
    d_tot = inst.demand_total
    if (d_tot < 0.0 or d_tot > cap or cap - d_tot < inst.reserve_req
            or inst.r_max.sum() < inst.reserve_req):
        return DispatchSolution(p=np.zeros(n), r=np.zeros(n), xi_th=np.zeros(0),
                                objective=np.nan, status=simplex.STATUS_INFEASIBLE)
    if d_tot == 0.0:
        p = np.zeros(n)
        r = np.minimum(inst.r_max, inst.p_max)
        return DispatchSolution(p=p, r=r, xi_th=thermal_violations(inst, p),
                                objective=objective_value(inst, p), status="optimal")

    psi, phi_d = inst.flow_matrices()
    limited = (np.flatnonzero(np.isfinite(inst.f_max) | np.isfinite(-inst.f_min))
               if psi is not None else np.zeros(0, dtype=np.int64))
    active: list[int] = []
    p = np.zeros(n)
    r = np.zeros(n)
    for _ in range(max_rounds):
        res, with_r = _master_lp(inst, active, psi, phi_d, max_pivots)
        if res.status != simplex.STATUS_OPTIMAL:
            return DispatchSolution(p=p, r=r, xi_th=thermal_violations(inst, p),
                                    objective=np.nan, status=res.status)
        p = res.x[:n]
        r = res.x[n:2 * n] if with_r else np.minimum(inst.r_max, inst.p_max - p)
        if limited.size == 0:
            break
        xi = thermal_violations(inst, p)
        fresh = np.array([e for e in limited if e not in active and xi[e] > tol],
                         dtype=np.int64)
        if fresh.size == 0:
            break
        order = fresh[np.argsort(xi[fresh])[::-1]]
        active.extend(int(e) for e in order[:rows_per_round])
        logger.debug("added %d thermal rows (max violation %.3e)",
                     min(fresh.size, rows_per_round), float(xi[fresh].max()))
    else:
        return DispatchSolution(p=p, r=r, xi_th=thermal_violations(inst, p),
                                objective=np.nan, status=simplex.STATUS_ITERATION_LIMIT)

    return DispatchSolution(p=p, r=r, xi_th=thermal_violations(inst, p),
                            objective=objective_value(inst, p), status="optimal")
