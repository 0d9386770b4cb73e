"""Exact Euclidean projections onto the dispatch feasible sets.

These are the comparison baselines for the repair layers: the box-simplex
projection via monotone bisection on the dual multiplier of the balance
constraint, and the projection onto the full dispatch-with-reserves set via
Dykstra's alternating projections.
"""

from __future__ import annotations

import numpy as np

from ._kernels import project_hypersimplex_core
from .core import EDInstance

BALANCE_TOL = 1e-10


class ProjectionConvergenceError(RuntimeError):
    """Dykstra iteration budget exhausted; carries the last iterate."""

    def __init__(self, message: str, last_iterate: np.ndarray):
        super().__init__(message)
        self.last_iterate = last_iterate


def project_hypersimplex(p: np.ndarray, p_max: np.ndarray, demand_total: float,
                         tol: float = BALANCE_TOL) -> np.ndarray:
    """argmin ||x - p|| over {0 <= x <= p_max, sum(x) = demand_total}.

    Solved by bisection on the shift nu with x(nu) = clip(p + nu, 0, p_max);
    sum(x(nu)) is monotone in nu, so the balance residual brackets the root.
    """
    p = np.asarray(p, dtype=np.float64)
    p_max = np.asarray(p_max, dtype=np.float64)
    cap = float(p_max.sum())
    if demand_total < -tol or demand_total > cap + tol:
        raise ValueError(f"target sum {demand_total} outside [0, {cap}]")
    return project_hypersimplex_core(p, p_max, float(np.clip(demand_total, 0.0, cap)), tol)


def project_reserve_set(q: np.ndarray, p_max: np.ndarray, r_max: np.ndarray,
                        reserve_req: float, tol: float = 1e-12) -> np.ndarray:
    """Project onto {x : sum(min(r_max, p_max - x)) >= reserve_req}.

    The constraint function is concave and separable, so the KKT system
    reduces to a one-dimensional search over the constraint multiplier mu:
    each coordinate moves down by at most mu, and only while it sits above
    its reserve-saturation point p_max - r_max.
    """
    q = np.asarray(q, dtype=np.float64)
    if reserve_req > r_max.sum() + 1e-12:
        raise ValueError("reserve requirement exceeds total reserve capability")
    t = p_max - r_max

    def recoverable(x):
        return float(np.minimum(r_max, p_max - x).sum())

    if recoverable(q) >= reserve_req - tol:
        return q.copy()

    excess = np.maximum(q - t, 0.0)

    def x_of(mu):
        return q - np.minimum(mu, excess)

    lo, hi = 0.0, float(excess.max(initial=0.0))
    for _ in range(200):
        mu = 0.5 * (lo + hi)
        h = recoverable(x_of(mu))
        if abs(h - reserve_req) <= tol:
            break
        if h < reserve_req:
            lo = mu
        else:
            hi = mu
    return x_of(0.5 * (lo + hi))


def project_feasible_edr(p: np.ndarray, inst: EDInstance, tol: float = 1e-8,
                         max_iter: int = 10_000) -> np.ndarray:
    """Euclidean projection onto the hard-feasible dispatch set with reserves.

    Dykstra's alternating projections between the box-simplex and the
    reserve half-space region.  Stops when successive iterates move less
    than ``tol`` in the infinity norm.
    """
    cap = float(inst.p_max.sum())
    d_tot = inst.demand_total
    if d_tot < 0 or d_tot > cap or cap - d_tot < inst.reserve_req \
            or inst.r_max.sum() < inst.reserve_req:
        raise ValueError("instance is infeasible; projection target set is empty")

    x = np.asarray(p, dtype=np.float64).copy()
    inc_a = np.zeros_like(x)
    inc_b = np.zeros_like(x)
    for _ in range(max_iter):
        x_prev = x
        ya = project_hypersimplex(x + inc_a, inst.p_max, d_tot)
        inc_a = x + inc_a - ya
        yb = project_reserve_set(ya + inc_b, inst.p_max, inst.r_max, inst.reserve_req)
        inc_b = ya + inc_b - yb
        x = yb
        if np.abs(x - x_prev).max(initial=0.0) < tol:
            # report the box-simplex-side iterate: it satisfies balance and
            # bounds exactly, and is within tol of the reserve set
            return ya
    raise ProjectionConvergenceError(
        f"Dykstra did not converge within {max_iter} iterations", x)
