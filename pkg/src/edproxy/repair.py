"""Closed-form differentiable repair layers for dispatch feasibility.

The two layers act on a dispatch vector p:

* ``power_balance_repair``: moves p inside the hypercube onto the
  total-output hyperplane sum(p) = D by a convex combination toward p_max
  (shortage) or toward zero (surplus).  Demands outside (0, sum(p_max)) clamp
  the output to the nearest box corner.
* ``reserve_repair``: given p already on the hyperplane, shifts output from
  reserve-saturated generators to reserve-capable ones so that the maximum
  recoverable reserves meet the requirement whenever that is possible at all.

Both layers return a :class:`LayerJacobianHandle` that replays the forward
branch decisions to apply the exact vector-Jacobian product, so they can be
dropped into a reverse-mode pipeline or used as stand-alone post-processing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K


class RepairContractError(ValueError):
    """Input violated the layer's contract (outside hypercube / off balance)."""


@dataclass(frozen=True)
class RepairContext:
    """Per-instance limits for the repair layers (all per-unit)."""

    p_max: np.ndarray
    r_max: np.ndarray
    demand_total: float
    reserve_req: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "p_max", np.asarray(self.p_max, dtype=np.float64))
        object.__setattr__(self, "r_max", np.asarray(self.r_max, dtype=np.float64))
        if (self.p_max < 0).any():
            raise ValueError("p_max must be nonnegative")
        if ((self.r_max < 0) | (self.r_max > self.p_max + 1e-12)).any():
            raise ValueError("r_max must satisfy 0 <= r_max <= p_max")
        if not (np.isfinite(self.demand_total) and np.isfinite(self.reserve_req)):
            raise ValueError("demand_total and reserve_req must be finite")


@dataclass
class LayerJacobianHandle:
    """Saved forward intermediates; ``vjp(u)`` applies u^T (d out / d in).

    The handle references the forward input arrays without copying; mutate
    them before calling ``vjp`` and the replayed branch no longer matches.
    """

    kind: str
    _saved: tuple

    def vjp(self, cotangent: np.ndarray) -> np.ndarray:
        u = np.asarray(cotangent, dtype=np.float64)
        if self.kind == "power_balance":
            p, pmax, d, eta, branch = self._saved
            if u.shape != p.shape:
                raise ValueError(f"cotangent shape {u.shape} != input shape {p.shape}")
            return K.pb_vjp(u[None, :], p[None, :], pmax, np.array([d]),
                            np.array([eta]), np.array([branch], dtype=np.int8))[0]
        p, pmax, rmax, a_up, a_dn, up, delta, d_up, d_dn, dbranch = self._saved
        if u.shape != p.shape:
            raise ValueError(f"cotangent shape {u.shape} != input shape {p.shape}")
        return K.rr_vjp(u[None, :], p[None, :], pmax, rmax, np.array([a_up]),
                        np.array([a_dn]), up[None, :], np.array([delta]),
                        np.array([d_up]), np.array([d_dn]),
                        np.array([dbranch], dtype=np.int8))[0]


def power_balance_repair(p: np.ndarray, ctx: RepairContext,
                         validate: bool = True) -> tuple[np.ndarray, LayerJacobianHandle]:
    """Repair total power balance; returns (repaired dispatch, VJP handle)."""
    ptilde, eta, branch, err = K.pb_forward_1d(p, ctx.p_max, ctx.demand_total, validate)
    if err == 1:
        raise RepairContractError("input dispatch outside [0, p_max] beyond 1e-9")
    return ptilde, LayerJacobianHandle(
        "power_balance", (p, ctx.p_max, ctx.demand_total, eta, branch))


def power_balance_vjp(handle: LayerJacobianHandle, cotangent: np.ndarray) -> np.ndarray:
    return handle.vjp(cotangent)


def reserve_repair(p: np.ndarray, ctx: RepairContext,
                   validate: bool = True) -> tuple[np.ndarray, LayerJacobianHandle]:
    """Repair reserve feasibility on the balance hyperplane (Algorithm form)."""
    ptilde, a_up, a_dn, up, delta, d_up, d_dn, dbranch, err = K.rr_forward_1d(
        p, ctx.p_max, ctx.r_max, ctx.reserve_req, ctx.demand_total, validate)
    if err == 1:
        raise RepairContractError("input dispatch outside [0, p_max] beyond 1e-9")
    if err == 2:
        raise RepairContractError("input dispatch off the balance hyperplane beyond 1e-9")
    return ptilde, LayerJacobianHandle(
        "reserve", (p, ctx.p_max, ctx.r_max, a_up, a_dn, up, delta, d_up, d_dn, dbranch))


def reserve_repair_vjp(handle: LayerJacobianHandle, cotangent: np.ndarray) -> np.ndarray:
    return handle.vjp(cotangent)


def recover_reserves(p: np.ndarray, ctx: RepairContext) -> np.ndarray:
    """Reserve allocation maximizing total reserves for a fixed dispatch."""
    return np.minimum(ctx.r_max, ctx.p_max - p)


def generalized_simplex_repair(x: np.ndarray, lower: np.ndarray, upper: np.ndarray,
                               a: np.ndarray, b: float) -> np.ndarray:
    """Repair onto {lower <= y <= upper, a.y = b} by the same convex scheme.

    Coordinates with negative weights are handled by a sign flip; zero
    weights are rejected because the corresponding coordinate cannot move
    the constraint.
    """
    x = np.asarray(x, dtype=np.float64)
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if (a == 0.0).any():
        raise ValueError("weight vector must have no zero entries")
    if ((x < lower - 1e-9) | (x > upper + 1e-9)).any():
        raise RepairContractError("input outside [lower, upper] beyond 1e-9")

    flip = a < 0.0
    sign = np.where(flip, -1.0, 1.0)
    xf = sign * x
    lf = np.where(flip, -upper, lower)
    uf = np.where(flip, -lower, upper)
    af = a * sign

    s = float(af @ xf)
    if s < b:
        denom = float(af @ uf) - s
        eta = 1.0 if denom <= 0.0 else min(1.0, max(0.0, (b - s) / denom))
        yf = xf + eta * (uf - xf)
    else:
        denom = s - float(af @ lf)
        eta = 1.0 if denom <= 0.0 else min(1.0, max(0.0, (s - b) / denom))
        yf = xf + eta * (lf - xf)
    yf = np.clip(yf, lf, uf)
    return sign * yf


@dataclass(frozen=True)
class Certificate:
    feasible: bool
    witness: str | None = None


def feasibility_certificate(ctx: RepairContext, tol: float = 1e-9) -> Certificate:
    """Decide dispatch-with-reserves feasibility by running the repair chain.

    Evaluates the reserve repair on an arbitrary balanced point (the repaired
    zero vector) and checks whether the recoverable reserves meet the
    requirement.  The witness names the closed-form condition that failed.
    """
    cap = float(ctx.p_max.sum())
    d = ctx.demand_total
    scale = max(1.0, abs(d), abs(ctx.reserve_req))
    if d < -tol * scale:
        return Certificate(False, "D < 0")
    if d > cap + tol * scale:
        return Certificate(False, "D > sum(p_max)")
    p0, _ = power_balance_repair(np.zeros_like(ctx.p_max), ctx, validate=False)
    q, _ = reserve_repair(p0, ctx, validate=False)
    recoverable = float(np.minimum(ctx.r_max, ctx.p_max - q).sum())
    if recoverable >= ctx.reserve_req - tol * scale:
        return Certificate(True)
    if cap - d < ctx.reserve_req:
        return Certificate(False, "sum(p_max) - D < R")
    return Certificate(False, "sum(r_max) < R")


# ---------------------------------------------------------------------------
# batched entry points used by the training pipeline
# ---------------------------------------------------------------------------


def power_balance_repair_batch(p: np.ndarray, pmax: np.ndarray, d: np.ndarray):
    """Batched forward; returns (ptilde, saved) where saved feeds the VJP."""
    ptilde, eta, branch = K.pb_forward(p, pmax, d)
    return ptilde, (p, pmax, d, eta, branch)


def power_balance_vjp_batch(saved, u: np.ndarray) -> np.ndarray:
    return K.pb_vjp(u, *saved)


def reserve_repair_batch(p: np.ndarray, pmax: np.ndarray, rmax: np.ndarray,
                         r_req: np.ndarray):
    ptilde, a_up, a_dn, up, delta, d_up, d_dn, dbranch = K.rr_forward(p, pmax, rmax, r_req)
    return ptilde, (p, pmax, rmax, a_up, a_dn, up, delta, d_up, d_dn, dbranch)


def reserve_repair_vjp_batch(saved, u: np.ndarray) -> np.ndarray:
    return K.rr_vjp(u, *saved)
