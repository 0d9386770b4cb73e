"""Hot numeric kernels for the repair layers.

Two implementations live side by side: numba ``@njit`` kernels (default when
numba imports) and vectorized numpy fallbacks.  Set ``EDPROXY_NO_NUMBA=1`` to
force the numpy path; ``ed bench-repair`` reports timings for both.

Single-instance (1-D) forward kernels fold the input-contract check into the
main pass and return an error code instead of raising, so the public wrappers
stay thin.  Batch kernels skip validation: inside a training pipeline the
input is produced by a sigmoid scaling and satisfies the hypercube contract
by construction.

Branch codes for the power-balance layer forward pass:
  0  shortage: convex combination toward p_max
  1  surplus: uniform scaling toward zero
  2  clamped at p_max (demand at or above total capacity; zero Jacobian)
  3  clamped at zero (demand non-positive; zero Jacobian)

Delta-branch codes for the reserve layer (active argument of
max(0, min(dR, dUp, dDn))):  0 = dR, 1 = dUp, 2 = dDn, 3 = the zero branch.

Error codes: 0 = ok, 1 = input outside bounds, 2 = input off the balance
hyperplane.
"""

from __future__ import annotations

import os

import numpy as np

_FORCE_NUMPY = os.environ.get("EDPROXY_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _FORCE_NUMPY:
        raise ImportError("numpy backend forced via EDPROXY_NO_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

    def njit(*args, **kwargs):  # no-op decorator when numba is unavailable
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


BACKEND = "numba" if HAS_NUMBA else "numpy"

CONTRACT_TOL = 1e-9

PB_SHORTAGE, PB_SURPLUS, PB_CLAMP_MAX, PB_CLAMP_ZERO = 0, 1, 2, 3
RR_DR, RR_DUP, RR_DDN, RR_ZERO = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# power balance layer: single instance
# ---------------------------------------------------------------------------


@njit(cache=True)
def _nb_pb_forward_1d(p, pmax, d, validate):
    n = p.shape[0]
    out = np.empty(n)
    s = 0.0
    cap = 0.0
    err = 0
    for i in range(n):
        if validate and (p[i] < -CONTRACT_TOL or p[i] > pmax[i] + CONTRACT_TOL):
            err = 1
        s += p[i]
        cap += pmax[i]
    if err != 0:
        return out, 1.0, np.int8(0), err
    if s < d:
        denom = cap - s
        if denom <= 0.0 or d >= cap:
            for i in range(n):
                out[i] = pmax[i]
            return out, 1.0, np.int8(2), 0
        eta = (d - s) / denom
        for i in range(n):
            v = p[i] + eta * (pmax[i] - p[i])
            if v > pmax[i]:
                v = pmax[i]
            elif v < 0.0:
                v = 0.0
            out[i] = v
        return out, eta, np.int8(0), 0
    if s <= 0.0 or d <= 0.0:
        for i in range(n):
            out[i] = 0.0
        return out, 1.0, np.int8(3), 0
    eta = (s - d) / s
    keep = 1.0 - eta
    for i in range(n):
        v = keep * p[i]
        if v > pmax[i]:
            v = pmax[i]
        elif v < 0.0:
            v = 0.0
        out[i] = v
    return out, eta, np.int8(1), 0


def _np_pb_forward_1d(p, pmax, d, validate):
    if validate and ((p < -CONTRACT_TOL) | (p > pmax + CONTRACT_TOL)).any():
        return p, 1.0, np.int8(0), 1
    s = float(p.sum())
    cap = float(pmax.sum())
    if s < d:
        denom = cap - s
        if denom <= 0.0 or d >= cap:
            return pmax.copy(), 1.0, np.int8(PB_CLAMP_MAX), 0
        eta = (d - s) / denom
        out = np.clip(p + eta * (pmax - p), 0.0, pmax)
        return out, eta, np.int8(PB_SHORTAGE), 0
    if s <= 0.0 or d <= 0.0:
        return np.zeros_like(p), 1.0, np.int8(PB_CLAMP_ZERO), 0
    eta = (s - d) / s
    out = np.clip((1.0 - eta) * p, 0.0, pmax)
    return out, eta, np.int8(PB_SURPLUS), 0


# direct alias: the 1-D forward sits on the latency-critical repair path
pb_forward_1d = _nb_pb_forward_1d if HAS_NUMBA else _np_pb_forward_1d


# ---------------------------------------------------------------------------
# power balance layer: batch
# ---------------------------------------------------------------------------


def _np_pb_forward(p, pmax, d):
    """Batched forward. p: (B,n), pmax: (n,), d: (B,). Returns (ptilde, eta, branch)."""
    s = p.sum(axis=1)
    cap = float(pmax.sum())
    eta = np.ones_like(s)
    branch = np.empty(s.shape, dtype=np.int8)

    short = s < d
    denom_up = cap - s
    ok_up = short & (denom_up > 0.0) & (d < cap)
    clamp_up = short & ~ok_up
    eta[ok_up] = (d[ok_up] - s[ok_up]) / denom_up[ok_up]

    surplus = ~short
    ok_dn = surplus & (s > 0.0) & (d > 0.0)
    clamp_dn = surplus & ~ok_dn
    eta[ok_dn] = (s[ok_dn] - d[ok_dn]) / s[ok_dn]

    ptilde = np.empty_like(p)
    ptilde[ok_up] = p[ok_up] + eta[ok_up, None] * (pmax[None, :] - p[ok_up])
    ptilde[ok_dn] = (1.0 - eta[ok_dn, None]) * p[ok_dn]
    ptilde[clamp_up] = pmax
    ptilde[clamp_dn] = 0.0
    np.clip(ptilde, 0.0, pmax[None, :], out=ptilde)

    branch[ok_up] = PB_SHORTAGE
    branch[ok_dn] = PB_SURPLUS
    branch[clamp_up] = PB_CLAMP_MAX
    branch[clamp_dn] = PB_CLAMP_ZERO
    return ptilde, eta, branch


@njit(cache=True)
def _nb_pb_forward_batch(p, pmax, d):
    b, n = p.shape
    out = np.empty((b, n))
    eta = np.empty(b)
    branch = np.empty(b, dtype=np.int8)
    for k in range(b):
        row, eta[k], branch[k], _ = _nb_pb_forward_1d(p[k], pmax, d[k], False)
        out[k] = row
    return out, eta, branch


def _np_pb_vjp(u, p, pmax, d, eta, branch):
    s = p.sum(axis=1)
    cap = float(pmax.sum())
    out = np.zeros_like(u)

    m = branch == PB_SHORTAGE
    if m.any():
        denom = cap - s[m]
        kappa = (d[m] - cap) / (denom * denom)
        dot = np.einsum("ij,ij->i", u[m], pmax[None, :] - p[m])
        out[m] = (1.0 - eta[m])[:, None] * u[m] + (kappa * dot)[:, None]

    m = branch == PB_SURPLUS
    if m.any():
        ratio = d[m] / s[m]
        dot = np.einsum("ij,ij->i", u[m], p[m])
        out[m] = ratio[:, None] * u[m] - (dot * d[m] / (s[m] * s[m]))[:, None]
    return out


@njit(cache=True)
def _nb_pb_vjp_batch(u, p, pmax, d, eta, branch):
    b, n = p.shape
    out = np.zeros((b, n))
    cap = 0.0
    for i in range(n):
        cap += pmax[i]
    for k in range(b):
        br = branch[k]
        if br >= 2:
            continue
        s = 0.0
        for i in range(n):
            s += p[k, i]
        if br == 0:
            denom = cap - s
            kappa = (d[k] - cap) / (denom * denom)
            dot = 0.0
            for i in range(n):
                dot += u[k, i] * (pmax[i] - p[k, i])
            coef = kappa * dot
            keep = 1.0 - eta[k]
            for i in range(n):
                out[k, i] = keep * u[k, i] + coef
        else:
            ratio = d[k] / s
            dot = 0.0
            for i in range(n):
                dot += u[k, i] * p[k, i]
            coef = dot * d[k] / (s * s)
            for i in range(n):
                out[k, i] = ratio * u[k, i] - coef
    return out


def pb_forward(p, pmax, d):
    if HAS_NUMBA:
        return _nb_pb_forward_batch(p, pmax, d)
    return _np_pb_forward(p, pmax, d)


def pb_vjp(u, p, pmax, d, eta, branch):
    if HAS_NUMBA:
        return _nb_pb_vjp_batch(u, p, pmax, d, eta, branch)
    return _np_pb_vjp(u, p, pmax, d, eta, branch)


# ---------------------------------------------------------------------------
# reserve repair layer: single instance
# ---------------------------------------------------------------------------


@njit(cache=True)
def _nb_rr_forward_1d(p, pmax, rmax, r_req, d, validate):
    n = p.shape[0]
    out = np.empty(n)
    up = np.empty(n, dtype=np.bool_)
    s = 0.0
    d_r = r_req
    d_up = 0.0
    d_dn = 0.0
    err = 0
    for i in range(n):
        if validate and (p[i] < -CONTRACT_TOL or p[i] > pmax[i] + CONTRACT_TOL):
            err = 1
        s += p[i]
        t_i = pmax[i] - rmax[i]
        head = pmax[i] - p[i]
        d_r -= rmax[i] if rmax[i] < head else head
        if p[i] <= t_i:
            up[i] = True
            d_up += t_i - p[i]
        else:
            up[i] = False
            d_dn += p[i] - t_i
    if err == 0 and validate:
        scale = 1.0 if abs(d) < 1.0 else abs(d)
        if abs(s - d) > CONTRACT_TOL * scale:
            err = 2
    if err != 0:
        return out, 0.0, 0.0, up, 0.0, d_up, d_dn, np.int8(3), err
    dmin = d_r
    which = np.int8(0)
    if d_up < dmin:
        dmin = d_up
        which = np.int8(1)
    if d_dn < dmin:
        dmin = d_dn
        which = np.int8(2)
    if dmin <= 0.0:
        delta = 0.0
        which = np.int8(3)
    else:
        delta = dmin
    a_up = delta / d_up if d_up > 0.0 else 0.0
    a_dn = delta / d_dn if d_dn > 0.0 else 0.0
    for i in range(n):
        t_i = pmax[i] - rmax[i]
        a = a_up if up[i] else a_dn
        v = p[i] + a * (t_i - p[i])
        if v > pmax[i]:
            v = pmax[i]
        elif v < 0.0:
            v = 0.0
        out[i] = v
    return out, a_up, a_dn, up, delta, d_up, d_dn, which, 0


def _np_rr_forward_1d(p, pmax, rmax, r_req, d, validate):
    up = np.empty(p.shape, dtype=bool)
    if validate:
        if ((p < -CONTRACT_TOL) | (p > pmax + CONTRACT_TOL)).any():
            return p, 0.0, 0.0, up, 0.0, 0.0, 0.0, np.int8(3), 1
        if abs(p.sum() - d) > CONTRACT_TOL * max(1.0, abs(d)):
            return p, 0.0, 0.0, up, 0.0, 0.0, 0.0, np.int8(3), 2
    out, a_up, a_dn, up, delta, d_up, d_dn, dbranch = _np_rr_forward(
        p[None, :], pmax, rmax, np.array([r_req]))
    return (out[0], float(a_up[0]), float(a_dn[0]), up[0], float(delta[0]),
            float(d_up[0]), float(d_dn[0]), dbranch[0], 0)


rr_forward_1d = _nb_rr_forward_1d if HAS_NUMBA else _np_rr_forward_1d


# ---------------------------------------------------------------------------
# reserve repair layer: batch
# ---------------------------------------------------------------------------


def _np_rr_forward(p, pmax, rmax, r_req):
    t = pmax - rmax
    up = p <= t[None, :]
    d_r = r_req - np.minimum(rmax[None, :], pmax[None, :] - p).sum(axis=1)
    d_up = np.where(up, t[None, :] - p, 0.0).sum(axis=1)
    d_dn = np.where(up, 0.0, p - t[None, :]).sum(axis=1)

    stacked = np.stack([d_r, d_up, d_dn], axis=0)
    which = np.argmin(stacked, axis=0).astype(np.int8)
    dmin = stacked[which, np.arange(p.shape[0])]
    delta = np.maximum(dmin, 0.0)
    dbranch = np.where(dmin <= 0.0, np.int8(RR_ZERO), which)

    alpha_up = np.where(d_up > 0.0, delta / np.where(d_up > 0.0, d_up, 1.0), 0.0)
    alpha_dn = np.where(d_dn > 0.0, delta / np.where(d_dn > 0.0, d_dn, 1.0), 0.0)
    alpha = np.where(up, alpha_up[:, None], alpha_dn[:, None])
    ptilde = p + alpha * (t[None, :] - p)
    np.clip(ptilde, 0.0, pmax[None, :], out=ptilde)
    return ptilde, alpha_up, alpha_dn, up, delta, d_up, d_dn, dbranch


@njit(cache=True)
def _nb_rr_forward_batch(p, pmax, rmax, r_req):
    b, n = p.shape
    out = np.empty((b, n))
    up = np.empty((b, n), dtype=np.bool_)
    a_up = np.empty(b)
    a_dn = np.empty(b)
    delta = np.empty(b)
    d_up = np.empty(b)
    d_dn = np.empty(b)
    dbranch = np.empty(b, dtype=np.int8)
    for k in range(b):
        row, a_up[k], a_dn[k], urow, delta[k], d_up[k], d_dn[k], dbranch[k], _ = (
            _nb_rr_forward_1d(p[k], pmax, rmax, r_req[k], 0.0, False))
        out[k] = row
        up[k] = urow
    return out, a_up, a_dn, up, delta, d_up, d_dn, dbranch


def _np_rr_vjp(u, p, pmax, rmax, a_up, a_dn, up, delta, d_up, d_dn, dbranch):
    t = pmax - rmax
    dn = ~up
    w_all = u * (t[None, :] - p)
    w_up = np.where(up, w_all, 0.0).sum(axis=1)
    w_dn = np.where(dn, w_all, 0.0).sum(axis=1)

    g_delta = np.zeros_like(p)
    m = dbranch == RR_DR
    g_delta[m] = np.where(dn[m], 1.0, 0.0)
    m = dbranch == RR_DUP
    g_delta[m] = np.where(up[m], -1.0, 0.0)
    m = dbranch == RR_DDN
    g_delta[m] = np.where(dn[m], 1.0, 0.0)

    g_dup = np.where(up, -1.0, 0.0)
    g_ddn = np.where(dn, 1.0, 0.0)

    out = np.where(up, (1.0 - a_up[:, None]) * u, (1.0 - a_dn[:, None]) * u)
    safe_up = np.where(d_up > 0.0, d_up, 1.0)
    safe_dn = np.where(d_dn > 0.0, d_dn, 1.0)
    has_up = (d_up > 0.0)[:, None]
    has_dn = (d_dn > 0.0)[:, None]
    dalpha_up = (g_delta * safe_up[:, None] - delta[:, None] * g_dup) / (safe_up ** 2)[:, None]
    dalpha_dn = (g_delta * safe_dn[:, None] - delta[:, None] * g_ddn) / (safe_dn ** 2)[:, None]
    out += np.where(has_up, w_up[:, None] * dalpha_up, 0.0)
    out += np.where(has_dn, w_dn[:, None] * dalpha_dn, 0.0)
    return out


@njit(cache=True)
def _nb_rr_vjp_batch(u, p, pmax, rmax, a_up, a_dn, up, delta, d_up, d_dn, dbranch):
    b, n = p.shape
    out = np.zeros((b, n))
    for k in range(b):
        w_up = 0.0
        w_dn = 0.0
        for i in range(n):
            w = u[k, i] * (pmax[i] - rmax[i] - p[k, i])
            if up[k, i]:
                w_up += w
            else:
                w_dn += w
        br = dbranch[k]
        inv_up2 = 1.0 / (d_up[k] * d_up[k]) if d_up[k] > 0.0 else 0.0
        inv_dn2 = 1.0 / (d_dn[k] * d_dn[k]) if d_dn[k] > 0.0 else 0.0
        for i in range(n):
            if up[k, i]:
                g_delta = -1.0 if br == 1 else 0.0
                g_dup = -1.0
                g_ddn = 0.0
                acc = (1.0 - a_up[k]) * u[k, i]
            else:
                g_delta = 1.0 if (br == 0 or br == 2) else 0.0
                g_dup = 0.0
                g_ddn = 1.0
                acc = (1.0 - a_dn[k]) * u[k, i]
            if d_up[k] > 0.0:
                acc += w_up * (g_delta * d_up[k] - delta[k] * g_dup) * inv_up2
            if d_dn[k] > 0.0:
                acc += w_dn * (g_delta * d_dn[k] - delta[k] * g_ddn) * inv_dn2
            out[k, i] = acc
    return out


def rr_forward(p, pmax, rmax, r_req):
    if HAS_NUMBA:
        return _nb_rr_forward_batch(p, pmax, rmax, r_req)
    return _np_rr_forward(p, pmax, rmax, r_req)


def rr_vjp(u, p, pmax, rmax, a_up, a_dn, up, delta, d_up, d_dn, dbranch):
    if HAS_NUMBA:
        return _nb_rr_vjp_batch(u, p, pmax, rmax, a_up, a_dn, up, delta, d_up, d_dn, dbranch)
    return _np_rr_vjp(u, p, pmax, rmax, a_up, a_dn, up, delta, d_up, d_dn, dbranch)


# ---------------------------------------------------------------------------
# hypersimplex projection (intentionally numpy-only: this is the reference
# baseline the repair layers are benchmarked against, and the inner step of
# the Dykstra projection; clarity over latency)
# ---------------------------------------------------------------------------


def project_hypersimplex_core(p, pmax, d, tol=1e-10, max_iter=200):
    lo = -float(p.max(initial=0.0))
    hi = float((pmax - p).max(initial=0.0))
    x = np.clip(p, 0.0, pmax)
    for _ in range(max_iter):
        nu = 0.5 * (lo + hi)
        x = np.clip(p + nu, 0.0, pmax)
        s = float(x.sum())
        if abs(s - d) <= tol:
            break
        if s < d:
            lo = nu
        else:
            hi = nu
    # polish: spread the residual over strictly interior coordinates so KKT
    # stationarity (uniform shift on the inactive set) holds to full precision
    for _ in range(3):
        s = float(x.sum())
        if abs(s - d) <= 1e-15 * max(1.0, abs(d)):
            break
        interior = (x > 0.0) & (x < pmax)
        n_int = int(interior.sum())
        if n_int == 0:
            break
        x[interior] += (d - s) / n_int
        np.clip(x, 0.0, pmax, out=x)
    return x
