"""Losses, proxy architectures, and the training loop.

Supported architectures, all sharing the same MLP trunk:

* ``dnn``: sigmoid-scaled dispatch, no feasibility handling.
* ``deepopf``: predicts all but the first generator; the first is completed
  from the balance equation (may violate its bounds).
* ``dc3``: completion plus a fixed number of unrolled gradient steps on the
  squared constraint violation, differentiated through.
* ``e2elr``: sigmoid-scaled dispatch passed through the closed-form repair
  layers (balance, then reserves when in reserve mode).

Losses: supervised (mean absolute error plus constraint penalty) and
self-supervised (objective value of the prediction plus constraint penalty).
The penalty weight is forced to zero for e2elr, whose output satisfies the
hard constraints by construction.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import network, repair
from .core import EDInstance, objective_value, reserve_shortage, thermal_violations
from .grid import SystemCase
from .network import MLPParams, TrainedProxy

logger = logging.getLogger(__name__)

ARCHS = ("dnn", "deepopf", "dc3", "e2elr")

# lambda grids: SSL {1, 0.1}, SL {1e-3, 1e-4, 1e-5}; desk-scale defaults pick
# the geometric midpoint of each grid instead of sweeping
DEFAULT_LAMBDA_SSL = 10.0 ** -0.5
DEFAULT_LAMBDA_SL = 1e-4


@dataclass
class TrainConfig:
    arch: str = "e2elr"
    loss_kind: str = "ssl"            # sl | ssl
    lam: float | None = None          # None -> default for the loss kind (0 for e2elr)
    mu: float | None = None           # SL thermal weight; defaults to lam
    lr: float = 1e-2
    weight_decay: float = 1e-6
    lr_decay: float = 0.1
    lr_patience: int = 10
    early_stop_patience: int = 20
    max_epochs: int = 200
    batch_size: int = 64
    eval_batch_size: int = 256
    hidden: int = 64
    n_layers: int = 3                 # dense layers including the output layer
    dropout: float = 0.2
    seed: int = 0
    reserve_mode: bool = False
    shuffle: bool = True
    dc3_train_iters: int = 50
    dc3_test_iters: int = 200
    dc3_step: float = 1e-4
    max_seconds: float | None = None

    def __post_init__(self):
        if self.lam is not None and self.lam < 0:
            raise ValueError("penalty weight must be nonnegative")
        if self.dc3_step <= 0:
            raise ValueError("unrolled gradient step size must be positive")
        if min(self.batch_size, self.eval_batch_size) < 1:
            raise ValueError("batch sizes must be at least 1")

    def resolved_lambda(self) -> float:
        if self.arch == "e2elr":
            return 0.0
        if self.lam is not None:
            return self.lam
        return DEFAULT_LAMBDA_SSL if self.loss_kind == "ssl" else DEFAULT_LAMBDA_SL

    def resolved_mu(self) -> float:
        if self.mu is not None:
            return self.mu
        if self.loss_kind == "sl":
            return self.lam if self.lam is not None else DEFAULT_LAMBDA_SL
        return 0.0


@dataclass
class CaseBundle:
    """Arrays for fast batched evaluation of one case's instances."""

    case_ref: str
    p_max: np.ndarray
    r_max: np.ndarray
    cost: np.ndarray
    psi: np.ndarray          # (n_limited_branches, G)
    phi: np.ndarray          # (n_limited_branches, N)
    f_min: np.ndarray
    f_max: np.ndarray
    n_bus: int
    m_th: float = 1500.0
    m_pb: float = 3500.0
    m_r: float = 1100.0

    @classmethod
    def from_case(cls, case: SystemCase, case_ref: str = "case") -> "CaseBundle":
        n_gen = len(case.generators)
        fmin, fmax = case.flow_limits()
        if case.ptdf is not None and len(case.branches):
            limited = np.flatnonzero(np.isfinite(fmax))
            psi = case.ptdf[np.ix_(limited, case.gen_bus_positions())]
            phi = case.ptdf[limited]
            fmin, fmax = fmin[limited], fmax[limited]
        else:
            psi = np.zeros((0, n_gen))
            phi = np.zeros((0, len(case.buses)))
            fmin, fmax = np.zeros(0), np.zeros(0)
        return cls(case_ref=case_ref, p_max=case.p_max(), r_max=case.r_max(),
                   cost=case.cost_linear(), psi=psi, phi=phi, f_min=fmin, f_max=fmax,
                   n_bus=len(case.buses))

    def flows(self, p: np.ndarray, dmat: np.ndarray) -> np.ndarray:
        if self.psi.shape[0] == 0:
            return np.zeros((p.shape[0], 0))
        return p @ self.psi.T - dmat @ self.phi.T


@dataclass
class Splits:
    """Dataset splits as dense arrays: demand (B,N), reserve (B,), labels (B,G) or None."""

    dmat: np.ndarray
    rvec: np.ndarray
    labels: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.dmat.shape[0]


# ---------------------------------------------------------------------------
# scalar losses on single instances (reference formulas)
# ---------------------------------------------------------------------------


def sl_loss(p_hat: np.ndarray, p_star: np.ndarray | None, inst: EDInstance,
            lam: float, mu: float) -> float:
    """Supervised loss: per-generator MAE + lam * constraint penalty
    + mu * thermal penalty."""
    if p_star is None:
        raise ValueError("supervised loss requires a labeled optimum")
    mae = float(np.abs(p_hat - p_star).mean())
    penalty = (inst.m_pb * abs(inst.demand_total - float(p_hat.sum()))
               + inst.m_r * reserve_shortage(inst, p_hat))
    thermal = inst.m_th * float(thermal_violations(inst, p_hat).sum())
    return mae + lam * penalty + mu * thermal


def ssl_loss(p_hat: np.ndarray, inst: EDInstance, lam: float) -> float:
    """Self-supervised loss: objective of the prediction + lam * penalty."""
    penalty = (inst.m_pb * abs(inst.demand_total - float(p_hat.sum()))
               + inst.m_r * reserve_shortage(inst, p_hat))
    return objective_value(inst, p_hat) + lam * penalty


# ---------------------------------------------------------------------------
# batched loss pieces (numpy, used for validation and by the taped versions)
# ---------------------------------------------------------------------------


def _batched_penalty(bundle: CaseBundle, p: np.ndarray, dmat: np.ndarray,
                     rvec: np.ndarray) -> np.ndarray:
    balance = np.abs(p.sum(axis=1) - dmat.sum(axis=1))
    recoverable = np.minimum(bundle.r_max, bundle.p_max - p).sum(axis=1)
    short = np.maximum(rvec - recoverable, 0.0)
    return bundle.m_pb * balance + bundle.m_r * short


def _batched_thermal(bundle: CaseBundle, p: np.ndarray, dmat: np.ndarray) -> np.ndarray:
    if bundle.psi.shape[0] == 0:
        return np.zeros(p.shape[0])
    flow = bundle.flows(p, dmat)
    xi = np.maximum(0.0, np.maximum(flow - bundle.f_max, bundle.f_min - flow))
    return xi.sum(axis=1)


def batched_loss(bundle: CaseBundle, p: np.ndarray, dmat: np.ndarray, rvec: np.ndarray,
                 labels: np.ndarray | None, loss_kind: str, lam: float, mu: float) -> float:
    if loss_kind == "ssl":
        per = (p @ bundle.cost + bundle.m_th * _batched_thermal(bundle, p, dmat)
               + lam * _batched_penalty(bundle, p, dmat, rvec))
    else:
        if labels is None:
            raise ValueError("supervised loss requires labels")
        per = (np.abs(p - labels).mean(axis=1)
               + lam * _batched_penalty(bundle, p, dmat, rvec)
               + mu * bundle.m_th * _batched_thermal(bundle, p, dmat))
    return float(per.mean())


# ---------------------------------------------------------------------------
# baseline building blocks
# ---------------------------------------------------------------------------


def deepopf_complete(p_ind: np.ndarray, demand_total: float) -> np.ndarray:
    """Recover the dependent (first) generator from the balance equation."""
    return np.concatenate([[demand_total - float(p_ind.sum())], p_ind])


def _dc3_forward(q0: np.ndarray, p_max: np.ndarray, r_max: np.ndarray,
                 rvec: np.ndarray, dvec: np.ndarray, iters: int, rho: float,
                 save: bool = False):
    """Unrolled gradient descent on the squared constraint violation.

    The violation is scalar per instance: total upper-bound excess plus
    reserve shortfall, with the dependent generator eliminated through the
    balance equation.  Active sets are treated as locally constant, making
    each step's Jacobian I - 2*rho*h h^T with h the violation gradient.
    """
    q = q0.copy()
    hs: list[np.ndarray] = []
    for _ in range(iters):
        p0 = dvec - q.sum(axis=1)
        pfull = np.concatenate([p0[:, None], q], axis=1)
        over = pfull - p_max
        g_val = np.maximum(over, 0.0).sum(axis=1)
        recov = np.minimum(r_max, p_max - pfull)
        short = rvec - recov.sum(axis=1)
        g_val = g_val + np.maximum(short, 0.0)
        gp = (over > 0.0).astype(np.float64)
        gp += (short > 0.0)[:, None] * (p_max - pfull < r_max)
        h = gp[:, 1:] - gp[:, 0:1]
        if save:
            hs.append(h)
        q = q - (2.0 * rho) * g_val[:, None] * h
    return q, hs


def dc3_correct(p0: np.ndarray, inst: EDInstance, iters: int, rho: float) -> np.ndarray:
    """Inequality-correction steps for a completed dispatch vector."""
    q0 = p0[None, 1:]
    q, _ = _dc3_forward(q0, inst.p_max, inst.r_max,
                        np.array([inst.reserve_req]), np.array([inst.demand_total]),
                        iters, rho)
    return deepopf_complete(q[0], inst.demand_total)


# ---------------------------------------------------------------------------
# taped prediction pipelines
# ---------------------------------------------------------------------------


def _pb_op(tape, p_var, p_max, dvec):
    out, saved = repair.power_balance_repair_batch(p_var.value, p_max, dvec)
    return ad.custom(tape, out, [p_var],
                     lambda g: (repair.power_balance_vjp_batch(saved, g),), "pb_repair")


def _rr_op(tape, p_var, p_max, r_max, rvec):
    out, saved = repair.reserve_repair_batch(p_var.value, p_max, r_max, rvec)
    return ad.custom(tape, out, [p_var],
                     lambda g: (repair.reserve_repair_vjp_batch(saved, g),), "rr_repair")


def _complete_op(tape, q_var, dvec):
    qv = q_var.value
    out = np.concatenate([(dvec - qv.sum(axis=1))[:, None], qv], axis=1)

    def vjp(g):
        return (g[:, 1:] - g[:, 0:1],)

    return ad.custom(tape, out, [q_var], vjp, "complete")


def _dc3_op(tape, q_var, p_max, r_max, rvec, dvec, iters, rho):
    q_out, hs = _dc3_forward(q_var.value, p_max, r_max, rvec, dvec, iters, rho, save=True)

    def vjp(g):
        u = g.copy()
        for h in reversed(hs):
            dot = (u * h).sum(axis=1, keepdims=True)
            u -= (2.0 * rho) * dot * h
        return (u,)

    return ad.custom(tape, q_out, [q_var], vjp, "dc3")


def build_features(dmat: np.ndarray, rvec: np.ndarray, reserve_mode: bool) -> np.ndarray:
    if reserve_mode:
        return np.concatenate([dmat, rvec[:, None]], axis=1)
    return dmat


def predict_train(tape, params: MLPParams, arch: str, bundle: CaseBundle,
                  feats: np.ndarray, dvec: np.ndarray, rvec: np.ndarray,
                  rng, reserve_mode: bool, cfg: TrainConfig,
                  update_running: bool = True):
    """Taped forward for one minibatch; returns (dispatch Var, param leaves)."""
    z, leaves = network.forward_mlp_train(params, feats, tape, rng,
                                          update_running=update_running)
    if arch in ("dnn", "e2elr"):
        p = ad.mul(z, bundle.p_max)
        if arch == "e2elr":
            p = _pb_op(tape, p, bundle.p_max, dvec)
            if reserve_mode:
                p = _rr_op(tape, p, bundle.p_max, bundle.r_max, rvec)
        return p, leaves
    # completion architectures predict all generators but the first
    q = ad.mul(z, bundle.p_max[1:])
    if arch == "dc3":
        q = _dc3_op(tape, q, bundle.p_max, bundle.r_max, rvec, dvec,
                    cfg.dc3_train_iters, cfg.dc3_step)
    return _complete_op(tape, q, dvec), leaves


def predict_eval(proxy: TrainedProxy, bundle: CaseBundle, dmat: np.ndarray,
                 rvec: np.ndarray, dc3_iters: int = 200, dc3_step: float = 1e-4) -> np.ndarray:
    """Deterministic inference for a batch of instances."""
    reserve_mode = proxy.repair_mode == "balance+reserve" or proxy.meta.get("reserve_mode", False)
    feats = proxy.normalize_input(build_features(dmat, rvec, reserve_mode))
    z = network.forward_mlp_eval(proxy.params, feats)
    dvec = dmat.sum(axis=1)
    if proxy.arch in ("dnn", "e2elr"):
        p = z * bundle.p_max
        if proxy.arch == "e2elr":
            p, _ = repair.power_balance_repair_batch(p, bundle.p_max, dvec)
            if reserve_mode:
                p, _ = repair.reserve_repair_batch(p, bundle.p_max, bundle.r_max, rvec)
        return p
    q = z * bundle.p_max[1:]
    if proxy.arch == "dc3":
        q, _ = _dc3_forward(q, bundle.p_max, bundle.r_max, rvec, dvec, dc3_iters, dc3_step)
    return np.concatenate([(dvec - q.sum(axis=1))[:, None], q], axis=1)


def _loss_var(tape, p_var, bundle: CaseBundle, dmat, dvec, rvec, labels,
              loss_kind: str, lam: float, mu: float):
    """Taped loss; mirrors :func:`batched_loss`."""
    if loss_kind == "ssl":
        per = ad.vsum(ad.mul(p_var, bundle.cost), axis=1)
        th_w = bundle.m_th
    else:
        per = ad.vmean(ad.vabs(ad.sub(p_var, labels)), axis=1)
        th_w = mu * bundle.m_th
    if bundle.psi.shape[0] > 0 and th_w > 0.0:
        flow = ad.sub(ad.matmul(p_var, bundle.psi.T), dmat @ bundle.phi.T)
        xi = ad.add(ad.relu(ad.sub(flow, bundle.f_max)), ad.relu(ad.sub(bundle.f_min, flow)))
        per = ad.add(per, ad.mul(ad.vsum(xi, axis=1), th_w))
    if lam > 0.0:
        balance = ad.vabs(ad.sub(ad.vsum(p_var, axis=1), dvec))
        recov = ad.minimum(ad.sub(bundle.p_max, p_var), bundle.r_max)
        short = ad.relu(ad.sub(rvec, ad.vsum(recov, axis=1)))
        per = ad.add(per, ad.mul(ad.add(ad.mul(balance, bundle.m_pb),
                                        ad.mul(short, bundle.m_r)), lam))
    return ad.vmean(per)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def train(cfg: TrainConfig, bundle: CaseBundle, train_split: Splits,
          val_split: Splits) -> tuple[TrainedProxy, list[dict]]:
    """Minibatch Adam with plateau lr decay and early stopping on the
    validation loss; returns the best-validation checkpoint and the log."""
    if cfg.arch not in ARCHS:
        raise ValueError(f"unknown architecture {cfg.arch!r}")
    if train_split.n == 0 or val_split.n == 0:
        raise ValueError("empty train or validation split")
    if cfg.loss_kind == "sl" and train_split.labels is None:
        raise ValueError("supervised training requires labeled data")
    lam, mu = cfg.resolved_lambda(), cfg.resolved_mu()

    rng = np.random.default_rng(cfg.seed)
    n_gen = bundle.p_max.size
    out_dim = n_gen if cfg.arch in ("dnn", "e2elr") else n_gen - 1
    feats_train = build_features(train_split.dmat, train_split.rvec, cfg.reserve_mode)
    norm_mean = feats_train.mean(axis=0)
    std = feats_train.std(axis=0)
    norm_scale = np.where(std > 1e-12, std, 1.0)

    sizes = [feats_train.shape[1]] + [cfg.hidden] * (cfg.n_layers - 1) + [out_dim]
    params = network.init_mlp(rng, sizes, cfg.dropout)
    state = network.adam_init(params.trainable_arrays())
    repair_mode = ("balance+reserve" if cfg.reserve_mode else "balance") \
        if cfg.arch == "e2elr" else "none"

    xt = (feats_train - norm_mean) / norm_scale
    dvec_train = train_split.dmat.sum(axis=1)

    def make_proxy(p: MLPParams) -> TrainedProxy:
        return TrainedProxy(params=p, norm_mean=norm_mean, norm_scale=norm_scale,
                            arch=cfg.arch, repair_mode=repair_mode,
                            meta={"seed": cfg.seed, "case": bundle.case_ref,
                                  "loss": cfg.loss_kind, "lambda": lam, "mu": mu,
                                  "reserve_mode": cfg.reserve_mode})

    def val_loss(p: MLPParams) -> float:
        proxy = make_proxy(p)
        total, count = 0.0, 0
        for lo in range(0, val_split.n, cfg.eval_batch_size):
            sl = slice(lo, min(lo + cfg.eval_batch_size, val_split.n))
            pred = predict_eval(proxy, bundle, val_split.dmat[sl], val_split.rvec[sl],
                                cfg.dc3_test_iters, cfg.dc3_step)
            labels = None if val_split.labels is None else val_split.labels[sl]
            size = sl.stop - sl.start
            total += batched_loss(bundle, pred, val_split.dmat[sl], val_split.rvec[sl],
                                  labels, cfg.loss_kind, lam, mu) * size
            count += size
        return total / count

    log: list[dict] = []
    best_val = np.inf
    best_params = params.copy()
    lr = cfg.lr
    lr_stall = 0
    stop_stall = 0
    t_start = time.perf_counter()

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(train_split.n) if cfg.shuffle else np.arange(train_split.n)
        epoch_loss, seen = 0.0, 0
        for lo in range(0, train_split.n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            tape = ad.Tape()
            p_var, leaves = predict_train(
                tape, params, cfg.arch, bundle, xt[idx], dvec_train[idx],
                train_split.rvec[idx], rng, cfg.reserve_mode, cfg)
            labels = None if train_split.labels is None else train_split.labels[idx]
            loss = _loss_var(tape, p_var, bundle, train_split.dmat[idx], dvec_train[idx],
                             train_split.rvec[idx], labels, cfg.loss_kind, lam, mu)
            grads = ad.backward(tape, loss)
            glist = [grads.get(v) for v in leaves]
            network.adam_step(params.trainable_arrays(), glist, state, lr,
                              cfg.weight_decay)
            epoch_loss += float(loss.value) * idx.size
            seen += idx.size

        vl = val_loss(params)
        elapsed = time.perf_counter() - t_start
        log.append({"epoch": epoch, "train_loss": epoch_loss / seen, "val_loss": vl,
                    "lr": lr, "seconds": elapsed})
        if vl < best_val - 1e-12:
            best_val = vl
            best_params = params.copy()
            lr_stall = 0
            stop_stall = 0
        else:
            lr_stall += 1
            stop_stall += 1
            if lr_stall >= cfg.lr_patience:
                lr *= cfg.lr_decay
                lr_stall = 0
                logger.info("epoch %d: lr decayed to %.3g", epoch, lr)
            if stop_stall >= cfg.early_stop_patience:
                logger.info("epoch %d: early stop (no improvement for %d epochs)",
                            epoch, stop_stall)
                break
        if cfg.max_seconds is not None and elapsed > cfg.max_seconds:
            logger.info("epoch %d: wall-clock budget reached", epoch)
            break

    return make_proxy(best_params), log


# ---------------------------------------------------------------------------
# evaluation helper shared by benchmarks and tests
# ---------------------------------------------------------------------------


def instance_from_arrays(bundle: CaseBundle, d: np.ndarray, r_req: float) -> EDInstance:
    """EDInstance view of one dataset row (thermal data in limited-branch form)."""
    return EDInstance.from_flow_data(
        bundle.case_ref, d, r_req, bundle.p_max, bundle.r_max, bundle.cost,
        psi=bundle.psi, phi=bundle.phi, f_min=bundle.f_min, f_max=bundle.f_max,
        m_th=bundle.m_th, m_pb=bundle.m_pb, m_r=bundle.m_r)
