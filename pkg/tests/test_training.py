import numpy as np
import pytest

from edproxy.core import EDInstance, check_feasibility, penalized_objective
from edproxy.network import proxy_to_json
from edproxy.training import (
    CaseBundle, Splits, TrainConfig, batched_loss, dc3_correct, deepopf_complete,
    predict_eval, sl_loss, ssl_loss, train,
)


def inst2(c=(1.0, 2.0), p_max=(1.0, 1.0), r_max=None, d=(0.5, 0.5), r_req=0.0):
    p_max = np.asarray(p_max, dtype=float)
    return EDInstance(case_ref="t", d=np.asarray(d, dtype=float), reserve_req=r_req,
                      p_max=p_max,
                      r_max=p_max.copy() if r_max is None else np.asarray(r_max, float),
                      c=np.asarray(c, dtype=float))


def tiny_bundle(n=4, seed=0):
    rng = np.random.default_rng(seed)
    p_max = rng.uniform(0.5, 1.0, n)
    return CaseBundle(case_ref="tiny", p_max=p_max, r_max=0.5 * p_max,
                      cost=rng.uniform(2, 20, n), psi=np.zeros((0, n)),
                      phi=np.zeros((0, n)), f_min=np.zeros(0), f_max=np.zeros(0),
                      n_bus=n)


def tiny_splits(bundle, n_inst, seed=1, reserve=False):
    rng = np.random.default_rng(seed)
    cap = bundle.p_max.sum()
    dmat = rng.uniform(0.3, 0.6, (n_inst, bundle.n_bus)) * (cap / bundle.n_bus)
    rvec = (rng.uniform(0.2, 0.5, n_inst) * bundle.p_max.max()) if reserve \
        else np.zeros(n_inst)
    return Splits(dmat=dmat, rvec=rvec)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def test_sl_loss_zero_at_label():
    inst = inst2()
    p_star = np.array([0.6, 0.4])
    assert sl_loss(p_star, p_star, inst, lam=1.0, mu=1.0) == 0.0


def test_sl_loss_mae_component():
    inst = inst2()
    p_star = np.array([0.6, 0.4])
    p_hat = p_star + np.array([0.1, -0.1])
    assert sl_loss(p_hat, p_star, inst, lam=0.0, mu=0.0) == pytest.approx(0.1)


def test_sl_loss_balance_penalty():
    # label matches the prediction exactly; demand runs 0.01 above its sum
    p = np.array([0.6, 0.4])
    inst = inst2(d=(0.5, 0.51))
    assert sl_loss(p, p, inst, lam=0.1, mu=0.0) == pytest.approx(0.1 * 3500.0 * 0.01)


def test_sl_loss_requires_label():
    with pytest.raises(ValueError):
        sl_loss(np.zeros(2), None, inst2(), 0.0, 0.0)


def test_ssl_loss_is_objective_when_feasible():
    inst = inst2()
    assert ssl_loss(np.array([0.5, 0.5]), inst, lam=1.0) == pytest.approx(1.5)


def test_ssl_loss_penalizes_trivial_zero():
    inst = inst2(d=(0.5, 0.5))
    loss = ssl_loss(np.zeros(2), inst, lam=1.0)
    assert loss >= 3500.0 * 1.0  # lost-load penalty dominates


def test_ssl_equals_penalized_objective_for_feasible_points():
    rng = np.random.default_rng(3)
    for _ in range(20):
        inst = inst2(d=tuple(rng.uniform(0.2, 0.5, 2)))
        p = np.full(2, inst.demand_total / 2)
        assert ssl_loss(p, inst, lam=0.0) == pytest.approx(penalized_objective(inst, p))


# ---------------------------------------------------------------------------
# completion baselines
# ---------------------------------------------------------------------------


def test_deepopf_complete():
    assert np.allclose(deepopf_complete(np.array([0.3]), 1.0), [0.7, 0.3])
    assert deepopf_complete(np.array([0.4, 0.6]), 1.0)[0] == pytest.approx(0.0)
    full = deepopf_complete(np.array([0.7, 0.5]), 1.0)
    assert full[0] == pytest.approx(-0.2)  # bound violation preserved
    inst = inst2(d=(0.5, 0.25, 0.25), p_max=(1, 1, 1), c=(1, 1, 1))
    rep = check_feasibility(inst, full)
    assert not rep.feasible and rep.violations["dispatch_bounds"] == pytest.approx(0.2)


def test_dc3_zero_violation_is_fixed_point():
    inst = inst2(d=(0.5, 0.5))
    p0 = np.array([0.6, 0.4])
    out = dc3_correct(p0, inst, iters=25, rho=1e-3)
    assert np.array_equal(out, p0)


def test_dc3_t0_identity():
    inst = inst2(d=(0.5, 0.5))
    p0 = np.array([0.9, 0.1])
    assert np.array_equal(dc3_correct(p0, inst, iters=0, rho=1e-4), p0)


def test_dc3_single_bound_step():
    # independent generator 0.3 above its cap, dependent one interior:
    # one step moves the violator down by exactly 2*rho*v
    inst = inst2(d=(0.9, 0.9), p_max=(2.0, 1.0))
    v, rho = 0.3, 1e-3
    p0 = deepopf_complete(np.array([1.0 + v]), inst.demand_total)
    out = dc3_correct(p0, inst, iters=1, rho=rho)
    assert out[1] == pytest.approx(1.0 + v - 2 * rho * v)
    assert out.sum() == pytest.approx(inst.demand_total)


def test_dc3_more_iters_do_not_increase_violation():
    inst = inst2(d=(0.8, 0.8), p_max=(1.0, 1.0), r_max=(0.4, 0.4), r_req=0.3)
    p0 = deepopf_complete(np.array([1.4]), inst.demand_total)

    def viol(p):
        over = np.maximum(p - inst.p_max, 0.0).sum()
        recov = np.minimum(inst.r_max, inst.p_max - p).sum()
        return over + max(inst.reserve_req - recov, 0.0)

    v50 = viol(dc3_correct(p0, inst, iters=50, rho=1e-4))
    v200 = viol(dc3_correct(p0, inst, iters=200, rho=1e-4))
    assert v200 <= v50 + 1e-12
    assert v50 <= viol(p0) + 1e-12


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def test_train_zero_lr_keeps_parameters():
    bundle = tiny_bundle()
    tr, va = tiny_splits(bundle, 8), tiny_splits(bundle, 4, seed=2)
    cfg = TrainConfig(arch="dnn", loss_kind="ssl", lr=0.0, weight_decay=0.0,
                      max_epochs=1, hidden=8, n_layers=2, seed=5, batch_size=4)
    proxy, log = train(cfg, bundle, tr, va)
    assert len(log) == 1
    from edproxy.network import init_mlp
    fresh = init_mlp(np.random.default_rng(5), [bundle.n_bus, 8, bundle.p_max.size],
                     cfg.dropout)
    for a, b in zip(proxy.params.trainable_arrays(), fresh.trainable_arrays()):
        assert np.array_equal(a, b)


@pytest.mark.parametrize("arch", ["dnn", "deepopf", "dc3", "e2elr"])
def test_train_deterministic_per_arch(arch):
    bundle = tiny_bundle()
    tr, va = tiny_splits(bundle, 16, reserve=True), tiny_splits(bundle, 8, seed=2, reserve=True)
    cfg = TrainConfig(arch=arch, loss_kind="ssl", max_epochs=3, hidden=8, seed=7,
                      batch_size=8, reserve_mode=True,
                      dc3_train_iters=5, dc3_test_iters=10)
    p1, log1 = train(cfg, bundle, tr, va)
    p2, log2 = train(cfg, bundle, tr, va)
    assert proxy_to_json(p1) == proxy_to_json(p2)
    assert [r["val_loss"] for r in log1] == [r["val_loss"] for r in log2]


def test_train_order_invariance_without_shuffling():
    """With shuffling and dropout disabled and one full batch, permuting the
    dataset only reorders reductions; results agree to rounding noise."""
    bundle = tiny_bundle()
    tr = tiny_splits(bundle, 12)
    va = tiny_splits(bundle, 6, seed=2)
    cfg = TrainConfig(arch="dnn", loss_kind="ssl", max_epochs=3, hidden=8, seed=3,
                      batch_size=12, shuffle=False, dropout=0.0)
    p1, _ = train(cfg, bundle, tr, va)
    perm = np.random.default_rng(0).permutation(tr.n)
    tr2 = Splits(dmat=tr.dmat[perm], rvec=tr.rvec[perm])
    p2, _ = train(cfg, bundle, tr2, va)
    # Adam divides by sqrt(v); near-zero moments amplify the reordering
    # rounding noise, so "identical" here means agreement to ~1e-6
    for a, b in zip(p1.params.trainable_arrays(), p2.params.trainable_arrays()):
        assert np.abs(a - b).max() <= 1e-6 * max(1.0, np.abs(a).max())


def test_train_rejects_bad_inputs():
    bundle = tiny_bundle()
    tr = tiny_splits(bundle, 8)
    with pytest.raises(ValueError, match="empty"):
        train(TrainConfig(max_epochs=1), bundle, tr, Splits(np.zeros((0, 4)), np.zeros(0)))
    with pytest.raises(ValueError, match="label"):
        train(TrainConfig(arch="dnn", loss_kind="sl", max_epochs=1), bundle, tr, tr)


def test_config_invariants():
    with pytest.raises(ValueError, match="nonnegative"):
        TrainConfig(lam=-0.1)
    with pytest.raises(ValueError, match="positive"):
        TrainConfig(dc3_step=0.0)
    with pytest.raises(ValueError, match="batch"):
        TrainConfig(batch_size=0)
    # penalty forced to zero for the end-to-end feasible architecture
    assert TrainConfig(arch="e2elr", lam=1.0).resolved_lambda() == 0.0
    assert TrainConfig(arch="dnn", loss_kind="ssl").resolved_lambda() == pytest.approx(10 ** -0.5)
    assert TrainConfig(arch="dnn", loss_kind="sl").resolved_lambda() == 1e-4


def test_e2elr_training_loss_equals_penalized_objective():
    """For the end-to-end feasible model the self-supervised loss reduces to
    the penalized objective of its (feasible) output."""
    bundle = tiny_bundle()
    tr = tiny_splits(bundle, 16, reserve=True)
    va = tiny_splits(bundle, 8, seed=2, reserve=True)
    cfg = TrainConfig(arch="e2elr", loss_kind="ssl", max_epochs=2, hidden=8, seed=1,
                      reserve_mode=True)
    proxy, _ = train(cfg, bundle, tr, va)
    pred = predict_eval(proxy, bundle, va.dmat, va.rvec)
    from edproxy.training import instance_from_arrays
    for k in range(va.n):
        inst = instance_from_arrays(bundle, va.dmat[k], float(va.rvec[k]))
        assert check_feasibility(inst, pred[k], tol=1e-8).feasible
        assert ssl_loss(pred[k], inst, lam=0.0) == pytest.approx(
            penalized_objective(inst, pred[k]), rel=1e-12)
    # and the batched loss agrees with the per-instance formula
    total = batched_loss(bundle, pred, va.dmat, va.rvec, None, "ssl", 0.0, 0.0)
    per = np.mean([ssl_loss(pred[k],
                            instance_from_arrays(bundle, va.dmat[k], float(va.rvec[k])),
                            0.0) for k in range(va.n)])
    assert total == pytest.approx(per, rel=1e-12)


def test_sl_training_runs_with_labels(desk_case):
    from edproxy.core import solve_reference
    from edproxy.training import instance_from_arrays
    bundle = CaseBundle.from_case(desk_case)
    rng = np.random.default_rng(4)
    dmat = desk_case.demand_vector() * rng.uniform(0.85, 1.15, (24, bundle.n_bus))
    rvec = np.zeros(24)
    labels = np.stack([solve_reference(instance_from_arrays(bundle, dmat[i], 0.0)).p
                       for i in range(24)])
    tr = Splits(dmat=dmat[:16], rvec=rvec[:16], labels=labels[:16])
    va = Splits(dmat=dmat[16:], rvec=rvec[16:], labels=labels[16:])
    cfg = TrainConfig(arch="e2elr", loss_kind="sl", max_epochs=3, hidden=8, seed=0)
    proxy, log = train(cfg, bundle, tr, va)
    assert len(log) == 3
    assert np.isfinite([r["train_loss"] for r in log]).all()
