import numpy as np
import pytest

from edproxy import autodiff as ad

from oracles import relative_error


def numeric_grad(fn, x, step=1e-6):
    g = np.empty_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + step
        hi = fn()
        flat[k] = old - step
        lo = fn()
        flat[k] = old
        gf[k] = (hi - lo) / (2 * step)
    return g


@pytest.mark.parametrize("build", [
    lambda t, x, y: ad.vsum(ad.add(x, y)),
    lambda t, x, y: ad.vsum(ad.sub(x, y)),
    lambda t, x, y: ad.vsum(ad.mul(x, y)),
    lambda t, x, y: ad.vsum(ad.mul(ad.neg(x), y)),
    lambda t, x, y: ad.vsum(ad.relu(ad.sub(x, y))),
    lambda t, x, y: ad.vsum(ad.sigmoid(ad.mul(x, y))),
    lambda t, x, y: ad.vsum(ad.vabs(ad.sub(x, y))),
    lambda t, x, y: ad.vsum(ad.minimum(x, 0.3)),
    lambda t, x, y: ad.vmean(ad.mul(x, y), axis=0),
    lambda t, x, y: ad.vsum(ad.vmean(ad.mul(x, y), axis=1)),
    lambda t, x, y: ad.vsum(ad.vsum(ad.mul(x, y), axis=1)),
])
def test_elementwise_ops_match_fd(build):
    rng = np.random.default_rng(0)
    xv = rng.normal(size=(4, 5)) + 0.05  # keep away from relu/abs kinks
    yv = rng.normal(size=(4, 5)) + 1.2

    def loss_of():
        t = ad.Tape()
        x = t.leaf(xv)
        y = t.leaf(yv)
        out = build(t, x, y)
        if out.value.ndim:
            out = ad.vsum(out)
        return t, x, y, out

    t, x, y, out = loss_of()
    grads = ad.backward(t, out)
    gx = numeric_grad(lambda: float(loss_of()[3].value), xv)
    gy = numeric_grad(lambda: float(loss_of()[3].value), yv)
    assert relative_error(grads.get(x), gx) <= 1e-5
    assert relative_error(grads.get(y), gy) <= 1e-5


def test_matmul_grad_and_broadcast_bias():
    rng = np.random.default_rng(1)
    xv = rng.normal(size=(6, 3))
    wv = rng.normal(size=(3, 4))
    bv = rng.normal(size=4)

    def run():
        t = ad.Tape()
        x, w, b = t.leaf(xv), t.leaf(wv), t.leaf(bv)
        out = ad.vsum(ad.sigmoid(ad.add(ad.matmul(x, w), b)))
        return t, (x, w, b), out

    t, (x, w, b), out = run()
    grads = ad.backward(t, out)
    for leaf, arr in ((x, xv), (w, wv), (b, bv)):
        fd = numeric_grad(lambda: float(run()[2].value), arr)
        assert relative_error(grads.get(leaf), fd) <= 1e-5


def test_quadratic_analytic_gradient():
    w = np.array([1.5, -2.0, 0.25])
    t = ad.Tape()
    wv = t.leaf(w)
    loss = ad.vsum(ad.mul(wv, wv))
    grads = ad.backward(t, loss)
    assert np.allclose(grads.get(wv), 2 * w)


def test_constant_loss_zero_gradient():
    t = ad.Tape()
    w = t.leaf(np.ones(3))
    c = t.leaf(np.array(5.0))
    grads = ad.backward(t, c)
    assert np.array_equal(grads.get(w), np.zeros(3))


def test_unused_nodes_have_zero_gradient():
    t = ad.Tape()
    x = t.leaf(np.ones(2))
    _ = ad.mul(x, np.array([3.0, 3.0]))  # dead branch
    y = ad.vsum(ad.mul(x, x))
    grads = ad.backward(t, y)
    assert np.allclose(grads.get(x), 2 * np.ones(2))


def test_backward_usage_errors():
    t = ad.Tape()
    x = t.leaf(np.ones(3))
    with pytest.raises(ad.AutodiffUsageError, match="scalar"):
        ad.backward(t, x)
    other = ad.Tape()
    z = other.leaf(np.array(1.0))
    with pytest.raises(ad.AutodiffUsageError):
        ad.backward(t, z)


def test_custom_op_chain_rule():
    t = ad.Tape()
    x = t.leaf(np.array([1.0, 2.0]))
    doubled = ad.custom(t, 2.0 * x.value, [x], lambda g: (2.0 * g,), "double")
    loss = ad.vsum(ad.mul(doubled, doubled))
    grads = ad.backward(t, loss)
    assert np.allclose(grads.get(x), 8.0 * x.value)


def test_gradient_accumulates_over_reuse():
    t = ad.Tape()
    x = t.leaf(np.array([3.0]))
    y = ad.add(ad.mul(x, x), ad.mul(x, np.array([4.0])))  # x^2 + 4x
    grads = ad.backward(t, ad.vsum(y))
    assert np.allclose(grads.get(x), [2 * 3.0 + 4.0])
