import numpy as np
import pytest

from medi import autodiff as ad
from medi.errors import NumericError


def _rel_err(a, b):
    denom = max(np.abs(a), np.abs(b), 1e-8)
    return abs(a - b) / denom


def test_scalar_chain_matches_hand_derivative():
    x = ad.Tensor(np.array([0.7]), requires_grad=True)
    y = ad.tsum(ad.mul(ad.exp(x), ad.log(ad.add(x, 1.0))))
    (g,) = ad.grad(y, [x])
    v = 0.7
    expected = np.exp(v) * np.log(v + 1.0) + np.exp(v) / (v + 1.0)
    assert abs(g.data[0] - expected) < 1e-12


def test_first_order_matches_finite_differences():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(4, 3))
    b = rng.normal(size=(3,))
    X = rng.normal(size=(5, 4))

    def loss_np(flat):
        w = flat[:12].reshape(4, 3)
        bb = flat[12:]
        h = np.maximum(X @ w + bb, 0.0)
        p = np.exp(h - h.max(axis=1, keepdims=True))
        p = p / p.sum(axis=1, keepdims=True)
        return float(np.sum(p ** 2) + np.abs(w).sum())

    flat = np.concatenate([W.ravel(), b])
    fd = ad.finite_difference(loss_np, flat)

    Wt = ad.Tensor(W, requires_grad=True)
    bt = ad.Tensor(b, requires_grad=True)
    h = ad.relu(ad.add(ad.matmul(ad.Tensor(X), Wt), bt))
    p = ad.softmax(h, axis=1)
    loss = ad.add(ad.tsum(ad.mul(p, p)), ad.tsum(ad.absolute(Wt)))
    gW, gb = ad.grad(loss, [Wt, bt])
    got = np.concatenate([gW.data.ravel(), gb.data])
    assert np.max(np.abs(got - fd)) < 1e-6


def test_second_order_quadratic_exact():
    # f = sum(x^2), grad = 2x, d(sum(grad * c))/dx = 2c
    x = ad.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    f = ad.tsum(ad.mul(x, x))
    (g,) = ad.grad(f, [x], create_graph=True)
    c = np.array([0.5, 1.5, -1.0])
    s = ad.tsum(ad.mul(g, ad.Tensor(c)))
    (gg,) = ad.grad(s, [x])
    assert np.allclose(gg.data, 2.0 * c, atol=1e-14)


def test_second_order_matches_fd_of_gradient():
    rng = np.random.default_rng(3)
    dim = 6
    x0 = rng.normal(size=dim)
    A = rng.normal(size=(dim, dim))

    def build(xt):
        z = ad.matmul(ad.reshape(xt, (1, dim)), ad.Tensor(A))
        return ad.tsum(ad.mul(ad.tanh(z), ad.exp(ad.mul(ad.Tensor(0.3), z))))

    v = rng.normal(size=dim)

    def gv(flat):
        xt = ad.Tensor(flat, requires_grad=True)
        (g,) = ad.grad(build(xt), [xt])
        return float(g.data @ v)

    fd = ad.finite_difference(gv, x0, step=1e-6)

    xt = ad.Tensor(x0, requires_grad=True)
    (g,) = ad.grad(build(xt), [xt], create_graph=True)
    s = ad.tsum(ad.mul(g, ad.Tensor(v)))
    (hv,) = ad.grad(s, [xt])
    assert np.max(np.abs(hv.data - fd)) < 1e-5


def test_broadcast_gradients_reduce_correctly():
    a = ad.Tensor(np.ones((3, 1)), requires_grad=True)
    b = ad.Tensor(np.ones((1, 4)), requires_grad=True)
    out = ad.tsum(ad.mul(a, b))
    ga, gb = ad.grad(out, [a, b])
    assert ga.data.shape == (3, 1) and np.allclose(ga.data, 4.0)
    assert gb.data.shape == (1, 4) and np.allclose(gb.data, 3.0)


def test_softmax_rows_are_probabilities():
    rng = np.random.default_rng(1)
    for _ in range(25):
        z = rng.normal(scale=rng.uniform(0.1, 30.0), size=(4, 7))
        p = ad.softmax(ad.Tensor(z), axis=1).data
        assert np.all(p >= 0.0)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_clip_gate_blocks_gradient_outside_range():
    x = ad.Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
    y = ad.tsum(ad.clip(x, 0.0, 1.0))
    (g,) = ad.grad(y, [x])
    assert np.allclose(g.data, [0.0, 1.0, 0.0])


def test_grad_rejects_nonfinite_loss():
    x = ad.Tensor(np.array([0.0]), requires_grad=True)
    bad = ad.log(x)  # -inf
    with pytest.raises(NumericError):
        ad.grad(bad, [x])


def test_no_grad_context_detaches():
    x = ad.Tensor(np.array([2.0]), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad
    (g,) = ad.grad(ad.tsum(ad.mul(x, ad.Tensor(1.0))), [x])
    assert g.data[0] == 1.0


def test_unused_input_gets_zero_gradient():
    x = ad.Tensor(np.array([1.0]), requires_grad=True)
    z = ad.Tensor(np.array([5.0]), requires_grad=True)
    f = ad.tsum(ad.mul(x, x))
    gx, gz = ad.grad(f, [x, z])
    assert gx.data[0] == 2.0
    assert gz.data[0] == 0.0
