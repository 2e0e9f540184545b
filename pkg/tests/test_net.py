import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kklcert.net import AdamState, LbfgsState, Mlp, adam_step, compose, lbfgs_minimize, loss_gradient


def _fd_param_grad(net, fn, h=1e-6):
    theta = net.get_flat()
    g = np.zeros_like(theta)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        net.set_flat(tp)
        fp = fn(net)
        net.set_flat(tm)
        fm = fn(net)
        g[i] = (fp - fm) / (2 * h)
    net.set_flat(theta)
    return g


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def test_forward_examples():
    assert np.all(Mlp.zeros([2, 8, 3]).forward(np.ones(2)) == 0.0)
    x = np.array([0.3, -1.2])
    assert np.array_equal(Mlp.linear(np.eye(2)).forward(x), x)
    tiny = Mlp([1, 1, 1], [[[1.0]], [[1.0]]], [[0.0], [0.0]])
    assert np.isclose(tiny.forward([0.5])[0], 0.46211715726000974, atol=1e-15)
    assert np.isclose(tiny.input_jacobian(np.array([0.0]))[0, 0], 1.0)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        Mlp.init([2, 4, 1]).forward(np.ones(3))
    with pytest.raises(ValueError):
        Mlp([2, 1], [np.ones((2, 2))], [np.zeros(1)])


def test_linear_jacobian_constant():
    W = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.0]])
    net = Mlp.linear(W, [1.0, 2.0, 3.0])
    J = net.input_jacobian(np.random.default_rng(0).normal(size=(5, 2)))
    assert np.allclose(J, W)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_input_jacobian_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = Mlp.init([2, 16, 16, 5], seed=seed)
    for b in net.biases:
        b += rng.normal(scale=0.3, size=b.shape)
    x = rng.normal(size=2)
    J = net.input_jacobian(x)
    h = 1e-5
    fd = np.stack([(net.forward(x + h * e) - net.forward(x - h * e)) / (2 * h)
                   for e in np.eye(2)], axis=1)
    assert _rel_err(J, fd) <= 1e-6


def test_forward_tangent_is_jacobian_vector_product():
    rng = np.random.default_rng(1)
    net = Mlp.init([3, 7, 4], seed=1)
    x, v = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    out, dout, _ = net.forward_tangent(x, v)
    assert np.allclose(out, net.forward(x))
    assert np.allclose(dout, np.einsum("nij,nj->ni", net.input_jacobian(x), v))


def _squared(out, dout):
    return np.sum(out ** 2), 2 * out, None


def test_zero_residual_gives_zero_gradient():
    net = Mlp.zeros([2, 5, 3])
    _, g = loss_gradient(net, np.ones((4, 2)), _squared)
    assert np.all(g == 0.0)


def test_linear_squared_loss_closed_form():
    rng = np.random.default_rng(2)
    W, x, z = rng.normal(size=(3, 2)), rng.normal(size=2), rng.normal(size=3)
    net = Mlp.linear(W)

    def loss(out, dout):
        r = out - z
        return np.sum(r ** 2), 2 * r, None

    _, g = loss_gradient(net, x, loss)
    expected = 2 * np.outer(W @ x - z, x)
    assert np.allclose(g[:6].reshape(3, 2), expected)
    assert np.allclose(g[6:], 2 * (W @ x - z))


@pytest.mark.parametrize("dims", [[2, 6, 5], [2, 8, 8, 3], [3, 5, 5, 5, 2]])
def test_parameter_gradient_with_tangent_term(dims):
    """Loss ``|out - z|^2 + |J v - M out|^2`` mirrors the physics-informed objective."""
    for seed in range(20):
        rng = np.random.default_rng(seed)
        net = Mlp.init(dims, seed=seed)
        for b in net.biases:
            b += rng.normal(scale=0.2, size=b.shape)
        x, v = rng.normal(size=(4, dims[0])), rng.normal(size=(4, dims[0]))
        z = rng.normal(size=(4, dims[-1]))
        M = rng.normal(size=(dims[-1], dims[-1]))

        def loss(out, dout):
            r1 = out - z
            r2 = dout - out @ M.T
            val = np.sum(r1 ** 2) + np.sum(r2 ** 2)
            return val, 2 * r1 - 2 * r2 @ M, 2 * r2

        val, g = loss_gradient(net, x, loss, v)

        def f(n):
            out, dout, _ = n.forward_tangent(x, v)
            return loss(out, dout)[0]

        assert np.isclose(val, f(net))
        assert _rel_err(g, _fd_param_grad(net, f)) <= 1e-5


def test_adam_quadratic_converges():
    state = AdamState(lr=0.1)
    theta = np.array([0.0])
    for _ in range(500):
        theta = adam_step(state, theta, 2 * (theta - 3.0))
    assert abs(theta[0] - 3.0) <= 1e-3


def test_adam_zero_gradient_is_noop():
    net = Mlp.init([2, 4, 1], seed=3)
    before = net.get_flat()
    state = AdamState()
    for _ in range(10):
        adam_step(state, net, np.zeros(net.n_params))
    assert np.array_equal(net.get_flat(), before)


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(5)
        net = Mlp.init([2, 6, 2], seed=5)
        state = AdamState()
        x, z = rng.normal(size=(20, 2)), rng.normal(size=(20, 2))
        for _ in range(30):
            _, g = loss_gradient(net, x, lambda o, d: (np.sum((o - z) ** 2), 2 * (o - z), None))
            adam_step(state, net, g)
        return net.get_flat()

    assert np.array_equal(run(), run())


def test_adam_shape_mismatch():
    state = AdamState()
    adam_step(state, np.zeros(3), np.ones(3))
    with pytest.raises(ValueError):
        adam_step(state, np.zeros(4), np.ones(4))


def test_lbfgs_quadratic():
    target = np.array([1.0, -2.0, 3.0, 0.5])
    res = lbfgs_minimize(lambda t: (np.sum((t - target) ** 2), 2 * (t - target)),
                         np.zeros(4), max_iters=5)
    assert np.linalg.norm(res.x - target) <= 1e-8
    assert res.n_iter <= 5


def _rosen(p):
    x, y = p
    f = (1 - x) ** 2 + 100 * (y - x * x) ** 2
    g = np.array([-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)])
    return f, g


def test_lbfgs_rosenbrock():
    res = lbfgs_minimize(_rosen, [-1.2, 1.0], max_iters=100)
    assert res.fun <= 1e-10
    assert np.all(np.diff(res.history) <= 0)


def test_lbfgs_zero_gradient_start():
    res = lbfgs_minimize(lambda t: (0.0, np.zeros(2)), [1.0, 2.0])
    assert res.status == "converged" and res.n_iter == 0
    assert np.array_equal(res.x, [1.0, 2.0])


def test_lbfgs_history_bounded():
    state = LbfgsState(memory=3)
    lbfgs_minimize(_rosen, [-1.2, 1.0], state=state, max_iters=30)
    assert len(state.s_hist) <= 3


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_lbfgs_monotone_on_network_loss(seed):
    rng = np.random.default_rng(seed)
    net = Mlp.init([2, 6, 2], seed=seed % 1000)
    x, z = rng.normal(size=(30, 2)), rng.normal(size=(30, 2))

    def fun(theta):
        net.set_flat(theta)
        return loss_gradient(net, x, lambda o, d: (np.mean(np.sum((o - z) ** 2, 1)),
                                                   2 * (o - z) / len(x), None))

    res = lbfgs_minimize(fun, net.get_flat(), max_iters=20)
    assert np.all(np.diff(res.history) <= 0)


def test_serialization_round_trip(tmp_path):
    net = Mlp.init([2, 5, 3], seed=9)
    net.meta["config_digest"] = "abc"
    path = tmp_path / "net.json"
    net.save(path)
    back = Mlp.load(path)
    assert back.digest() == net.digest()
    assert back.meta["config_digest"] == "abc"
    doc = json.loads(path.read_text())
    assert doc["activation"] == "tanh" and doc["layer_dims"] == [2, 5, 3]
    doc["weights"][0] = doc["weights"][0][:-1]
    with pytest.raises(ValueError):
        Mlp.from_dict(doc)


def test_compose_matches_sequential():
    a, b = Mlp.init([2, 4, 3], seed=1), Mlp.init([3, 5, 2], seed=2)
    x = np.random.default_rng(0).normal(size=(7, 2))
    assert np.allclose(compose(a, b).forward(x), b.forward(a.forward(x)))
