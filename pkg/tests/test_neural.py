import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from resac import neural as nn


def full_fd(fn, params, h=1e-6):
    out = []
    for p in params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = fn()
            p[idx] = old - h
            down = fn()
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def test_mlp_gradients_against_full_fd():
    rng = np.random.default_rng(0)
    net = nn.Mlp([3, 5, 4, 2], rng)
    x = rng.normal(size=(6, 3))
    w = rng.normal(size=(6, 2))

    def loss():
        return float(np.sum(net.forward(x)[0] * w))

    out, cache = net.forward(x)
    grads, gx = net.backward(cache, w)
    numeric = full_fd(loss, net.params())
    for a, n in zip(grads, numeric):
        assert np.allclose(a, n, atol=1e-6)
    # input gradient via perturbing x itself
    xg = full_fd(loss, [x])[0]
    assert np.allclose(gx, xg, atol=1e-6)


def test_mlp_shapes_and_validation():
    net = nn.Mlp([4, 8, 1], np.random.default_rng(0))
    assert [p.shape for p in net.params()] == [(8, 4), (8,), (1, 8), (1,)]
    with pytest.raises(ValueError):
        net.forward(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        nn.Mlp([4])


def test_embedding():
    assert nn.embedding_dim(1) == 1 and nn.embedding_dim(22) == 11 and nn.embedding_dim(500) == 50
    t = nn.EmbeddingTable(4, np.random.default_rng(0))
    with pytest.raises(IndexError):
        t.lookup(np.array([4]))
    g = t.backward(np.array([1, 1, 3]), np.ones((3, t.dim)))
    assert np.array_equal(g[:, 0], [0, 2, 0, 1])


def test_critic_gradient_including_embeddings():
    rng = np.random.default_rng(1)
    critic = nn.CriticNet(2, (3, 5), hidden=(6, 6), rng=rng)
    cont = rng.normal(size=(5, 2))
    cats = np.stack([rng.integers(0, 3, 5), rng.integers(0, 5, 5)], axis=1)
    act = rng.uniform(-1, 1, size=(5, 1))
    w = rng.normal(size=5)

    def loss():
        return float(critic.forward(cont, cats, act)[0] @ w)

    q, cache = critic.forward(cont, cats, act)
    grads, ga = critic.backward(cache, w)
    for a, n in zip(grads, full_fd(loss, critic.params())):
        assert np.allclose(a, n, atol=1e-6)
    assert np.allclose(ga, full_fd(loss, [act])[0], atol=1e-6)


def test_policy_gradient():
    rng = np.random.default_rng(2)
    pol = nn.PolicyNet(2, (3,), hidden=(6,), rng=rng)
    cont = rng.normal(size=(4, 2))
    cats = rng.integers(0, 3, (4, 1))
    noise = rng.normal(size=(4, 1))
    wa, wl = rng.normal(size=(4, 1)), rng.normal(size=4)

    def loss():
        s = pol.sample(cont, cats, noise)
        return float(np.sum(s.action * wa) + s.log_prob @ wl)

    s = pol.sample(cont, cats, noise)
    grads = pol.backward(s, wa, wl)
    for a, n in zip(grads, full_fd(loss, pol.params())):
        assert np.allclose(a, n, atol=1e-5, rtol=1e-4)


@given(st.floats(-2, 2), st.floats(-3, 1), st.floats(-2, 2))
@settings(max_examples=60, deadline=None)
def test_squashed_log_prob_oracle(mean, log_std, u):
    a = math.tanh(u)
    expected = norm.logpdf(u, mean, math.exp(log_std)) - math.log(1 - a * a + nn.TANH_EPS)
    got = nn.squashed_log_prob(np.array([[u]]), np.array([[mean]]), np.array([[log_std]]))
    assert got[0] == pytest.approx(expected, rel=1e-9, abs=1e-9)


def test_sample_log_prob_agrees_with_density():
    rng = np.random.default_rng(3)
    pol = nn.PolicyNet(3, (2,), rng=rng)
    cont, cats = rng.normal(size=(7, 3)), rng.integers(0, 2, (7, 1))
    noise = rng.normal(size=(7, 1))
    s = pol.sample(cont, cats, noise)
    mean, log_std, _ = pol.distribution(cont, cats)
    u = mean + np.exp(log_std) * noise
    assert np.allclose(s.log_prob, nn.squashed_log_prob(u, mean, log_std), atol=1e-10)
    assert np.all(np.abs(s.action) < 1)


@given(st.floats(0, 1e3), st.floats(1, 600))
def test_action_scaling_roundtrip(hold, h_max):
    hold = min(hold, h_max)
    back = nn.scale_action(nn.unscale_action(np.array([hold]), h_max), h_max)[0]
    assert back == pytest.approx(hold, abs=1e-9 * h_max)
    assert nn.scale_action(np.array([-1.0, 1.0]), h_max).tolist() == [0.0, h_max]


def test_adam_first_step():
    p = [np.array([1.0, -2.0])]
    st_ = nn.AdamState.for_params(p, lr=0.1)
    nn.adam_step(st_, p, [np.array([3.0, -0.5])])
    # bias-corrected first step moves each coordinate by ~lr against the gradient sign
    assert np.allclose(p[0], [1.0 - 0.1 * 3 / (3 + 1e-8), -2.0 + 0.1 * 0.5 / (0.5 + 1e-8)])
    with pytest.raises(ValueError):
        nn.adam_step(st_, p, [np.zeros(3)])


def test_adam_minimizes_quadratic():
    p = [np.array([5.0, -3.0])]
    st_ = nn.AdamState.for_params(p, lr=0.05)
    for _ in range(2000):
        nn.adam_step(st_, p, [2 * p[0]])
    assert np.max(np.abs(p[0])) < 1e-2


def test_clip_global_norm():
    g = [np.array([3.0]), np.array([[4.0]])]
    assert nn.global_norm(g) == 5.0
    c = nn.clip_global_norm(g, 1.0)
    assert nn.global_norm(c) == pytest.approx(1.0)
    assert c[0][0] == pytest.approx(0.6)
    assert nn.clip_global_norm(g, 10.0) is g


def test_l1_excludes_biases():
    net = nn.Mlp([2, 2, 1])
    net.weights[0][:] = [[1, -2], [0, 3]]
    net.weights[1][:] = [[-1, 1]]
    net.biases[0][:] = 100
    total, signs = nn.l1_norm_and_subgradient(net)
    assert total == 8.0
    assert signs[0].tolist() == [[1, -1], [0, 1]]
    assert nn.l1_lipschitz_bound(net) == 12.0


def test_soft_update_decay():
    t, o = [np.array([0.0])], [np.array([1.0])]
    for _ in range(100):
        nn.soft_update(t, o, 0.01)
    assert t[0][0] == pytest.approx(1 - 0.99**100, rel=1e-12)
    a = [np.array([2.0])]
    nn.soft_update(a, [np.array([7.0])], 1.0)
    assert a[0][0] == 7.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_lipschitz_bound_holds(seed):
    rng = np.random.default_rng(seed)
    net = nn.Mlp([5, 16, 16, 1], rng)
    rep = nn.verify_lipschitz_bound(net, 2000, 1e-2, rng)
    assert rep.passed and 0 < rep.max_ratio <= 1


def test_lipschitz_tight_for_linear_map():
    # a single sign-aligned row attains the bound at a corner
    net = nn.Mlp([3, 1])
    net.weights[0][:] = [[1.0, -2.0, 0.5]]
    rep = nn.verify_lipschitz_bound(net, 500, 0.1, np.random.default_rng(0))
    assert rep.max_ratio == pytest.approx(1.0, rel=1e-9)


def test_serialization_roundtrip():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(3, 4))
    assert np.array_equal(nn.decode_array(nn.encode_array(a)), a)
    net = nn.Mlp([2, 3, 1], rng)
    other = nn.Mlp([2, 3, 1], np.random.default_rng(9))
    nn.load_into(other.params(), [nn.encode_array(p) for p in net.params()])
    assert all(np.array_equal(x, y) for x, y in zip(other.params(), net.params()))
    with pytest.raises(ValueError):
        nn.load_into(nn.Mlp([2, 4, 1]).params(), [nn.encode_array(p) for p in net.params()])
