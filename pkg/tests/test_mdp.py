import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resac.mdp import (
    ConvergenceError,
    FiniteMdp,
    bellman_backup,
    greedy_value,
    random_mdp,
    sup_norm_distance,
    value_iteration,
)


def one_state(r=1.0, gamma=0.5):
    return FiniteMdp(np.ones((1, 1, 1)), np.array([[r]]), gamma)


def loop_backup(mdp, q):
    """Triple loop reference for the max-Bellman backup."""
    S, A = mdp.num_states, mdp.num_actions
    out = np.zeros((S, A))
    for s, a in itertools.product(range(S), range(A)):
        total = 0.0
        for s2 in range(S):
            total += mdp.transition[s, a, s2] * max(q[s2, b] for b in range(A))
        out[s, a] = mdp.reward[s, a] + mdp.gamma * total
    return out


class TestFiniteMdp:
    def test_rejects_bad_rows(self):
        P = np.array([[[0.5, 0.6]], [[1.0, 0.0]]])
        with pytest.raises(ValueError, match="sums to"):
            FiniteMdp(P, np.zeros((2, 1)), 0.9)

    def test_rejects_negative_and_gamma(self):
        with pytest.raises(ValueError):
            FiniteMdp(np.array([[[1.5, -0.5]], [[1.0, 0.0]]]), np.zeros((2, 1)), 0.9)
        with pytest.raises(ValueError, match="gamma"):
            one_state(gamma=1.0)
        with pytest.raises(ValueError):
            FiniteMdp(np.ones((1, 1, 1)), np.zeros((2, 1)), 0.5)

    def test_json_roundtrip(self, tmp_path):
        mdp = random_mdp(np.random.default_rng(3), 3, 2, 0.9)
        mdp.save(tmp_path / "m.json")
        back = FiniteMdp.load(tmp_path / "m.json")
        assert np.array_equal(back.transition, mdp.transition)
        assert np.array_equal(back.reward, mdp.reward)
        assert back.gamma == mdp.gamma


def test_greedy_value():
    q = np.array([[1.0, 3.0], [2.0, 2.0]])
    assert greedy_value(q, 0) == 3.0
    assert greedy_value(np.array([[-7.5, -7.5]]), 0) == -7.5
    with pytest.raises(IndexError):
        greedy_value(q, 2)
    rng = np.random.default_rng(0)
    q = rng.normal(size=(3, 4))
    for s in range(3):
        best = q[s, 0]
        for a in range(4):
            best = q[s, a] if q[s, a] > best else best
        assert greedy_value(q, s) == best


def test_backup_small_cases():
    mdp = one_state()
    assert bellman_backup(mdp, np.zeros((1, 1)))[0, 0] == 1.0
    q, _, _ = value_iteration(mdp, tol=1e-12)
    assert q[0, 0] == pytest.approx(2.0, abs=1e-11)


def test_backup_matches_loops():
    rng = np.random.default_rng(1)
    for _ in range(5):
        mdp = random_mdp(rng, 2, 2, 0.9)
        q = rng.normal(size=(2, 2))
        assert np.allclose(bellman_backup(mdp, q), loop_backup(mdp, q), atol=1e-14)


def test_value_iteration_constant_reward():
    P = np.random.default_rng(2).dirichlet(np.ones(3), size=(3, 2))
    mdp = FiniteMdp(P, np.full((3, 2), 0.7), 0.9)
    q, _, _ = value_iteration(mdp, tol=1e-12)
    assert np.allclose(q, 7.0, atol=1e-10)


def test_value_iteration_matches_linear_solve():
    # two-state chain with a single action: (I - gamma P) V = R
    P = np.array([[[0.2, 0.8]], [[0.6, 0.4]]])
    R = np.array([[1.0], [-2.0]])
    mdp = FiniteMdp(P, R, 0.99)
    q, iters, res = value_iteration(mdp, tol=1e-9)
    exact = np.linalg.solve(np.eye(2) - 0.99 * P[:, 0, :], R[:, 0])
    assert res <= 1e-9 and iters > 1
    assert np.allclose(q[:, 0], exact, atol=1e-9 * 0.99 / 0.01 * 1.01)


def test_value_iteration_budget():
    mdp = random_mdp(np.random.default_rng(0), 3, 2, 0.99)
    with pytest.raises(ConvergenceError) as info:
        value_iteration(mdp, tol=1e-12, max_iter=5)
    assert len(info.value.residuals) == 5


@given(st.integers(0, 10_000), st.floats(-100, 100))
@settings(max_examples=50, deadline=None)
def test_sup_norm(seed, c):
    rng = np.random.default_rng(seed)
    q1 = rng.normal(size=(3, 4))
    assert sup_norm_distance(q1, q1) == 0.0
    assert sup_norm_distance(q1, q1 + c) == pytest.approx(abs(c), rel=1e-12, abs=1e-12)
    q2 = rng.normal(size=(3, 4))
    assert sup_norm_distance(q1, q2) == max(abs(a - b) for a, b in zip(q1.ravel(), q2.ravel()))


def test_sup_norm_shape_mismatch():
    with pytest.raises(ValueError):
        sup_norm_distance(np.zeros((2, 2)), np.zeros((2, 3)))
