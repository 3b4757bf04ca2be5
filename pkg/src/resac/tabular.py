"""Tabular ensemble learners on a small noisy MDP.

Used to exercise the poisoning detector and the data-size behaviour of the two
penalties without neural function approximation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import FiniteMdp, value_iteration


@dataclass(frozen=True)
class NoisyInstance:
    mdp: FiniteMdp  # mean rewards
    reward_std: np.ndarray  # per (s, a) Gaussian reward noise

    @property
    def sigma2(self) -> np.ndarray:
        """Local aleatoric variance of the one-step target.

        Transitions of the shipped instance are deterministic, so this is the reward
        variance plus the (zero) spread of the next-state value.
        """
        q_star = self.q_star()
        v = q_star.max(axis=1)
        P = self.mdp.transition
        next_var = P @ (v**2) - (P @ v) ** 2
        return self.reward_std**2 + self.mdp.gamma**2 * np.maximum(next_var, 0.0)

    def q_star(self) -> np.ndarray:
        """Exact optimal Q from policy-iterated linear solves."""
        mdp = self.mdp
        S, A = mdp.num_states, mdp.num_actions
        q, _, _ = value_iteration(mdp, tol=1e-10)
        for _ in range(100):
            pi = q.argmax(axis=1)
            P_pi = mdp.transition[np.arange(S), pi]  # (S, S')
            r_pi = mdp.reward[np.arange(S), pi]
            v = np.linalg.solve(np.eye(S) - mdp.gamma * P_pi, r_pi)
            q_new = mdp.reward + mdp.gamma * mdp.transition @ v
            if np.array_equal(q_new.argmax(axis=1), pi):
                return q_new
            q = q_new
        return q  # pragma: no cover


def noisy_chain(noise_std: float = 4.0, gamma: float = 0.9) -> NoisyInstance:
    """Two self-looping states: state 0 has exact rewards, state 1 has noisy ones."""
    P = np.zeros((2, 2, 2))
    P[0, :, 0] = 1.0
    P[1, :, 1] = 1.0
    R = np.array([[1.0, 0.5], [1.0, 0.8]])
    std = np.array([[0.0, 0.0], [noise_std, noise_std]])
    return NoisyInstance(FiniteMdp(P, R, gamma), std)


@dataclass
class EnsembleRun:
    q_mean: np.ndarray  # iterate-averaged ensemble mean
    members: np.ndarray  # final (K, S, A) tables
    mean_gamma_epi: float


def train_tabular_ensemble(
    inst: NoisyInstance,
    num_members: int = 5,
    lambda_epi: float = 0.0,
    kappa: float = 0.0,
    lr: float = 0.1,
    sweeps: int = 4000,
    seed: int = 0,
) -> EnsembleRun:
    """Synchronous ensemble Q-learning with frozen-target penalties.

    Each sweep every member draws its own reward and next state for every (s, a)
    and regresses towards
    ``r + gamma * (mean_j Q'_j(s', a*) - lambda_epi * Var_j Q'_j(s', a*) - kappa)``
    where ``Q'`` is the ensemble snapshot at the start of the sweep and ``a*`` the
    greedy action of its mean. The returned estimate averages the ensemble mean
    over the second half of the sweeps.
    """
    if num_members < 2:
        raise ValueError("ensemble needs at least two members")
    rng = np.random.default_rng(seed)
    mdp = inst.mdp
    S, A = mdp.num_states, mdp.num_actions
    P_cdf = np.cumsum(mdp.transition, axis=2)
    members = np.zeros((num_members, S, A))
    acc = np.zeros((S, A))
    n_acc = 0
    gammas = []
    for sweep in range(sweeps):
        target = members.copy()
        mean = target.mean(axis=0)
        a_star = mean.argmax(axis=1)
        v_next = mean[np.arange(S), a_star]
        var_next = target.var(axis=0, ddof=1)[np.arange(S), a_star]
        gammas.append(float(var_next.mean()))
        r = mdp.reward + inst.reward_std * rng.standard_normal((num_members, S, A))
        u = rng.random((num_members, S, A, 1))
        s_next = np.minimum((u > P_cdf[None]).sum(axis=-1), S - 1)
        y = r + mdp.gamma * (v_next[s_next] - lambda_epi * var_next[s_next] - kappa)
        members += lr * (y - members)
        if sweep >= sweeps // 2:
            acc += members.mean(axis=0)
            n_acc += 1
    return EnsembleRun(acc / n_acc, members, float(np.mean(gammas[sweeps // 2 :])))


def bootstrap_ensemble_variance(
    inst: NoisyInstance,
    dataset_size: int,
    probe: tuple[int, int] = (1, 0),
    num_members: int = 10,
    seed: int = 0,
    init_scale: float = 10.0,
) -> float:
    """Ensemble variance (ddof=1) at ``probe`` for members fit on bootstrap resamples.

    A dataset of ``dataset_size`` transitions with uniformly drawn (s, a) is
    sampled once; each member is randomly initialised, refits the empirical model
    from its own bootstrap resample and solves it by value iteration. Pairs a
    member never sees keep their random initial value.
    """
    rng = np.random.default_rng(seed)
    mdp = inst.mdp
    S, A = mdp.num_states, mdp.num_actions
    s = rng.integers(0, S, dataset_size)
    a = rng.integers(0, A, dataset_size)
    r = mdp.reward[s, a] + inst.reward_std[s, a] * rng.standard_normal(dataset_size)
    cdf = np.cumsum(mdp.transition[s, a], axis=1)
    s_next = np.minimum((rng.random((dataset_size, 1)) > cdf).sum(axis=1), S - 1)

    preds = []
    for _ in range(num_members):
        init = rng.normal(0.0, init_scale, size=(S, A))
        idx = rng.integers(0, dataset_size, dataset_size)
        flat = s[idx] * A + a[idx]
        counts = np.bincount(flat, minlength=S * A).reshape(S, A)
        r_hat = np.bincount(flat, weights=r[idx], minlength=S * A).reshape(S, A)
        p_hat = np.zeros((S, A, S))
        np.add.at(p_hat, (s[idx], a[idx], s_next[idx]), 1.0)
        seen = counts > 0
        r_hat[seen] /= counts[seen]
        p_hat[seen] /= counts[seen][:, None]
        q = init.copy()
        for _ in range(2000):
            q_new = np.where(seen, r_hat + mdp.gamma * p_hat @ q.max(axis=1), init)
            if np.max(np.abs(q_new - q)) < 1e-10:
                q = q_new
                break
            q = q_new
        preds.append(q[probe])
    return float(np.var(preds, ddof=1))
