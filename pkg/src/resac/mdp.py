"""Finite MDPs, the max-Bellman backup, and value iteration.

Q-tables are plain ``(num_states, num_actions)`` float64 arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

ROW_SUM_TOL = 1e-12


class ConvergenceError(RuntimeError):
    """Raised when value iteration exhausts its iteration budget."""

    def __init__(self, message: str, residuals: list[float]):
        super().__init__(message)
        self.residuals = residuals


@dataclass(frozen=True)
class FiniteMdp:
    transition: np.ndarray  # P[s, a, s']
    reward: np.ndarray  # R[s, a]
    gamma: float

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=np.float64)
        R = np.asarray(self.reward, dtype=np.float64)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        if P.shape[0] < 1 or P.shape[1] < 1:
            raise ValueError("need at least one state and one action")
        if R.shape != P.shape[:2]:
            raise ValueError(f"reward shape {R.shape} does not match (S, A) = {P.shape[:2]}")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not np.all(np.isfinite(P)) or not np.all(np.isfinite(R)):
            raise ValueError("transition and reward must be finite")
        if np.any(P < 0):
            raise ValueError("transition probabilities must be non-negative")
        row_err = np.abs(P.sum(axis=2) - 1.0)
        if np.any(row_err > ROW_SUM_TOL):
            s, a = np.unravel_index(np.argmax(row_err), row_err.shape)
            raise ValueError(
                f"transition row ({s}, {a}) sums to {P[s, a].sum()!r}, off by {row_err[s, a]:.3e}"
            )

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    def to_json(self) -> dict:
        return {"gamma": self.gamma, "P": self.transition.tolist(), "R": self.reward.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "FiniteMdp":
        return cls(np.array(doc["P"], dtype=np.float64), np.array(doc["R"], dtype=np.float64), float(doc["gamma"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "FiniteMdp":
        return cls.from_json(json.loads(Path(path).read_text()))


def random_mdp(rng: np.random.Generator, num_states: int, num_actions: int, gamma: float) -> FiniteMdp:
    """Random MDP: i.i.d. positive transition weights divided by their row sum, rewards in [-1, 1]."""
    raw = rng.random((num_states, num_actions, num_states)) + 1e-3
    P = raw / raw.sum(axis=2, keepdims=True)
    R = rng.uniform(-1.0, 1.0, size=(num_states, num_actions))
    return FiniteMdp(P, R, gamma)


def _check_q(mdp: FiniteMdp, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(f"Q shape {q.shape} does not match MDP ({mdp.num_states}, {mdp.num_actions})")
    return q


def greedy_value(q: np.ndarray, s: int) -> float:
    q = np.asarray(q)
    if not 0 <= s < q.shape[0]:
        raise IndexError(f"state {s} out of range for {q.shape[0]} states")
    return float(np.max(q[s]))


def greedy_values(q: np.ndarray) -> np.ndarray:
    return np.max(q, axis=1)


def bellman_backup(mdp: FiniteMdp, q: np.ndarray) -> np.ndarray:
    q = _check_q(mdp, q)
    return mdp.reward + mdp.gamma * (mdp.transition @ greedy_values(q))


def sup_norm_distance(q1: np.ndarray, q2: np.ndarray) -> float:
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    if q1.shape != q2.shape:
        raise ValueError(f"shape mismatch: {q1.shape} vs {q2.shape}")
    if q1.size == 0:
        return 0.0
    return float(np.max(np.abs(q1 - q2)))


def value_iteration(
    mdp: FiniteMdp,
    backup: Callable[[np.ndarray], np.ndarray] | None = None,
    tol: float = 1e-9,
    max_iter: int = 100_000,
    q0: np.ndarray | None = None,
) -> tuple[np.ndarray, int, float]:
    """Iterate ``backup`` from ``q0`` (zeros by default) until the sup-norm residual is <= tol.

    Returns ``(Q, iterations, final_residual)``. ``backup`` defaults to the plain
    max-Bellman backup of ``mdp``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if backup is None:
        backup = lambda q: bellman_backup(mdp, q)  # noqa: E731
    q = np.zeros((mdp.num_states, mdp.num_actions)) if q0 is None else _check_q(mdp, q0).copy()
    residuals: list[float] = []
    for it in range(1, max_iter + 1):
        q_next = backup(q)
        res = sup_norm_distance(q_next, q)
        residuals.append(res)
        q = q_next
        if res <= tol:
            return q, it, res
        if not np.isfinite(res):
            break
    raise ConvergenceError(
        f"value iteration did not reach tol={tol:g} in {len(residuals)} iterations "
        f"(last residual {residuals[-1]:.3e})",
        residuals,
    )
