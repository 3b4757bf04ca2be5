"""Penalized robust-ensemble value (REV) backup and runtime checks of its theory.

Every ``verify_*`` function returns a report carrying a witness on failure so a
violating instance can be replayed. Sweeps derive one RNG stream per trial from
``(seed, trial)``, so results do not depend on evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from .mdp import FiniteMdp, bellman_backup, greedy_values, sup_norm_distance, value_iteration


@dataclass(frozen=True)
class PenaltyConfig:
    kappa: float
    lambda_epi: float
    gamma_epi: np.ndarray  # Gamma[s, a], frozen for the backup

    def __post_init__(self):
        g = np.asarray(self.gamma_epi, dtype=np.float64)
        object.__setattr__(self, "gamma_epi", g)
        if not (np.isfinite(self.kappa) and self.kappa >= 0):
            raise ValueError(f"kappa must be finite and >= 0, got {self.kappa}")
        if not (np.isfinite(self.lambda_epi) and self.lambda_epi >= 0):
            raise ValueError(f"lambda_epi must be finite and >= 0, got {self.lambda_epi}")
        if g.ndim != 2 or not np.all(np.isfinite(g)) or np.any(g < 0):
            raise ValueError("gamma_epi must be a finite, non-negative (S, A) table")

    @classmethod
    def zeros(cls, mdp: FiniteMdp) -> "PenaltyConfig":
        return cls(0.0, 0.0, np.zeros((mdp.num_states, mdp.num_actions)))

    @classmethod
    def uniform(cls, mdp: FiniteMdp, delta: float) -> "PenaltyConfig":
        """Penalty with total per-entry shift ``delta`` carried entirely by kappa."""
        return cls(float(delta), 0.0, np.zeros((mdp.num_states, mdp.num_actions)))

    def total(self) -> np.ndarray:
        """Delta = lambda_epi * Gamma + kappa per entry."""
        return self.lambda_epi * self.gamma_epi + self.kappa


def random_penalty(rng: np.random.Generator, mdp: FiniteMdp, scale: float = 1.0) -> PenaltyConfig:
    shape = (mdp.num_states, mdp.num_actions)
    return PenaltyConfig(float(rng.uniform(0, scale)), float(rng.uniform(0, scale)), rng.uniform(0, scale, size=shape))


def rev_backup(mdp: FiniteMdp, q: np.ndarray, pen: PenaltyConfig) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(f"Q shape {q.shape} does not match MDP ({mdp.num_states}, {mdp.num_actions})")
    if pen.gamma_epi.shape != q.shape:
        raise ValueError(f"gamma_epi shape {pen.gamma_epi.shape} does not match Q shape {q.shape}")
    return mdp.reward + mdp.gamma * (mdp.transition @ greedy_values(q) - pen.lambda_epi * pen.gamma_epi - pen.kappa)


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(trial,)))


# --- contraction and Blackwell's conditions -------------------------------------------------


@dataclass
class ContractionReport:
    trials: int
    max_observed_ratio: float
    modulus: float
    witness: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def passed(self) -> bool:
        return self.witness is None


@dataclass
class PropertyReport:
    name: str
    trials: int
    max_violation: float
    witness: dict[str, Any] | None = None

    @property
    def passed(self) -> bool:
        return self.witness is None


def _random_q(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    scale = 10.0 ** rng.uniform(-2, 2)
    return rng.normal(0.0, scale, size=shape)


def verify_contraction(mdp: FiniteMdp, pen: PenaltyConfig, trials: int = 1000, seed: int = 0) -> ContractionReport:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    shape = (mdp.num_states, mdp.num_actions)
    worst, witness = 0.0, None
    for t in range(trials):
        rng = trial_rng(seed, t)
        q1 = _random_q(rng, shape)
        q2 = q1 + _random_q(rng, shape)
        d = sup_norm_distance(q1, q2)
        if d == 0.0:
            continue
        ratio = sup_norm_distance(rev_backup(mdp, q1, pen), rev_backup(mdp, q2, pen)) / d
        if ratio > worst:
            worst = ratio
            if ratio > mdp.gamma + 1e-9:
                witness = (q1, q2)
    return ContractionReport(trials, worst, mdp.gamma, witness)


def verify_monotonicity(
    mdp: FiniteMdp, pen: PenaltyConfig, trials: int = 1000, seed: int = 0, atol: float = 1e-10
) -> PropertyReport:
    shape = (mdp.num_states, mdp.num_actions)
    worst, witness = 0.0, None
    for t in range(trials):
        rng = trial_rng(seed, t)
        q1 = _random_q(rng, shape)
        q2 = q1 + np.abs(_random_q(rng, shape))
        excess = float(np.max(rev_backup(mdp, q1, pen) - rev_backup(mdp, q2, pen)))
        worst = max(worst, excess)
        if excess > atol and witness is None:
            witness = {"trial": t, "q1": q1, "q2": q2}
    return PropertyReport("monotonicity", trials, worst, witness)


def verify_discounting(
    mdp: FiniteMdp, pen: PenaltyConfig, trials: int = 1000, seed: int = 0, atol: float = 1e-10
) -> PropertyReport:
    shape = (mdp.num_states, mdp.num_actions)
    worst, witness = 0.0, None
    for t in range(trials):
        rng = trial_rng(seed, t)
        q = _random_q(rng, shape)
        c = float(rng.uniform(-10, 10))
        dev = float(np.max(np.abs(rev_backup(mdp, q + c, pen) - (rev_backup(mdp, q, pen) + mdp.gamma * c))))
        worst = max(worst, dev)
        if dev >= atol and witness is None:
            witness = {"trial": t, "q": q, "c": c}
    return PropertyReport("discounting", trials, worst, witness)


# --- the Q-dependent counterexample ---------------------------------------------------------


def t_bad_apply(q, gamma, lam):
    """Scalar operator whose aleatoric term scales with Q itself: (gamma + lam) * q.

    Generic over number types, so exact ``Fraction`` inputs stay exact.
    """
    return (gamma + lam) * q


@dataclass
class TBadReport:
    gamma: Any
    lam: Any
    is_contraction: bool
    is_strict_expansion: bool
    witness_pair: tuple[Any, Any]
    distance_before: Any
    distance_after: Any

    @property
    def classification(self) -> str:
        if self.is_contraction:
            return "contraction"
        return "strict_expansion" if self.is_strict_expansion else "non_contraction"


def verify_t_bad_boundary(gamma, lam) -> TBadReport:
    """Classify the scalar map q -> (gamma + lam) q from an explicit witness pair.

    With q1 = 0 and q2 = 1 the image distance equals the modulus, so comparing it
    against the input distance of 1 settles contraction, neutrality and expansion.
    """
    if gamma < 0 or lam < 0:
        raise ValueError("gamma and lambda must be non-negative")
    one = gamma - gamma + 1  # 1 in the caller's number type
    q1, q2 = 0 * one, one
    before = abs(q2 - q1)
    after = abs(t_bad_apply(q2, gamma, lam) - t_bad_apply(q1, gamma, lam))
    return TBadReport(
        gamma=gamma,
        lam=lam,
        is_contraction=after < before,
        is_strict_expansion=after > before,
        witness_pair=(q1, q2),
        distance_before=before,
        distance_after=after,
    )


# --- ranking preservation and Q-value depression --------------------------------------------


@dataclass
class RankingReport:
    argmax_identical: bool
    measured_depression: float
    predicted_depression: float
    inconclusive_states: list[int] = field(default_factory=list)
    depression_error: float = 0.0
    tol: float = 1e-6

    @property
    def depression_matches(self) -> bool:
        return self.depression_error <= self.tol

    @property
    def passed(self) -> bool:
        return self.argmax_identical and self.depression_matches


def _argmax_sets(q: np.ndarray, tie_tol: float) -> list[frozenset[int]]:
    best = q.max(axis=1, keepdims=True)
    return [frozenset(np.flatnonzero(row).tolist()) for row in (q >= best - tie_tol)]


def verify_ranking_preservation(
    mdp: FiniteMdp,
    pen: PenaltyConfig,
    tol: float = 1e-6,
    vi_tol: float = 1e-9,
    tie_tol: float = 1e-9,
    max_iter: int = 1_000_000,
) -> RankingReport:
    """Compare greedy actions and the uniform depression of plain vs REV fixed points.

    Requires a penalty total that is the same for every (s, a); the closed-form
    depression gamma * Delta / (1 - gamma) only holds in that regime.
    """
    delta = pen.total()
    if delta.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError("penalty table does not match the MDP")
    if not np.all(delta == delta.flat[0]):
        raise ValueError("ranking check requires a uniform penalty (constant over states and actions)")
    d = float(delta.flat[0])
    q_plain, _, _ = value_iteration(mdp, tol=vi_tol, max_iter=max_iter)
    q_rob, _, _ = value_iteration(mdp, lambda q: rev_backup(mdp, q, pen), tol=vi_tol, max_iter=max_iter)
    plain_sets = _argmax_sets(q_plain, tie_tol)
    rob_sets = _argmax_sets(q_rob, tie_tol)
    inconclusive = [s for s, (a, b) in enumerate(zip(plain_sets, rob_sets)) if len(a) > 1 or len(b) > 1]
    identical = all(a == b for a, b in zip(plain_sets, rob_sets))
    measured = float(np.mean(q_plain - q_rob))
    predicted = mdp.gamma * d / (1.0 - mdp.gamma)
    return RankingReport(identical, measured, predicted, inconclusive, abs(measured - predicted), tol)


# --- Q-value poisoning detector -------------------------------------------------------------


class Verdict(str, Enum):
    HEALTHY = "Healthy"
    POISONED = "Poisoned"
    OVERESTIMATION = "Overestimation"
    DIVERGENT = "Divergent"


@dataclass
class PoisoningVerdict:
    classification: Verdict
    poisoned_set: list[tuple[int, int]]
    max_underestimation: float
    max_overestimation: float


def detect_poisoning(
    q_t: np.ndarray,
    q_star: np.ndarray,
    sigma2: np.ndarray,
    sigma0_sq: float,
    epsilon: float,
    divergence_bound: float = 1e6,
) -> PoisoningVerdict:
    """Classify a learned Q-table against the optimal one.

    Checked in order: divergence (sup-norm above ``divergence_bound``), broad
    overestimation (more than half the entries above ``q_star + epsilon`` with no
    entry below ``q_star - epsilon``), poisoning (every high-variance entry below
    ``q_star - epsilon`` while every low-variance entry stays within ``epsilon``),
    otherwise healthy.
    """
    q_t = np.asarray(q_t, dtype=np.float64)
    q_star = np.asarray(q_star, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if not (q_t.shape == q_star.shape == sigma2.shape):
        raise ValueError(f"shape mismatch: {q_t.shape}, {q_star.shape}, {sigma2.shape}")
    if sigma0_sq <= 0 or epsilon <= 0:
        raise ValueError("sigma0_sq and epsilon must be positive")

    diff = q_t - q_star
    max_under = float(max(0.0, np.max(-diff)))
    max_over = float(max(0.0, np.max(diff)))

    def verdict(kind: Verdict, pairs=()) -> PoisoningVerdict:
        return PoisoningVerdict(kind, list(pairs), max_under, max_over)

    if not np.all(np.isfinite(q_t)) or np.max(np.abs(q_t)) > divergence_bound:
        return verdict(Verdict.DIVERGENT)
    under = diff < -epsilon
    over = diff > epsilon
    if over.sum() > 0.5 * diff.size and not under.any():
        return verdict(Verdict.OVERESTIMATION)
    high = sigma2 >= sigma0_sq
    if high.any() and np.all(under[high]) and np.all(np.abs(diff[~high]) <= epsilon):
        pairs = [(int(s), int(a)) for s, a in zip(*np.nonzero(high))]
        return verdict(Verdict.POISONED, pairs)
    return verdict(Verdict.HEALTHY)


__all__ = [
    "ContractionReport",
    "PenaltyConfig",
    "PoisoningVerdict",
    "PropertyReport",
    "RankingReport",
    "TBadReport",
    "Verdict",
    "bellman_backup",
    "detect_poisoning",
    "random_penalty",
    "rev_backup",
    "t_bad_apply",
    "verify_contraction",
    "verify_discounting",
    "verify_monotonicity",
    "verify_ranking_preservation",
    "verify_t_bad_boundary",
]
