"""Runtime property suites behind ``resac verify``.

Each suite returns a JSON-serializable dict with at least ``passed`` (bool).
"""

from __future__ import annotations

import math
import time
from fractions import Fraction

import numpy as np
from scipy.stats import spearmanr

from . import neural as nn
from .mdp import random_mdp
from .rev import (
    PenaltyConfig,
    Verdict,
    detect_poisoning,
    random_penalty,
    trial_rng,
    verify_contraction,
    verify_discounting,
    verify_monotonicity,
    verify_ranking_preservation,
    verify_t_bad_boundary,
)
from .tabular import bootstrap_ensemble_variance, noisy_chain, train_tabular_ensemble

DEPRESSION_DELTAS = (0.0, 0.05, 0.125, 0.5)
DATASET_SIZES = (100, 1_000, 10_000, 100_000)
SMOKE_CARDINALITIES = (40, 6, 2, 2)
DEFAULT_CARDINALITIES = (64, 22, 2, 13)


def _random_instance(rng: np.random.Generator, max_size: int = 8, gamma: float | None = None):
    S = int(rng.integers(1, max_size + 1))
    A = int(rng.integers(1, max_size + 1))
    g = float(rng.uniform(0.0, 0.99)) if gamma is None else gamma
    return random_mdp(rng, S, A, g)


def suite_contraction(trials: int = 100, seed: int = 0, pairs: int = 100) -> dict:
    """``trials`` random MDPs with random non-negative penalties, ``pairs`` Q-pairs each."""
    start = time.perf_counter()
    worst_excess, worst_ratio, failures = -math.inf, 0.0, []
    for m in range(trials):
        rng = trial_rng(seed, m)
        mdp = _random_instance(rng)
        pen = random_penalty(rng, mdp, scale=10.0 ** rng.uniform(-2, 2))
        rep = verify_contraction(mdp, pen, trials=pairs, seed=m)
        worst_ratio = max(worst_ratio, rep.max_observed_ratio)
        worst_excess = max(worst_excess, rep.max_observed_ratio - mdp.gamma)
        if not rep.passed:
            failures.append(m)
    return {
        "passed": not failures, "mdps": trials, "pairs_per_mdp": pairs, "max_ratio": worst_ratio,
        "max_ratio_minus_gamma": worst_excess, "failures": failures, "seconds": time.perf_counter() - start,
    }


def suite_lemmas(trials: int = 1000, seed: int = 0) -> dict:
    """Monotonicity and constant-shift equivariance, one fresh MDP per trial."""
    mono, disc = 0.0, 0.0
    mono_fail, disc_fail = [], []
    for t in range(trials):
        rng = trial_rng(seed, t)
        mdp = _random_instance(rng)
        pen = random_penalty(rng, mdp, scale=10.0 ** rng.uniform(-2, 2))
        m = verify_monotonicity(mdp, pen, trials=1, seed=t)
        d = verify_discounting(mdp, pen, trials=1, seed=t)
        mono, disc = max(mono, m.max_violation), max(disc, d.max_violation)
        if not m.passed:
            mono_fail.append(t)
        if not d.passed:
            disc_fail.append(t)
    return {
        "passed": not mono_fail and not disc_fail, "trials": trials,
        "monotonicity_max_violation": mono, "discounting_max_deviation": disc,
        "monotonicity_failures": mono_fail, "discounting_failures": disc_fail,
    }


def expected_t_bad_class(gamma, lam) -> str:
    s = gamma + lam
    return "contraction" if s < 1 else ("non_contraction" if s == 1 else "strict_expansion")


def suite_tbad(trials: int = 0, seed: int = 0) -> dict:
    """Exact rational sweep of the 31 x 31 grid gamma, lambda in {0, 1/20, ..., 3/2}."""
    grid = [Fraction(i, 20) for i in range(31)]
    mismatches, counts = [], {"contraction": 0, "non_contraction": 0, "strict_expansion": 0}
    for g in grid:
        for lam in grid:
            rep = verify_t_bad_boundary(g, lam)
            counts[rep.classification] += 1
            if rep.classification != expected_t_bad_class(g, lam):
                mismatches.append([str(g), str(lam)])
    eq = verify_t_bad_boundary(Fraction(1, 2), Fraction(1, 2))
    strict = verify_t_bad_boundary(Fraction(1, 2), Fraction(3, 5))
    witnesses = {
        "equality": {
            "gamma": "1/2", "lambda": "1/2", "pair": [str(q) for q in eq.witness_pair],
            "distance_before": str(eq.distance_before), "distance_after": str(eq.distance_after),
            "classification": eq.classification,
        },
        "strict": {
            "gamma": "1/2", "lambda": "3/5", "pair": [str(q) for q in strict.witness_pair],
            "distance_before": str(strict.distance_before), "distance_after": str(strict.distance_after),
            "classification": strict.classification,
        },
    }
    ok = (
        not mismatches
        and eq.classification == "non_contraction" and eq.distance_after == eq.distance_before
        and strict.classification == "strict_expansion" and strict.distance_after == Fraction(11, 10) * strict.distance_before
    )
    return {"passed": ok, "grid_points": len(grid) ** 2, "counts": counts, "mismatches": mismatches, "witnesses": witnesses}


def suite_depression(trials: int = 5, seed: int = 0, gamma: float = 0.99, tol: float = 1e-6) -> dict:
    """Measured uniform depression against gamma * Delta / (1 - gamma) for each Delta."""
    rows, ok = [], True
    for delta in DEPRESSION_DELTAS:
        for t in range(trials):
            rng = trial_rng(seed, 10_000 + t)
            mdp = random_mdp(rng, int(rng.integers(2, 7)), int(rng.integers(2, 5)), gamma)
            rep = verify_ranking_preservation(mdp, PenaltyConfig.uniform(mdp, delta), tol=tol, vi_tol=1e-9)
            ok &= rep.depression_matches
            rows.append({
                "delta": delta, "trial": t, "measured": rep.measured_depression,
                "predicted": rep.predicted_depression, "error": rep.depression_error,
            })
    illus = gamma * 0.125 / (1.0 - gamma)
    rounded = round(illus, 1)
    ok &= abs(rounded - 12.4) <= 0.05
    return {"passed": bool(ok), "rows": rows, "delta_0125_depression": illus, "delta_0125_rounded": rounded}


def suite_ranking(trials: int = 100, seed: int = 0) -> dict:
    failures, excluded = [], 0
    for t in range(trials):
        rng = trial_rng(seed, 20_000 + t)
        mdp = random_mdp(rng, int(rng.integers(2, 9)), int(rng.integers(2, 9)), float(rng.uniform(0.5, 0.99)))
        delta = float(rng.uniform(0.0, 1.0))
        rep = verify_ranking_preservation(mdp, PenaltyConfig.uniform(mdp, delta), tol=1e-6)
        if rep.inconclusive_states:
            excluded += 1  # near-tied greedy actions make the comparison ill-posed
            continue
        if not rep.argmax_identical:
            failures.append(t)
    return {"passed": not failures, "instances": trials, "excluded_for_ties": excluded, "failures": failures}


def poisoning_runs(seed: int = 0) -> dict:
    """Pessimistic vs balanced tabular ensembles on the noisy chain."""
    inst = noisy_chain()
    q_star, sigma2 = inst.q_star(), inst.sigma2
    out = {}
    for name, lam_epi, kappa in (("pessimistic", 5.0, 0.0), ("balanced", 0.005, 0.01)):
        run = train_tabular_ensemble(inst, lambda_epi=lam_epi, kappa=kappa, seed=seed)
        v = detect_poisoning(run.q_mean, q_star, sigma2, sigma0_sq=1.0, epsilon=0.5)
        out[name] = {
            "verdict": v.classification.value, "poisoned_set": [list(p) for p in v.poisoned_set],
            "max_underestimation": v.max_underestimation, "max_overestimation": v.max_overestimation,
            "q": run.q_mean.tolist(),
        }
    out["q_star"] = q_star.tolist()
    out["sigma2"] = sigma2.tolist()
    return out


def suite_poisoning(trials: int = 0, seed: int = 0) -> dict:
    runs = poisoning_runs(seed)
    ok = (
        runs["pessimistic"]["verdict"] == Verdict.POISONED.value
        and [1, 0] in runs["pessimistic"]["poisoned_set"]
        and runs["balanced"]["verdict"] == Verdict.HEALTHY.value
    )
    return {"passed": ok, **runs}


def fixed_network_kappa(lambda_ale: float = 0.01, seed: int = 0) -> float:
    critic = nn.CriticNet(3, SMOKE_CARDINALITIES, rng=np.random.default_rng(seed))
    return lambda_ale * nn.l1_norm_and_subgradient(critic.mlp)[0]


def suite_disentangle(trials: int = 0, seed: int = 0) -> dict:
    """Ensemble variance shrinks with data while the weight-norm penalty of a fixed network does not move."""
    variances, kappas = [], []
    critic = nn.CriticNet(3, SMOKE_CARDINALITIES, rng=np.random.default_rng(seed))
    inst = noisy_chain()
    for n in DATASET_SIZES:
        variances.append(bootstrap_ensemble_variance(inst, n, seed=seed))
        kappas.append(0.01 * nn.l1_norm_and_subgradient(critic.mlp)[0])
    rho = float(spearmanr(DATASET_SIZES, variances).statistic)
    constant = all(k == kappas[0] for k in kappas)
    return {
        "passed": rho < -0.9 and constant, "dataset_sizes": list(DATASET_SIZES), "variances": variances,
        "spearman_rho": rho, "kappas": kappas, "kappa_constant": constant,
    }


def _regress(net: nn.Mlp, rng: np.random.Generator, steps: int = 300) -> None:
    """A few hundred Adam steps on a random smooth target, to get non-initial weights."""
    opt = nn.AdamState.for_params(net.params(), lr=1e-3)
    for _ in range(steps):
        x = rng.normal(size=(64, net.sizes[0]))
        y = np.sin(x[:, :1]) + 0.1 * x.sum(axis=1, keepdims=True)
        out, cache = net.forward(x)
        grads, _ = net.backward(cache, 2.0 * (out - y) / len(x))
        nn.adam_step(opt, net.params(), nn.clip_global_norm(grads, 1.0))


def suite_lipschitz(trials: int = 10_000, seed: int = 0, nets: list | None = None, radius: float = 1e-2) -> dict:
    rng = np.random.default_rng(seed)
    if nets is None:
        fresh = nn.CriticNet(3, SMOKE_CARDINALITIES, rng=np.random.default_rng(seed)).mlp
        trained = nn.clone(fresh)
        _regress(trained, np.random.default_rng(seed + 1))
        nets = [("fresh_critic", fresh), ("regressed_critic", trained)]
    reports = {}
    for name, net in nets:
        rep = nn.verify_lipschitz_bound(net, trials, radius, rng)
        reports[name] = {"trials": rep.trials, "bound": rep.bound, "max_ratio": rep.max_ratio, "violations": rep.violations}
    return {"passed": all(r["violations"] == 0 for r in reports.values()), "radius": radius, "networks": reports}


# --- finite-difference gradient oracle ------------------------------------------------------


def _relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)


def _masks(caches) -> tuple:
    return tuple((z > 0).tobytes() for z in caches)


def finite_difference_check(loss_and_masks, params, analytic, rng, coords_per_array=40, h=1e-5) -> dict:
    """Central differences on a random subset of coordinates of every parameter array.

    ``loss_and_masks()`` returns the scalar loss and a hashable ReLU activation
    pattern; coordinates whose +/-h evaluations switch a ReLU are skipped, since
    the derivative does not exist across the kink.
    """
    worst, checked, skipped = 0.0, 0, 0
    for p, g in zip(params, analytic):
        flat_p, flat_g = p.reshape(-1), g.reshape(-1)
        n = flat_p.size
        idx = np.arange(n) if n <= coords_per_array else rng.choice(n, coords_per_array, replace=False)
        for i in idx:
            orig = flat_p[i]
            flat_p[i] = orig + h
            lp, mp = loss_and_masks()
            flat_p[i] = orig - h
            lm, mm = loss_and_masks()
            flat_p[i] = orig
            if mp != mm:
                skipped += 1
                continue
            num = (lp - lm) / (2 * h)
            worst = max(worst, float(_relative_error(np.array(flat_g[i]), np.array(num))))
            checked += 1
    return {"max_rel_error": worst, "checked": checked, "skipped_kinks": skipped}


def gradcheck_critic(cards, rng, batch=4, coords=40) -> dict:
    net = nn.CriticNet(3, cards, rng=rng)
    for p in net.params():  # move off the zero biases of a fresh init
        p += rng.normal(0.0, 0.05, size=p.shape)
    cont = rng.normal(size=(batch, 3))
    cats = np.stack([rng.integers(0, c, batch) for c in cards], axis=1)
    act = rng.uniform(-1, 1, (batch, 1))
    w = rng.normal(size=batch)

    def loss():
        q, (_, cache) = net.forward(cont, cats, act)
        return float(w @ q), _masks(cache[1:])

    q, cache = net.forward(cont, cats, act)
    grads, g_act = net.backward(cache, w)
    rep = finite_difference_check(loss, net.params(), grads, rng, coords)
    act_rep = finite_difference_check(loss, [act], [g_act], rng, coords)
    rep["max_rel_error"] = max(rep["max_rel_error"], act_rep["max_rel_error"])
    rep["checked"] += act_rep["checked"]
    return rep


def gradcheck_policy(cards, rng, batch=4, coords=40) -> dict:
    net = nn.PolicyNet(3, cards, rng=rng)
    for p in net.params():
        p += rng.normal(0.0, 0.05, size=p.shape)
    cont = rng.normal(size=(batch, 3))
    cats = np.stack([rng.integers(0, c, batch) for c in cards], axis=1)
    noise = rng.normal(size=(batch, 1))
    wa, wl = rng.normal(size=(batch, 1)), rng.normal(size=batch)

    def loss():
        s = net.sample(cont, cats, noise)
        _, cache, raw = s.cache[0]
        clamp = ((raw <= nn.LOG_STD_MIN) | (raw >= nn.LOG_STD_MAX)).tobytes()
        return float(np.sum(wa * s.action) + wl @ s.log_prob), _masks(cache[1:]) + (clamp,)

    s = net.sample(cont, cats, noise)
    grads = net.backward(s, wa, wl)
    return finite_difference_check(loss, net.params(), grads, rng, coords)


def suite_gradients(trials: int = 10, seed: int = 0, tol: float = 1e-4, coords: int = 40) -> dict:
    """Critic and policy networks at the smoke and default input layouts, ``trials`` random points each."""
    start = time.perf_counter()
    results = {}
    for layout, cards in (("smoke", SMOKE_CARDINALITIES), ("default", DEFAULT_CARDINALITIES)):
        for kind, fn in (("critic", gradcheck_critic), ("policy", gradcheck_policy)):
            worst, checked, skipped = 0.0, 0, 0
            for t in range(trials):
                rep = fn(cards, trial_rng(seed, 30_000 + t), coords=coords)
                worst = max(worst, rep["max_rel_error"])
                checked += rep["checked"]
                skipped += rep["skipped_kinks"]
            results[f"{kind}_{layout}"] = {"points": trials, "max_rel_error": worst, "checked": checked, "skipped_kinks": skipped}
    ok = all(r["max_rel_error"] <= tol for r in results.values())
    return {"passed": ok, "tol": tol, "networks": results, "seconds": time.perf_counter() - start}


SUITES = {
    "contraction": suite_contraction,
    "lemmas": suite_lemmas,
    "tbad": suite_tbad,
    "depression": suite_depression,
    "ranking": suite_ranking,
    "disentangle": suite_disentangle,
    "poisoning": suite_poisoning,
    "lipschitz": suite_lipschitz,
    "gradients": suite_gradients,
}


def run_suite(name: str, trials: int | None = None, seed: int = 0) -> dict:
    if name == "all":
        reports = {k: run_suite(k, trials, seed) for k in SUITES}
        return {"passed": all(r["passed"] for r in reports.values()), "suites": reports}
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES)} or 'all'")
    fn = SUITES[name]
    return fn(seed=seed) if trials is None else fn(trials=trials, seed=seed)
