from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resac.mdp import FiniteMdp, bellman_backup, random_mdp, value_iteration
from resac.rev import (
    PenaltyConfig,
    Verdict,
    detect_poisoning,
    random_penalty,
    rev_backup,
    t_bad_apply,
    verify_contraction,
    verify_discounting,
    verify_monotonicity,
    verify_ranking_preservation,
    verify_t_bad_boundary,
)


def one_state(r=0.0, gamma=0.5):
    return FiniteMdp(np.ones((1, 1, 1)), np.array([[r]]), gamma)


def test_zero_penalty_is_plain_backup():
    rng = np.random.default_rng(0)
    mdp = random_mdp(rng, 4, 3, 0.9)
    q = rng.normal(size=(4, 3))
    assert np.array_equal(rev_backup(mdp, q, PenaltyConfig.zeros(mdp)), bellman_backup(mdp, q))


def test_single_state_kappa():
    mdp = one_state()
    pen = PenaltyConfig(1.0, 0.0, np.zeros((1, 1)))
    assert rev_backup(mdp, np.zeros((1, 1)), pen)[0, 0] == -0.5


def test_penalty_validation():
    with pytest.raises(ValueError):
        PenaltyConfig(-1.0, 0.0, np.zeros((1, 1)))
    with pytest.raises(ValueError):
        PenaltyConfig(0.0, 0.0, -np.ones((1, 1)))
    mdp = random_mdp(np.random.default_rng(0), 2, 2, 0.9)
    with pytest.raises(ValueError):
        rev_backup(mdp, np.zeros((2, 2)), PenaltyConfig(0.0, 0.0, np.zeros((3, 2))))


def test_uniform_shift_of_fixed_point():
    rng = np.random.default_rng(5)
    mdp = random_mdp(rng, 5, 3, 0.9)
    pen = PenaltyConfig.uniform(mdp, 0.3)
    plain, _, _ = value_iteration(mdp, tol=1e-12)
    rob, _, _ = value_iteration(mdp, lambda q: rev_backup(mdp, q, pen), tol=1e-12)
    assert np.allclose(plain - rob, 0.9 * 0.3 / 0.1, atol=1e-9)


class TestContraction:
    def test_random_instance(self):
        rng = np.random.default_rng(1)
        mdp = random_mdp(rng, 6, 4, 0.95)
        rep = verify_contraction(mdp, random_penalty(rng, mdp, 3.0), trials=300)
        assert rep.passed and rep.max_observed_ratio <= 0.95 + 1e-9

    def test_myopic(self):
        mdp = random_mdp(np.random.default_rng(2), 3, 3, 0.0)
        rep = verify_contraction(mdp, PenaltyConfig.zeros(mdp), trials=50)
        assert rep.max_observed_ratio == 0.0

    def test_single_state_ratio_is_gamma(self):
        mdp = one_state(gamma=0.7)
        rep = verify_contraction(mdp, PenaltyConfig(0.4, 1.0, np.ones((1, 1))), trials=20)
        assert rep.max_observed_ratio == pytest.approx(0.7, rel=1e-12)

    def test_witness_on_violation(self):
        # a backup that deliberately expands must be caught
        mdp = one_state(gamma=0.5)
        import resac.rev as rev

        orig = rev.rev_backup
        try:
            rev.rev_backup = lambda m, q, p: 2.0 * q
            rep = rev.verify_contraction(mdp, PenaltyConfig.zeros(mdp), trials=5)
        finally:
            rev.rev_backup = orig
        assert not rep.passed and rep.witness is not None


class TestLemmas:
    def test_shift_by_one(self):
        rng = np.random.default_rng(3)
        mdp = random_mdp(rng, 4, 2, 0.9)
        pen = random_penalty(rng, mdp)
        q = rng.normal(size=(4, 2))
        assert np.allclose(rev_backup(mdp, q + 1, pen) - rev_backup(mdp, q, pen), 0.9, atol=1e-13)
        assert np.array_equal(rev_backup(mdp, q, pen), rev_backup(mdp, q.copy(), pen))

    def test_discount_arithmetic(self):
        rng = np.random.default_rng(4)
        mdp = random_mdp(rng, 3, 2, 0.99)
        pen = random_penalty(rng, mdp)
        q = rng.normal(size=(3, 2))
        assert np.allclose(rev_backup(mdp, q - 5, pen) - rev_backup(mdp, q, pen), -4.95, atol=1e-12)
        assert np.array_equal(rev_backup(mdp, q + 0.0, pen), rev_backup(mdp, q, pen))

    def test_sweeps(self):
        rng = np.random.default_rng(6)
        mdp = random_mdp(rng, 5, 3, 0.97)
        pen = random_penalty(rng, mdp, 5.0)
        assert verify_monotonicity(mdp, pen, trials=500).passed
        rep = verify_discounting(mdp, pen, trials=500)
        assert rep.passed and rep.max_violation < 1e-10


class TestTBad:
    def test_apply(self):
        assert t_bad_apply(1.0, 0.6, 0.4) == 1.0
        assert t_bad_apply(2.0, 0.9, 0.3) == pytest.approx(2.4)
        assert t_bad_apply(0.0, 1.3, 0.7) == 0.0
        assert t_bad_apply(Fraction(2), Fraction(9, 10), Fraction(3, 10)) == Fraction(12, 5)

    def test_boundary_cases(self):
        eq = verify_t_bad_boundary(Fraction(3, 5), Fraction(2, 5))
        assert eq.classification == "non_contraction" and eq.distance_after == eq.distance_before
        strict = verify_t_bad_boundary(Fraction(1, 2), Fraction(3, 5))
        assert strict.is_strict_expansion and strict.witness_pair == (0, 1)
        assert strict.distance_after == Fraction(11, 10)
        half = verify_t_bad_boundary(Fraction(1, 4), Fraction(1, 4))
        assert half.is_contraction and half.distance_after == Fraction(1, 2)

    @given(st.integers(0, 40), st.integers(0, 40))
    def test_matches_sign(self, i, j):
        g, lam = Fraction(i, 20), Fraction(j, 20)
        expected = "contraction" if g + lam < 1 else ("non_contraction" if g + lam == 1 else "strict_expansion")
        assert verify_t_bad_boundary(g, lam).classification == expected

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            verify_t_bad_boundary(-0.1, 0.5)


class TestRanking:
    def test_illustration_value(self):
        mdp = random_mdp(np.random.default_rng(0), 3, 2, 0.99)
        rep = verify_ranking_preservation(mdp, PenaltyConfig.uniform(mdp, 0.125))
        assert rep.predicted_depression == pytest.approx(12.375, abs=1e-12)
        assert round(rep.predicted_depression, 1) == 12.4
        assert rep.passed

    def test_zero_delta(self):
        mdp = random_mdp(np.random.default_rng(1), 4, 3, 0.9)
        rep = verify_ranking_preservation(mdp, PenaltyConfig.uniform(mdp, 0.0))
        assert rep.measured_depression == 0.0 and rep.argmax_identical

    def test_random_instance(self):
        mdp = random_mdp(np.random.default_rng(7), 5, 3, 0.95)
        rep = verify_ranking_preservation(mdp, PenaltyConfig.uniform(mdp, 0.2))
        assert rep.argmax_identical and rep.depression_error <= 1e-6

    def test_state_only_gamma_via_lambda(self):
        # Gamma constant in (s, a) folded through lambda_epi is still uniform
        mdp = random_mdp(np.random.default_rng(8), 3, 2, 0.9)
        pen = PenaltyConfig(0.1, 0.5, np.full((3, 2), 0.2))
        rep = verify_ranking_preservation(mdp, pen)
        assert rep.predicted_depression == pytest.approx(0.9 * 0.2 / 0.1)
        assert rep.passed

    def test_non_uniform_rejected(self):
        mdp = random_mdp(np.random.default_rng(9), 3, 2, 0.9)
        pen = PenaltyConfig(0.0, 1.0, np.arange(6.0).reshape(3, 2))
        with pytest.raises(ValueError, match="uniform"):
            verify_ranking_preservation(mdp, pen)


class TestPoisoning:
    def setup_method(self):
        self.q_star = np.array([[10.0, 9.0], [5.0, 4.0], [1.0, 0.0]])
        self.sigma2 = np.array([[0.1, 0.1], [4.0, 4.0], [0.1, 0.1]])

    def test_healthy(self):
        v = detect_poisoning(self.q_star, self.q_star, self.sigma2, 1.0, 0.5)
        assert v.classification is Verdict.HEALTHY and v.poisoned_set == []

    def test_poisoned(self):
        q = self.q_star.copy()
        q[1] -= 10
        v = detect_poisoning(q, self.q_star, self.sigma2, 1.0, 0.5)
        assert v.classification is Verdict.POISONED
        assert v.poisoned_set == [(1, 0), (1, 1)]
        assert v.max_underestimation == 10.0

    def test_small_underestimate_is_not_poisoning(self):
        q = self.q_star.copy()
        q[1] -= 0.2  # within the margin
        assert detect_poisoning(q, self.q_star, self.sigma2, 1.0, 0.5).classification is Verdict.HEALTHY

    def test_low_variance_damage_is_not_poisoning(self):
        q = self.q_star - 10
        assert detect_poisoning(q, self.q_star, self.sigma2, 1.0, 0.5).classification is Verdict.HEALTHY

    def test_overestimation_and_divergence(self):
        v = detect_poisoning(self.q_star + 3, self.q_star, self.sigma2, 1.0, 0.5)
        assert v.classification is Verdict.OVERESTIMATION
        v = detect_poisoning(self.q_star + 1e7, self.q_star, self.sigma2, 1.0, 0.5)
        assert v.classification is Verdict.DIVERGENT
        q = self.q_star.copy()
        q[0, 0] = np.nan
        assert detect_poisoning(q, self.q_star, self.sigma2, 1.0, 0.5).classification is Verdict.DIVERGENT

    def test_validation(self):
        with pytest.raises(ValueError):
            detect_poisoning(self.q_star, self.q_star[:2], self.sigma2, 1.0, 0.5)
        with pytest.raises(ValueError):
            detect_poisoning(self.q_star, self.q_star, self.sigma2, 0.0, 0.5)
