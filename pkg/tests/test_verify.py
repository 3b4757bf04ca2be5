from fractions import Fraction

import pytest

from resac.verify import (
    SUITES,
    expected_t_bad_class,
    poisoning_runs,
    run_suite,
    suite_contraction,
    suite_depression,
    suite_disentangle,
    suite_gradients,
    suite_lipschitz,
    suite_tbad,
)


def test_expected_class_boundary():
    assert expected_t_bad_class(Fraction(1, 2), Fraction(1, 2)) == "non_contraction"
    assert expected_t_bad_class(Fraction(1, 2), Fraction(3, 5)) == "strict_expansion"
    assert expected_t_bad_class(Fraction(0), Fraction(0)) == "contraction"


def test_tbad_grid():
    rep = suite_tbad()
    assert rep["passed"] and rep["grid_points"] == 31 * 31


def test_contraction_small():
    rep = suite_contraction(trials=20, pairs=20, seed=3)
    assert rep["passed"] and rep["max_ratio_minus_gamma"] <= 1e-9


def test_depression_illustration():
    rep = suite_depression(trials=2)
    assert rep["passed"] and rep["delta_0125_rounded"] == 12.4


def test_poisoning_verdicts():
    runs = poisoning_runs()
    assert runs["pessimistic"]["verdict"] == "Poisoned"
    assert [1, 0] in runs["pessimistic"]["poisoned_set"]
    assert runs["balanced"]["verdict"] == "Healthy"


def test_disentangle_trend():
    rep = suite_disentangle()
    assert rep["spearman_rho"] < -0.9 and rep["kappa_constant"]
    assert len(set(rep["kappas"])) == 1


def test_lipschitz_and_gradients_small():
    assert suite_lipschitz(trials=500)["passed"]
    rep = suite_gradients(trials=1, coords=10)
    assert rep["passed"] and set(rep["networks"]) == {
        "critic_smoke", "policy_smoke", "critic_default", "policy_default",
    }


def test_run_suite_dispatch():
    with pytest.raises(KeyError):
        run_suite("nope")
    rep = run_suite("lemmas", trials=50)
    assert rep["passed"] and rep["trials"] == 50
    assert {"contraction", "lemmas", "tbad", "ranking", "disentangle", "poisoning", "lipschitz", "gradients"} <= set(SUITES)
