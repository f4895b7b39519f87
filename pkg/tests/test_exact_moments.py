from fractions import Fraction

import pytest

from errors import InvalidArgumentError, ResourceLimitError, UnsupportedRegimeError
from exact_moments import (MomentRow, alpha_moment_ratio, asymptotic_mean_w,
                           asymptotic_remainder_constant, enumerate_tree_oracle, length_variance,
                           mean_length, mean_w, moment_report, propagate_chain_law,
                           second_moment_w, variance_bound_grid, variance_w)


def test_mean_examples():
    for n in (2, 5, 40):
        assert mean_w(n, n, 1) == n
    assert mean_w(4, 2, 2) == Fraction(2, 3)
    assert mean_w(5, 4, 3) == 0


def test_mean_rejects_r_at_least_n():
    with pytest.raises(InvalidArgumentError):
        mean_w(4, 2, 4)
    with pytest.raises(InvalidArgumentError):
        mean_w(4, 2, 0)
    with pytest.raises(InvalidArgumentError):
        mean_w(4, 5, 1)


def test_second_moment_examples():
    assert second_moment_w(4, 3, 1) == 4
    assert second_moment_w(4, 2, 1) == Fraction(2, 3)
    for n in (3, 9, 31):
        assert second_moment_w(n, n, 1) == n * n


def test_second_moment_refuses_small_n():
    with pytest.raises(UnsupportedRegimeError):
        second_moment_w(4, 2, 2)
    with pytest.raises(UnsupportedRegimeError):
        variance_w(6, 3, 3)


def test_variance_examples():
    assert variance_w(4, 3, 1).variance == 0
    assert variance_w(4, 2, 1).variance == Fraction(2, 3) - Fraction(4, 9)
    # outside the closed form's range the oracle still answers: W_2(2) is 2 w.p. 1/3, else 0
    law = enumerate_tree_oracle(4, 2)
    assert law.second_moment(2, 2) == Fraction(4, 3)
    assert law.variance(2, 2) == Fraction(8, 9)


def test_mean_length_is_two_over_r():
    assert mean_length(4, 2) == 1
    for n in range(2, 201, 7):
        for r in range(1, n):
            assert mean_length(n, r) == Fraction(2, r)
    with pytest.raises(InvalidArgumentError):
        mean_length(5, 5)


def test_asymptotic_mean():
    assert asymptotic_mean_w(100, 100, 1) == pytest.approx(100.0)
    assert asymptotic_mean_w(100, 50, 2) == pytest.approx(12.5)


def test_moment_report_is_consistent():
    report = moment_report(20, 7, 3)
    assert report.variance == report.second_moment - report.mean ** 2
    assert report.variance >= 0


def test_enumeration_small_cases():
    law = enumerate_tree_oracle(3, 2)
    assert law.distribution(2) == {(1, 1): Fraction(1)}
    law = enumerate_tree_oracle(4, 3)
    assert law.denominators[1] == 18
    assert law.distribution(2) == {(0, 2, 0): Fraction(1, 3), (1, 0, 1): Fraction(2, 3)}


def test_enumeration_is_capped():
    with pytest.raises(ResourceLimitError):
        enumerate_tree_oracle(8, 2)
    with pytest.raises(InvalidArgumentError):
        enumerate_tree_oracle(5, 5)


@pytest.mark.parametrize("n", [3, 4, 5, 6])
def test_closed_forms_match_enumeration(n):
    law = enumerate_tree_oracle(n, n - 1)
    for k in range(1, n + 1):
        assert law.total(k) == 1
        for r in range(1, n):
            assert law.mean(k, r) == mean_w(n, k, r)
            if n > 2 * r:
                assert law.second_moment(k, r) == second_moment_w(n, k, r)


@pytest.mark.parametrize("n", [3, 4, 5, 6])
def test_oracles_agree(n):
    for s in (1, n - 1):
        assert enumerate_tree_oracle(n, s).same_law(propagate_chain_law(n, s))


def test_enumeration_at_seven_leaves():
    law = enumerate_tree_oracle(7, 2)
    assert law.mean(3, 2) == mean_w(7, 3, 2)
    assert law.second_moment(3, 2) == second_moment_w(7, 3, 2)


def test_propagation_examples():
    law = propagate_chain_law(10, 3)
    assert law.mean(5, 1) == Fraction(20, 9) == mean_w(10, 5, 1)
    assert all(law.total(k) == 1 for k in law.levels)
    assert not law.same_law(propagate_chain_law(10, 2))


def test_propagation_matches_closed_forms():
    n, s = 40, 3
    law = propagate_chain_law(n, s)
    for k in range(1, n + 1):
        for r in range(1, s + 1):
            assert law.mean(k, r) == mean_w(n, k, r)
            assert law.second_moment(k, r) == second_moment_w(n, k, r)


def test_propagation_respects_state_limit(monkeypatch):
    from lab_config import LabConfig
    monkeypatch.setattr(LabConfig, "MAX_ORACLE_STATES", 3)
    with pytest.raises(ResourceLimitError):
        propagate_chain_law(30, 3)


def test_bound_constants_are_finite():
    fit = variance_bound_grid([10, 50, 120], 3)
    assert 0 < fit.constant < 10
    assert fit.at[0] in (10, 50, 120)
    remainder = asymptotic_remainder_constant([10, 50, 120], 3)
    assert 0 < remainder.constant < 20
    for alpha in (2, 3):
        ratio = alpha_moment_ratio(propagate_chain_law(30, 2), alpha)
        assert 0 < ratio.constant < 50


def test_moment_row_fields():
    row = MomentRow.from_values(4, 2, 2, mean_w(4, 2, 2))
    assert (row.mean_num, row.mean_den) == (2, 3)
    assert row.second_moment is None and row.variance is None
    full = MomentRow.from_values(4, 2, 1, mean_w(4, 2, 1), second_moment_w(4, 2, 1))
    assert (full.variance_num, full.variance_den) == (2, 9)
    assert full.mean == pytest.approx(2 / 3)


def test_length_variance_small_samples():
    two = length_variance(2, 1)
    assert (two.smoothed, two.raw) == (0, 4)
    three = length_variance(3, 1)
    assert (three.smoothed, three.raw) == (0, 2)
    # W_2(1) is 0 or 1 with probabilities 1/3, 2/3
    four = length_variance(4, 1)
    assert four.smoothed == Fraction(2, 9)
    assert four.raw == Fraction(16, 9)


def test_length_variance_matches_level_moments_without_cross_terms():
    law = propagate_chain_law(4, 2)
    result = length_variance(4, 2)
    # L^{4,2} = W_3(2)/3 + W_2(2) with W_3(2) = 1 always, so only level 2 varies
    assert result.smoothed == law.variance(2, 2)
    assert result.raw == result.smoothed + sum(
        (law.second_moment(k, 2) * Fraction(2, k * (k - 1)) ** 2 for k in (2, 3, 4)), Fraction(0))


def test_length_variance_rescaled_and_validated():
    result = length_variance(30, 2)
    smoothed, raw = result.rescaled()
    assert 0 < smoothed < raw
    with pytest.raises(InvalidArgumentError):
        length_variance(5, 5)
