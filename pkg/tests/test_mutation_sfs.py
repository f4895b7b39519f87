import math

import numpy as np
import pytest

from coalescent_core import sample_merge_history, sample_times
from errors import InvalidArgumentError
from mutation_sfs import (MutationConfig, branch_lengths, conditional_sfs_check,
                          corollary_check, expected_segregating_sites, sample_sfs, sfs_samples,
                          summarize_sfs, theta_conventions)


@pytest.fixture
def tree():
    rng = np.random.default_rng(123)
    return sample_merge_history(25, rng), sample_times(25, rng)


def test_rate_validation():
    with pytest.raises(InvalidArgumentError):
        MutationConfig(rate=-0.1)
    with pytest.raises(InvalidArgumentError):
        MutationConfig(rate=float("nan"))
    assert MutationConfig.from_theta(3.0).rate == 1.5
    assert MutationConfig(rate=0.7).theta == pytest.approx(1.4)


def test_zero_rate_gives_empty_spectrum(tree):
    history, times = tree
    counts = sample_sfs(history, times, MutationConfig(rate=0.0), np.random.default_rng(1))
    assert counts.segregating_sites == 0
    assert not counts.m.any()
    assert counts.n == 25


def test_mismatched_tree_is_rejected(tree):
    history, _ = tree
    with pytest.raises(InvalidArgumentError):
        sample_sfs(history, sample_times(24, np.random.default_rng(0)), MutationConfig(rate=1.0),
                   np.random.default_rng(0))


def test_branch_lengths_add_up(tree):
    history, times = tree
    orders, lengths = branch_lengths(history, times)
    assert len(orders) == 2 * 25 - 2
    assert np.all(lengths >= 0)
    assert lengths.sum() == pytest.approx(sum(k * x for k, x in enumerate(times.by_level())))


def test_spectrum_total_is_segregating_sites():
    rng = np.random.default_rng(9)
    for _ in range(50):
        history, times = sample_merge_history(15, rng), sample_times(15, rng)
        counts = sample_sfs(history, times, MutationConfig(rate=2.0), rng)
        assert counts.m.sum() == counts.segregating_sites
        assert len(counts.m) == 14


def test_conditional_poisson_on_frozen_tree(tree):
    history, times = tree
    check = conditional_sfs_check(history, times, MutationConfig(rate=3.0), 3, 4000,
                                  np.random.default_rng(55))
    assert np.all(np.abs(check.z_scores) < 4)
    mask = check.target > 0.5
    assert np.all(np.abs(check.variance[mask] / check.target[mask] - 1) < 0.15)


def test_spectrum_means_are_rate_times_two_over_r():
    reps = 6000
    m, segregating = sfs_samples(60, 3, MutationConfig(rate=1.0), reps, np.random.default_rng(2))
    se = m.std(axis=0, ddof=1) / math.sqrt(reps)
    assert np.all(np.abs(m.mean(axis=0) - [2.0, 1.0, 2 / 3]) < 4 * se)
    target = expected_segregating_sites(60, 1.0)
    assert abs(segregating.mean() - target) < 4 * segregating.std(ddof=1) / math.sqrt(reps)


def test_doubling_rate_doubles_means():
    reps = 4000
    low, _ = sfs_samples(40, 2, MutationConfig(rate=0.5), reps, np.random.default_rng(31))
    high, _ = sfs_samples(40, 2, MutationConfig(rate=1.0), reps, np.random.default_rng(32))
    se = np.sqrt(4 * low.var(axis=0, ddof=1) / reps + high.var(axis=0, ddof=1) / reps)
    assert np.all(np.abs(high.mean(axis=0) - 2 * low.mean(axis=0)) < 4 * se)


def test_expected_segregating_sites():
    assert expected_segregating_sites(2, 1.0) == pytest.approx(2.0)
    assert expected_segregating_sites(100, 1.0) == pytest.approx(10.355, abs=1e-3)
    assert expected_segregating_sites(100, 0.0) == 0.0


def test_theta_conventions():
    conventions = theta_conventions(0.5, 2)
    assert conventions["theta_if_rate_is_half_theta"] == 1.0
    assert conventions["theta_if_rate_is_theta"] == 0.5
    assert conventions["limit_means"] == [1.0, 0.5]


def test_summary_with_zero_rate():
    summary = corollary_check(30, 3, MutationConfig(rate=0.0), 50, np.random.default_rng(4))
    assert summary.mean == [0.0, 0.0, 0.0]
    assert summary.dispersion == [0.0, 0.0, 0.0]
    assert summary.mean_segregating_sites == 0.0


def test_summary_with_one_replicate():
    m = np.array([[3, 1]])
    summary = summarize_sfs(10, MutationConfig(rate=1.0), m, np.array([6]))
    assert summary.variance == [0.0, 0.0]
    assert summary.covariance == [[0.0, 0.0], [0.0, 0.0]]
    assert summary.target_mean == [2.0, 1.0]
