import math

import numpy as np
import pytest
from pydantic import ValidationError

from coalescent_core import OrderLengths
from errors import InvalidArgumentError
from coupling import GapSummary
from exact_moments import length_variance
from stats_harness import (ExperimentConfig, fit_joint_constant, formation_level_test,
                           median_gap_trend, moment_regression, rescale, rescale_factor,
                           run_clt_experiment, run_gap_experiment, run_sfs_experiment, sfs_table,
                           simulate_lengths, smoothing_error)


def config(**overrides):
    values = dict(n=40, s=2, replicates=300, master_seed=11)
    values.update(overrides)
    return ExperimentConfig(**values)


def test_config_validation():
    with pytest.raises(ValidationError):
        config(n=1, s=1)
    with pytest.raises(ValidationError):
        config(s=40)
    with pytest.raises(ValidationError):
        config(replicates=0)
    with pytest.raises(ValidationError):
        config(mode="forest")
    with pytest.raises(ValidationError):
        config(mutation_rate=-1.0)
    assert config().mode == "tree"


def test_rescale_examples():
    centred = OrderLengths(raw=np.array([2.0, 1.0, 2 / 3]), smoothed=np.zeros(3))
    assert np.allclose(rescale(centred, 100, 3), 0.0)
    assert rescale(np.array([2.2]), 100, 1)[0] == pytest.approx(0.4661, abs=1e-3)
    with pytest.raises(InvalidArgumentError):
        rescale(np.array([2.0]), 2, 1)


def test_rescale_factor_increases():
    factors = [rescale_factor(n) for n in range(3, 2000)]
    assert all(b > a for a, b in zip(factors, factors[1:]))


def test_rescale_keeps_leading_axes():
    z = rescale(np.full((5, 4), 2.0), 50, 2)
    assert z.shape == (5, 2)
    assert np.allclose(z[:, 0], 0.0)


@pytest.mark.parametrize("mode", ["tree", "chain", "coupled"])
def test_lengths_are_reproducible(mode):
    first = simulate_lengths(config(mode=mode, replicates=600))
    again = simulate_lengths(config(mode=mode, replicates=600))
    assert np.array_equal(first.raw, again.raw)
    assert np.array_equal(first.smoothed, again.smoothed)
    assert first.raw.shape == (600, 2)


def test_worker_count_does_not_change_results():
    serial = simulate_lengths(config(replicates=700, workers=1))
    parallel = simulate_lengths(config(replicates=700, workers=2))
    assert np.array_equal(serial.raw, parallel.raw)
    assert np.array_equal(serial.smoothed, parallel.smoothed)


def test_raw_length_means_in_every_mode():
    reps = 3000
    for mode in ("tree", "chain", "coupled"):
        samples = simulate_lengths(config(n=120, mode=mode, replicates=reps, master_seed=5))
        se = samples.raw.std(axis=0, ddof=1) / math.sqrt(reps)
        assert np.all(np.abs(samples.raw.mean(axis=0) - [2.0, 1.0]) < 4 * se), mode


def test_chain_and_tree_agree():
    reps = 3000
    tree = simulate_lengths(config(n=100, mode="tree", replicates=reps, master_seed=1))
    chain = simulate_lengths(config(n=100, mode="chain", replicates=reps, master_seed=2))
    se = np.sqrt(tree.smoothed.var(axis=0, ddof=1) / reps + chain.smoothed.var(axis=0, ddof=1) / reps)
    assert np.all(np.abs(tree.smoothed.mean(axis=0) - chain.smoothed.mean(axis=0)) < 4 * se)


def test_clt_with_one_replicate_is_flagged():
    summary = run_clt_experiment(config(replicates=1))
    assert summary.insufficient_sample
    assert summary.covariance is None
    assert len(summary.mean) == 2


def test_clt_small_run_is_sane():
    summary = run_clt_experiment(config(n=500, s=2, replicates=800, mode="chain"))
    assert not summary.insufficient_sample
    assert all(0 <= d <= 1 for d in summary.ks_distance)
    covariance = np.array(summary.covariance)
    assert np.allclose(covariance, covariance.T)
    assert np.all(np.abs(np.array(summary.raw_mean) - summary.target_raw_mean)
                  < 4 * np.array(summary.raw_mean_se))


@pytest.mark.parametrize("mode", ["tree", "chain"])
def test_moment_regression(mode):
    result = moment_regression(config(n=30, s=3, replicates=4000, mode=mode))
    assert result.within_four >= 0.97
    assert len(result.rows) == 30 * 3
    top = [row for row in result.rows if row.k == 30]
    assert all(row.z_score == 0.0 for row in top)
    assert all(row.oracle_mean == pytest.approx(row.exact_mean) for row in result.rows)


def test_moment_regression_refuses_coupled_mode():
    with pytest.raises(InvalidArgumentError):
        moment_regression(config(mode="coupled"))


def test_smoothing_error_shrinks_relative_to_lengths():
    result = smoothing_error(config(n=200, s=2, replicates=500, mode="chain"))
    assert all(v > 0 for v in result.variance)
    assert all(0 < c < 50 for c in result.scaled_variance)


def test_formation_level_test():
    result = formation_level_test(6, 3, 60_000, master_seed=3)
    assert result.levels == [3, 4, 5]
    assert result.p_value is not None and result.p_value > 0.001
    single = formation_level_test(3, 2, 2000, master_seed=3)
    assert single.p_value == 1.0


def test_sfs_experiment_and_table():
    cfg = config(n=30, s=3, replicates=400, mutation_rate=0.0)
    summary = run_sfs_experiment(cfg)
    assert summary.mean == [0.0, 0.0, 0.0]
    table = sfs_table(cfg)
    assert table.shape == (400, 4)
    assert not table.any()
    with pytest.raises(InvalidArgumentError):
        run_sfs_experiment(config())


def test_gap_experiment_with_one_order_is_zero():
    summary = run_gap_experiment(config(n=120, s=1, replicates=40, mode="coupled"))
    assert summary.median_gap == [0.0]
    assert summary.wall_time_s is not None
    with pytest.raises(InvalidArgumentError):
        run_gap_experiment(config(n=50, s=1, replicates=4, mode="coupled"))


def test_clt_reports_robust_and_smoothed_variances():
    summary = run_clt_experiment(config(n=500, s=2, replicates=800, mode="chain"))
    assert len(summary.robust_variance) == 2 and min(summary.robust_variance) > 0
    assert len(summary.smoothed_variance) == 2 and min(summary.smoothed_variance) > 0
    single = run_clt_experiment(config(replicates=1))
    assert single.smoothed_variance is None


def test_simulated_variances_match_exact_finite_n_values():
    n, reps = 30, 25_000
    samples = simulate_lengths(config(n=n, s=2, replicates=reps, mode="chain", master_seed=5))
    for r in (1, 2):
        exact = length_variance(n, r)
        raw = samples.raw[:, r - 1].var(ddof=1)
        smoothed = samples.smoothed[:, r - 1].var(ddof=1)
        assert raw == pytest.approx(float(exact.raw), rel=0.10)
        assert smoothed == pytest.approx(float(exact.smoothed), rel=0.10)


def gap_summary(n, mismatch, abs_diff, var_diff):
    return GapSummary(n=n, s=1, replicates=1, a_n=n, b_n=n, median_gap=[0.0], mean_gap=[0.0],
                      q95_gap=[0.0], region_variance=[[0.0]], region_variance_shape=[0.0],
                      variance_sum_constant=[0.0], mismatch_constant=mismatch,
                      abs_diff_constant=abs_diff, var_diff_constant=var_diff)


def test_joint_constant_is_the_largest_fit():
    summaries = [gap_summary(1000, 1.0, 2.0, 0.0), gap_summary(10_000, 1.5, 2.0, 0.0)]
    mismatch = fit_joint_constant(summaries, "mismatch_constant")
    assert mismatch.joint == 1.5 and mismatch.spread == 1.5
    assert mismatch.n_values == [1000, 10_000]
    assert fit_joint_constant(summaries, "abs_diff_constant").spread == 1.0
    assert fit_joint_constant(summaries, "var_diff_constant").spread == 1.0
    assert math.isinf(fit_joint_constant([gap_summary(1000, 0.0, 1.0, 0.0),
                                          gap_summary(2000, 1.0, 1.0, 0.0)],
                                         "mismatch_constant").spread)
    with pytest.raises(InvalidArgumentError):
        fit_joint_constant(summaries, "median_gap")
    with pytest.raises(InvalidArgumentError):
        fit_joint_constant([], "mismatch_constant")


def test_median_gap_trend_fits_joint_constants():
    trend = median_gap_trend([100, 150, 200], 2, 64, master_seed=4, fit_n_values=[100, 150])
    assert [summary.n for summary in trend.summaries] == [100, 150, 200]
    assert len(trend.median_gaps) == 3
    names = [constant.name for constant in trend.constants]
    assert names == ["mismatch_constant", "abs_diff_constant", "var_diff_constant"]
    for constant in trend.constants:
        assert constant.n_values == [100, 150]
        assert constant.joint == max(constant.per_n)
        assert math.isfinite(constant.joint)
