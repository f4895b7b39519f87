"""
Monte Carlo experiments over replicate blocks.

Replicates are cut into fixed-size blocks; block b always draws from the
stream keyed by (master_seed, b) and results are gathered in block order, so
every summary is the same for any worker count.
"""

import logging
import math
import time
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence

import numpy as np
import scipy.stats
from joblib import Parallel, delayed
from pydantic import BaseModel, model_validator

from branch_count_chain import run_chain
from coalescent_core import (OrderLengths, formation_level_law_check, lengths_from_tree,
                             order_counts, sample_merge_history, sample_times)
from coupling import (CoupledRun, GapSummary, RegionConfig, coupled_regions,
                      simulate_coupled_region, summarize_gap)
from errors import InvalidArgumentError, require
from exact_moments import mean_w, propagate_chain_law, second_moment_w
from lab_config import LabConfig
from mutation_sfs import MutationConfig, SfsSummary, sfs_samples, summarize_sfs
from seeding import block_rng, replicate_blocks

logger = logging.getLogger(__name__)

Mode = Literal["tree", "chain", "coupled"]


class ExperimentConfig(BaseModel):
    n: int
    s: int = 1
    replicates: int
    master_seed: int
    mode: Mode = "tree"
    mutation_rate: Optional[float] = None
    workers: int = 1
    out: Optional[str] = None
    summary: Optional[str] = None

    @model_validator(mode="after")
    def check_ranges(self) -> "ExperimentConfig":
        if self.n < 2:
            raise ValueError(f"n must be >= 2, got {self.n}")
        if not 1 <= self.s <= self.n - 1:
            raise ValueError(f"s must lie in 1..n-1, got s={self.s}, n={self.n}")
        if self.replicates < 1:
            raise ValueError(f"replicates must be >= 1, got {self.replicates}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if self.mutation_rate is not None and self.mutation_rate < 0:
            raise ValueError(f"mutation rate must be >= 0, got {self.mutation_rate}")
        return self


@dataclass(frozen=True)
class LengthSamples:
    raw: np.ndarray       # (replicates, s)
    smoothed: np.ndarray  # (replicates, s)


@dataclass(frozen=True)
class BlockResult:
    raw: np.ndarray
    smoothed: np.ndarray
    count_sum: Optional[np.ndarray] = None     # Σ W_k(r) over the block, row k
    count_sq_sum: Optional[np.ndarray] = None  # Σ W_k(r)²


def _run_blocks(config: ExperimentConfig, task, *args) -> list:
    """Run ``task(seed, block, size, *args)`` over all blocks, results in block order."""
    blocks = list(replicate_blocks(config.replicates))
    logger.debug(f"{len(blocks)} blocks of up to {LabConfig.REPLICATE_BLOCK} on {config.workers} workers")
    return Parallel(n_jobs=config.workers)(
        delayed(task)(config.master_seed, block, size, *args) for block, _, size in blocks
    )


def _length_block(seed: int, block: int, size: int, n: int, s: int, mode: str,
                  keep_counts: bool) -> BlockResult:
    rng = block_rng(seed, block)
    raw = np.zeros((size, s))
    smoothed = np.zeros((size, s))
    count_sum = np.zeros((n + 1, s), dtype=np.int64) if keep_counts else None
    count_sq_sum = np.zeros((n + 1, s), dtype=np.int64) if keep_counts else None

    if mode == "tree":
        cross_check = n <= LabConfig.CROSS_CHECK_MAX_N
        for i in range(size):
            history = sample_merge_history(n, rng)
            path = order_counts(history, s)
            lengths = lengths_from_tree(history, sample_times(n, rng), s,
                                        cross_check=cross_check, path=path)
            raw[i], smoothed[i] = lengths.raw, lengths.smoothed
            if keep_counts:
                count_sum += path.counts
                count_sq_sum += path.counts * path.counts
    elif mode == "chain":
        for k, w in run_chain(n, s, size, rng):
            if keep_counts:
                count_sum[k] += w.sum(axis=0)
                count_sq_sum[k] += (w * w).sum(axis=0)
            if k >= 2:
                weight = 2.0 / (k * (k - 1))
                raw += rng.exponential(scale=weight, size=size)[:, None] * w
                smoothed += weight * w
    elif mode == "coupled":
        run = coupled_regions(n, s, size, rng, sample_times=True)
        raw = run.raw_lengths
        smoothed = run.lengths.sum(axis=1)
    else:
        raise InvalidArgumentError(f"unknown mode {mode!r}")
    return BlockResult(raw=raw, smoothed=smoothed, count_sum=count_sum, count_sq_sum=count_sq_sum)


def simulate_lengths(config: ExperimentConfig) -> LengthSamples:
    results = _run_blocks(config, _length_block, config.n, config.s, config.mode, False)
    return LengthSamples(raw=np.concatenate([r.raw for r in results]),
                         smoothed=np.concatenate([r.smoothed for r in results]))


def rescale_factor(n: int) -> float:
    return math.sqrt(n / (4.0 * math.log(n)))


def rescale(lengths, n: int, s: int) -> np.ndarray:
    """√(n/(4 ln n))·(ℒ^{n,r} - 2/r) for r = 1..s; accepts OrderLengths or an array (..., >= s)."""
    require(n >= 3, f"rescaling needs n >= 3, got {n}")
    raw = lengths.raw if isinstance(lengths, OrderLengths) else np.asarray(lengths, dtype=np.float64)
    mu = 2.0 / np.arange(1, s + 1)
    return rescale_factor(n) * (raw[..., :s] - mu)


class CltSummary(BaseModel):
    n: int
    s: int
    mode: str
    replicates: int
    master_seed: int
    mean: List[float]
    mean_se: Optional[List[float]] = None
    covariance: Optional[List[List[float]]] = None
    ks_distance: List[float]
    raw_mean: List[float]
    raw_mean_se: Optional[List[float]] = None
    target_raw_mean: List[float]
    robust_variance: List[float]                     # (IQR/1.349)² of the rescaled lengths
    smoothed_variance: Optional[List[float]] = None  # same rescaling applied to L^{n,r}
    insufficient_sample: bool = False
    wall_time_s: float


def run_clt_experiment(config: ExperimentConfig) -> CltSummary:
    started = time.perf_counter()
    require(config.n >= 3, f"the CLT rescaling needs n >= 3, got {config.n}")
    samples = simulate_lengths(config)
    z = rescale(samples.raw, config.n, config.s)
    reps = config.replicates

    insufficient = reps < 2
    if insufficient:
        logger.warning("a single replicate cannot estimate a covariance; summary flagged")
        covariance = mean_se = raw_se = smoothed_variance = None
    else:
        covariance = np.atleast_2d(np.cov(z, rowvar=False, ddof=1)).tolist()
        mean_se = (z.std(axis=0, ddof=1) / math.sqrt(reps)).tolist()
        raw_se = (samples.raw.std(axis=0, ddof=1) / math.sqrt(reps)).tolist()
        smoothed_variance = rescale(samples.smoothed, config.n, config.s).var(axis=0, ddof=1).tolist()
    ks = [float(scipy.stats.kstest(z[:, r], "norm").statistic) for r in range(config.s)]
    robust = np.atleast_1d(scipy.stats.iqr(z, axis=0, scale="normal")) ** 2

    summary = CltSummary(
        n=config.n, s=config.s, mode=config.mode, replicates=reps,
        master_seed=config.master_seed,
        mean=z.mean(axis=0).tolist(), mean_se=mean_se, covariance=covariance,
        ks_distance=ks,
        raw_mean=samples.raw.mean(axis=0).tolist(), raw_mean_se=raw_se,
        target_raw_mean=[2.0 / r for r in range(1, config.s + 1)],
        robust_variance=robust.tolist(), smoothed_variance=smoothed_variance,
        insufficient_sample=insufficient,
        wall_time_s=time.perf_counter() - started,
    )
    logger.info(f"CLT n={config.n} s={config.s} reps={reps}: mean={summary.mean} "
                f"KS={ks} in {summary.wall_time_s:.1f}s")
    return summary


class RegressionRow(BaseModel):
    k: int
    r: int
    empirical_mean: float
    empirical_variance: float
    exact_mean: float
    exact_variance: Optional[float] = None
    oracle_mean: Optional[float] = None
    z_score: Optional[float] = None


class MomentRegression(BaseModel):
    n: int
    s: int
    replicates: int
    rows: List[RegressionRow]
    within_four: float  # share of finite z-scores with |z| <= 4
    smoothing_variance: List[float]
    smoothing_constant: List[float]  # n·var(ℒ - L)


def moment_regression(config: ExperimentConfig) -> MomentRegression:
    """Empirical mean/variance of W_k(r) against the closed forms for every (k, r)."""
    n, s, reps = config.n, config.s, config.replicates
    require(config.mode in ("tree", "chain"), "moment regression runs in tree or chain mode")
    results = _run_blocks(config, _length_block, n, s, config.mode, True)
    count_sum = sum(r.count_sum for r in results)
    count_sq_sum = sum(r.count_sq_sum for r in results)
    gap = np.concatenate([r.raw - r.smoothed for r in results])

    oracle = propagate_chain_law(n, s) if n <= LabConfig.ORACLE_MAX_N else None
    rows = []
    for k in range(n, 0, -1):
        for r in range(1, s + 1):
            mean = count_sum[k, r - 1] / reps
            variance = max(count_sq_sum[k, r - 1] / reps - mean * mean, 0.0)
            exact_mean = mean_w(n, k, r)
            exact_variance = None
            if n > 2 * r:
                exact_variance = float(second_moment_w(n, k, r) - exact_mean * exact_mean)
            elif oracle is not None:
                exact_variance = float(oracle.variance(k, r))
            rows.append(RegressionRow(
                k=k, r=r, empirical_mean=mean, empirical_variance=variance,
                exact_mean=float(exact_mean), exact_variance=exact_variance,
                oracle_mean=float(oracle.mean(k, r)) if oracle is not None else None,
                z_score=_z_score(mean, float(exact_mean), exact_variance, reps),
            ))

    finite = [abs(row.z_score) for row in rows if row.z_score is not None and math.isfinite(row.z_score)]
    within = sum(z <= 4 for z in finite) / len(finite) if finite else 1.0
    smoothing_variance = gap.var(axis=0, ddof=1) if reps > 1 else np.zeros(s)
    logger.info(f"moment regression n={n} s={s}: {within:.2%} of z-scores within ±4")
    return MomentRegression(n=n, s=s, replicates=reps, rows=rows, within_four=within,
                            smoothing_variance=smoothing_variance.tolist(),
                            smoothing_constant=(n * smoothing_variance).tolist())


def _z_score(mean: float, exact: float, variance: Optional[float], reps: int) -> Optional[float]:
    if variance is None:
        return None
    if variance <= 0:
        return 0.0 if math.isclose(mean, exact, abs_tol=1e-12) else math.inf
    return (mean - exact) / math.sqrt(variance / reps)


class SmoothingError(BaseModel):
    n: int
    s: int
    replicates: int
    variance: List[float]
    scaled_variance: List[float]  # n·var(ℒ - L)
    q95: List[float]              # 95th percentile of √(n/ln n)·|ℒ - L|


def smoothing_error(config: ExperimentConfig) -> SmoothingError:
    samples = simulate_lengths(config)
    gap = samples.raw - samples.smoothed
    variance = gap.var(axis=0, ddof=1) if config.replicates > 1 else np.zeros(config.s)
    scaled = math.sqrt(config.n / math.log(config.n)) * np.abs(gap)
    return SmoothingError(n=config.n, s=config.s, replicates=config.replicates,
                          variance=variance.tolist(),
                          scaled_variance=(config.n * variance).tolist(),
                          q95=np.quantile(scaled, 0.95, axis=0).tolist())


class FormationTest(BaseModel):
    n: int
    k: int
    reps: int
    accepted: int
    levels: List[int]
    frequencies: List[float]
    chi_square: float
    p_value: Optional[float] = None


def formation_level_test(n: int, k: int, reps: int, master_seed: int) -> FormationTest:
    """Chi-square of the σ(1,2) law on {k..n-1} against the uniform law."""
    law = formation_level_law_check(n, k, reps, block_rng(master_seed, 0))
    if law.accepted == 0:
        statistic, p_value = 0.0, None
    elif len(law.counts) == 1:
        statistic, p_value = 0.0, 1.0
    else:
        result = scipy.stats.chisquare(law.counts)
        statistic, p_value = float(result.statistic), float(result.pvalue)
    return FormationTest(n=n, k=k, reps=reps, accepted=law.accepted,
                         levels=law.levels.tolist(), frequencies=law.frequencies.tolist(),
                         chi_square=statistic, p_value=p_value)


def _sfs_block(seed: int, block: int, size: int, n: int, s: int, rate: float):
    return sfs_samples(n, s, MutationConfig(rate=rate), size, block_rng(seed, block))


def run_sfs_experiment(config: ExperimentConfig) -> SfsSummary:
    require(config.mutation_rate is not None, "an SFS experiment needs a mutation rate")
    started = time.perf_counter()
    mutation = MutationConfig(rate=config.mutation_rate)
    results = _run_blocks(config, _sfs_block, config.n, config.s, mutation.rate)
    m = np.concatenate([r[0] for r in results])
    segregating = np.concatenate([r[1] for r in results])
    summary = summarize_sfs(config.n, mutation, m, segregating)
    summary.wall_time_s = time.perf_counter() - started
    return summary


def sfs_table(config: ExperimentConfig) -> np.ndarray:
    """Per-replicate M_1..M_s followed by S_n."""
    require(config.mutation_rate is not None, "an SFS experiment needs a mutation rate")
    results = _run_blocks(config, _sfs_block, config.n, config.s, config.mutation_rate)
    return np.column_stack([np.concatenate([r[0] for r in results]),
                            np.concatenate([r[1] for r in results])])


def _gap_block(seed: int, block: int, size: int, n: int, s: int) -> CoupledRun:
    return coupled_regions(n, s, size, block_rng(seed, block))


def run_gap_experiment(config: ExperimentConfig) -> GapSummary:
    require(config.n >= 100, f"gap statistics need n >= 100, got {config.n}")
    started = time.perf_counter()
    run = CoupledRun.concatenate(_run_blocks(config, _gap_block, config.n, config.s))
    summary = summarize_gap(config.n, run)
    summary.wall_time_s = time.perf_counter() - started
    logger.info(f"gap n={config.n}: median {summary.median_gap} in {summary.wall_time_s:.1f}s")
    return summary


def _region_block(seed: int, block: int, size: int, n: int, s: int, a_n: int, b_n: int) -> CoupledRun:
    region = RegionConfig(a_n=a_n, b_n=b_n, n=n)
    return simulate_coupled_region(n, region, s, block_rng(seed, block), replicates=size)


def run_region_experiment(config: ExperimentConfig, region: RegionConfig) -> CoupledRun:
    return CoupledRun.concatenate(
        _run_blocks(config, _region_block, config.n, config.s, region.a_n, region.b_n))


class JointConstant(BaseModel):
    """One bound constant fitted over several n; ``spread`` is largest over smallest per-n fit."""
    name: str
    n_values: List[int]
    per_n: List[float]
    joint: float
    spread: float


GAP_CONSTANTS = ("mismatch_constant", "abs_diff_constant", "var_diff_constant")


def fit_joint_constant(summaries: Sequence[GapSummary], name: str) -> JointConstant:
    """
    The smallest C with observed <= C·shape at every level of every run is the
    largest per-run constant.
    """
    require(len(summaries) > 0, "no gap summaries to fit")
    require(name in GAP_CONSTANTS, f"unknown constant {name!r}")
    per_n = [float(getattr(summary, name)) for summary in summaries]
    low, high = min(per_n), max(per_n)
    if low > 0:
        spread = high / low
    else:
        spread = 1.0 if high == 0 else math.inf
    return JointConstant(name=name, n_values=[summary.n for summary in summaries],
                         per_n=per_n, joint=high, spread=spread)


class GapTrend(BaseModel):
    summaries: List[GapSummary]
    constants: List[JointConstant]

    @property
    def median_gaps(self) -> List[List[float]]:
        return [summary.median_gap for summary in self.summaries]


def median_gap_trend(n_values: Sequence[int], s: int, replicates: int, master_seed: int,
                     workers: int = 1, fit_n_values: Optional[Sequence[int]] = None) -> GapTrend:
    """
    Gap summaries over increasing n, where the median for each order should
    fall, plus joint bound constants over ``fit_n_values`` (default: all n).
    """
    summaries = [run_gap_experiment(ExperimentConfig(n=n, s=s, replicates=replicates,
                                                     master_seed=master_seed, mode="coupled",
                                                     workers=workers))
                 for n in n_values]
    fitted = [summary for summary in summaries
              if fit_n_values is None or summary.n in set(fit_n_values)]
    constants = [fit_joint_constant(fitted, name) for name in GAP_CONSTANTS] if fitted else []
    for constant in constants:
        logger.info(f"{constant.name}: joint {constant.joint:.4g} over n={constant.n_values}, "
                    f"spread {constant.spread:.3g}")
    return GapTrend(summaries=summaries, constants=constants)
