"""
Poisson mutation overlay and site frequency spectrum.

Mutations fall on every branch as a Poisson process with rate ν per unit
length; a mutation on a branch of order r is carried by r leaves and adds one
to M_r. Under the usual scaling ν = θ/2.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel

from coalescent_core import (InterCoalescenceTimes, MergeHistory, branch_table,
                             lengths_from_tree, sample_merge_history, sample_times)
from errors import InvalidArgumentError, InvariantViolation, require

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MutationConfig:
    rate: float  # ν, mutations per unit branch length

    def __post_init__(self):
        if not math.isfinite(self.rate) or self.rate < 0:
            raise InvalidArgumentError(f"mutation rate must be a finite value >= 0, got {self.rate}")

    @classmethod
    def from_theta(cls, theta: float) -> "MutationConfig":
        return cls(rate=theta / 2.0)

    @property
    def theta(self) -> float:
        return 2.0 * self.rate


@dataclass(frozen=True)
class SfsCounts:
    m: np.ndarray  # M_r for r = 1..n-1 at index r-1
    segregating_sites: int

    def __post_init__(self):
        if np.any(self.m < 0):
            raise InvariantViolation("negative site count")
        if int(self.m.sum()) != self.segregating_sites:
            raise InvariantViolation("segregating sites differ from the spectrum total")

    @property
    def n(self) -> int:
        return len(self.m) + 1


def branch_lengths(history: MergeHistory, times: InterCoalescenceTimes) -> Tuple[np.ndarray, np.ndarray]:
    """Orders and lengths of all 2n-2 branches."""
    orders, formed, ends = branch_table(history)
    elapsed = np.cumsum(times.by_level())
    return orders, elapsed[formed] - elapsed[ends]


def sample_sfs(history: MergeHistory, times: InterCoalescenceTimes, config: MutationConfig,
               rng: np.random.Generator) -> SfsCounts:
    if history.n != times.n:
        raise InvalidArgumentError(f"history has n={history.n} but times have n={times.n}")
    orders, lengths = branch_lengths(history, times)
    hits = rng.poisson(config.rate * lengths)
    m = np.zeros(history.n - 1, dtype=np.int64)
    np.add.at(m, orders - 1, hits)
    return SfsCounts(m=m, segregating_sites=int(hits.sum()))


def expected_segregating_sites(n: int, rate: float) -> float:
    """E(S_n) = 2ν·Σ_{k=1}^{n-1} 1/k."""
    require(n >= 2, f"need n >= 2 leaves, got {n}")
    return 2.0 * rate * math.fsum(1.0 / k for k in range(1, n))


def theta_conventions(rate: float, s: int) -> Dict[str, object]:
    """
    Reads ν both ways: as θ/2 (θ = 2ν) and as θ itself. The reported limit
    means ν·2/r do not depend on the reading.
    """
    return {
        "rate": rate,
        "theta_if_rate_is_half_theta": 2.0 * rate,
        "theta_if_rate_is_theta": rate,
        "limit_means": [rate * 2.0 / r for r in range(1, s + 1)],
    }


def sfs_samples(n: int, s: int, config: MutationConfig, replicates: int,
                rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """(M_1..M_s per replicate, S_n per replicate) from fresh trees."""
    require(1 <= s < n, f"need 1 <= s < n, got s={s}, n={n}")
    m = np.zeros((replicates, s), dtype=np.int64)
    segregating = np.zeros(replicates, dtype=np.int64)
    for i in range(replicates):
        counts = sample_sfs(sample_merge_history(n, rng), sample_times(n, rng), config, rng)
        m[i] = counts.m[:s]
        segregating[i] = counts.segregating_sites
    return m, segregating


class SfsSummary(BaseModel):
    n: int
    s: int
    rate: float
    replicates: int
    mean: List[float]
    mean_se: List[float]
    variance: List[float]
    dispersion: List[float]  # variance / mean, 0 where the mean is 0
    covariance: List[List[float]]
    correlation: List[List[float]]
    target_mean: List[float]
    mean_segregating_sites: float
    expected_segregating_sites: float
    conventions: Dict[str, object]
    wall_time_s: Optional[float] = None


def summarize_sfs(n: int, config: MutationConfig, m: np.ndarray,
                  segregating: np.ndarray) -> SfsSummary:
    replicates, s = m.shape
    x = m.astype(np.float64)
    mean = x.mean(axis=0)
    if replicates > 1:
        covariance = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    else:
        logger.warning("one replicate: spectrum variances reported as zero")
        covariance = np.zeros((s, s))
    variance = np.diag(covariance).copy()
    sd = np.sqrt(variance)
    scale = np.outer(sd, sd)
    correlation = np.divide(covariance, scale, out=np.zeros_like(covariance), where=scale > 0)
    dispersion = np.divide(variance, mean, out=np.zeros_like(mean), where=mean > 0)

    return SfsSummary(
        n=n, s=s, rate=config.rate, replicates=replicates,
        mean=mean.tolist(),
        mean_se=(sd / math.sqrt(replicates)).tolist(),
        variance=variance.tolist(),
        dispersion=dispersion.tolist(),
        covariance=covariance.tolist(),
        correlation=correlation.tolist(),
        target_mean=[config.rate * 2.0 / r for r in range(1, s + 1)],
        mean_segregating_sites=float(segregating.mean()),
        expected_segregating_sites=expected_segregating_sites(n, config.rate),
        conventions=theta_conventions(config.rate, s),
    )


def corollary_check(n: int, s: int, config: MutationConfig, replicates: int,
                    rng: np.random.Generator) -> SfsSummary:
    m, segregating = sfs_samples(n, s, config, replicates, rng)
    return summarize_sfs(n, config, m, segregating)


@dataclass(frozen=True)
class ConditionalSfsCheck:
    target: np.ndarray  # ν·ℒ^{n,r} of the frozen tree
    mean: np.ndarray
    variance: np.ndarray
    z_scores: np.ndarray


def conditional_sfs_check(history: MergeHistory, times: InterCoalescenceTimes,
                          config: MutationConfig, s: int, resamples: int,
                          rng: np.random.Generator) -> ConditionalSfsCheck:
    """Resample mutations on one fixed tree; M_r should be Poisson(ν·ℒ^{n,r})."""
    target = config.rate * lengths_from_tree(history, times, s, cross_check=False).raw
    draws = np.array([sample_sfs(history, times, config, rng).m[:s] for _ in range(resamples)],
                     dtype=np.float64)
    mean = draws.mean(axis=0)
    se = np.sqrt(target / resamples)
    z = np.divide(mean - target, se, out=np.zeros_like(mean), where=se > 0)
    return ConditionalSfsCheck(target=target, mean=mean,
                               variance=draws.var(axis=0, ddof=1) if resamples > 1 else np.zeros(s),
                               z_scores=z)
