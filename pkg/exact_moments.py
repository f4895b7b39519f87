"""
Closed-form moments of the branch counts W_k(r) and two brute-force oracles
that check them: exhaustive enumeration of merge histories and exact forward
propagation of the count chain. Everything here is exact rational arithmetic.
"""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterable, Optional, Tuple

from pydantic import BaseModel

from branch_count_chain import transition_law
from coalescent_core import pair_count
from errors import (InvalidArgumentError, InvariantViolation, ResourceLimitError,
                    UnsupportedRegimeError, require)
from lab_config import LabConfig

logger = logging.getLogger(__name__)

State = Tuple[int, ...]


def _check_domain(n: int, k: int, r: int) -> None:
    if not n > r >= 1:
        raise InvalidArgumentError(f"need n > r >= 1, got n={n}, r={r}")
    require(1 <= k <= n, f"level {k} outside 1..{n}")


def mean_w(n: int, k: int, r: int) -> Fraction:
    """E(W_k(r)) = (n-k)_{r-1} / (n-1)_r · k(k-1), with (x)_m the falling factorial."""
    _check_domain(n, k, r)
    return Fraction(math.perm(n - k, r - 1), math.perm(n - 1, r)) * k * (k - 1)


def second_moment_w(n: int, k: int, r: int) -> Fraction:
    """E(W_k(r)²); the closed form only holds for n > 2r."""
    _check_domain(n, k, r)
    if n <= 2 * r:
        raise UnsupportedRegimeError(f"second moment formula needs n > 2r, got n={n}, r={r}")
    cross = Fraction(math.perm(n - k, 2 * r - 2), math.perm(n - 1, 2 * r))
    return mean_w(n, k, r) + cross * k * (k - 1) ** 2 * (k - 2)


@dataclass(frozen=True)
class VarianceBound:
    variance: Fraction
    bound_ratio: Fraction  # variance / (k²/n)


def variance_w(n: int, k: int, r: int) -> VarianceBound:
    m = mean_w(n, k, r)
    variance = second_moment_w(n, k, r) - m * m
    return VarianceBound(variance=variance, bound_ratio=variance * n / (k * k))


def asymptotic_mean_w(n: int, k: int, r: int) -> float:
    """Leading term ((n-k)/n)^{r-1} · k²/n of E(W_k(r))."""
    _check_domain(n, k, r)
    return ((n - k) / n) ** (r - 1) * k * k / n


def mean_length(n: int, r: int) -> Fraction:
    """Σ_k E(W_k(r)) · 2/(k(k-1)); equals 2/r."""
    if not 1 <= r <= n - 1:
        raise InvalidArgumentError(f"need 1 <= r <= n-1, got r={r}, n={n}")
    return sum((mean_w(n, k, r) * Fraction(2, k * (k - 1)) for k in range(2, n + 1)),
               Fraction(0))


@dataclass(frozen=True)
class MomentReport:
    n: int
    k: int
    r: int
    mean: Fraction
    second_moment: Fraction
    variance: Fraction
    asymptotic_mean: float


def moment_report(n: int, k: int, r: int) -> MomentReport:
    mean = mean_w(n, k, r)
    second = second_moment_w(n, k, r)
    return MomentReport(n=n, k=k, r=r, mean=mean, second_moment=second,
                        variance=second - mean * mean,
                        asymptotic_mean=asymptotic_mean_w(n, k, r))


class MomentRow(BaseModel):
    n: int
    k: int
    r: int
    mean_num: int
    mean_den: int
    mean: float
    second_num: Optional[int] = None
    second_den: Optional[int] = None
    second_moment: Optional[float] = None
    variance_num: Optional[int] = None
    variance_den: Optional[int] = None
    variance: Optional[float] = None
    asymptotic_mean: float

    @classmethod
    def from_values(cls, n: int, k: int, r: int, mean: Fraction,
                    second: Optional[Fraction] = None) -> "MomentRow":
        row = dict(n=n, k=k, r=r, mean_num=mean.numerator, mean_den=mean.denominator,
                   mean=float(mean), asymptotic_mean=asymptotic_mean_w(n, k, r))
        if second is not None:
            variance = second - mean * mean
            row.update(second_num=second.numerator, second_den=second.denominator,
                       second_moment=float(second), variance_num=variance.numerator,
                       variance_den=variance.denominator, variance=float(variance))
        return cls(**row)


@dataclass
class ExactChainLaw:
    """
    Law of V_k at every level k = n..1, stored as integer masses over one
    denominator per level so accumulation stays in exact integers.
    """
    n: int
    s: int
    masses: Dict[int, Dict[State, int]] = field(default_factory=dict)
    denominators: Dict[int, int] = field(default_factory=dict)

    @property
    def levels(self) -> range:
        return range(self.n, 0, -1)

    def distribution(self, k: int) -> Dict[State, Fraction]:
        denominator = self.denominators[k]
        return {state: Fraction(mass, denominator) for state, mass in self.masses[k].items()}

    def total(self, k: int) -> Fraction:
        return Fraction(sum(self.masses[k].values()), self.denominators[k])

    def moment(self, k: int, r: int, power: int = 1) -> Fraction:
        require(1 <= r <= self.s, f"order {r} is not tracked (s={self.s})")
        mass = sum(m * state[r - 1] ** power for state, m in self.masses[k].items())
        return Fraction(mass, self.denominators[k])

    def mean(self, k: int, r: int) -> Fraction:
        return self.moment(k, r)

    def second_moment(self, k: int, r: int) -> Fraction:
        return self.moment(k, r, 2)

    def variance(self, k: int, r: int) -> Fraction:
        m = self.mean(k, r)
        return self.second_moment(k, r) - m * m

    def same_law(self, other: "ExactChainLaw") -> bool:
        if (self.n, self.s) != (other.n, other.s):
            return False
        return all(self.distribution(k) == other.distribution(k) for k in self.levels)


def _reduce(masses: Dict[State, int], denominator: int) -> Tuple[Dict[State, int], int]:
    g = math.gcd(denominator, *masses.values())
    if g > 1:
        return {state: m // g for state, m in masses.items()}, denominator // g
    return masses, denominator


def _tracked(sizes: Iterable[int], s: int) -> State:
    counts = [0] * s
    for size in sizes:
        if size <= s:
            counts[size - 1] += 1
    return tuple(counts)


def enumerate_tree_oracle(n: int, s: int) -> ExactChainLaw:
    """
    Walk every merge history of the labelled n-coalescent. At level k each of
    the Π_{j>k} C(j,2) history prefixes is equally likely, so the law of V_k
    is a count of prefixes over that product.
    """
    if n > LabConfig.MAX_ENUMERATION_N:
        raise ResourceLimitError(
            f"history enumeration is capped at n={LabConfig.MAX_ENUMERATION_N}, got n={n}")
    require(n >= 2, f"need n >= 2 leaves, got {n}")
    require(1 <= s <= n - 1, f"need 1 <= s <= n-1, got s={s}, n={n}")

    law = ExactChainLaw(n=n, s=s)
    for k in law.levels:
        law.masses[k] = {}
    law.denominators[n] = 1
    for k in range(n - 1, 0, -1):
        law.denominators[k] = law.denominators[k + 1] * pair_count(k + 1)

    stack = [[1] * n]
    while stack:
        sizes = stack.pop()
        k = len(sizes)
        state = _tracked(sizes, s)
        law.masses[k][state] = law.masses[k].get(state, 0) + 1
        for j in range(1, k):
            for i in range(j):
                merged = list(sizes)
                merged[i] += merged[j]
                last = merged.pop()
                if j < k - 1:
                    merged[j] = last
                stack.append(merged)

    logger.debug(f"enumerated {law.denominators[1]} merge histories for n={n}")
    return law


def propagate_chain_law(n: int, s: int) -> ExactChainLaw:
    """Push exact mass through the one-step law of the count chain from V_n = (n, 0, ...)."""
    require(n >= 2, f"need n >= 2 leaves, got {n}")
    require(1 <= s <= n - 1, f"need 1 <= s <= n-1, got s={s}, n={n}")

    law = ExactChainLaw(n=n, s=s)
    start = (n,) + (0,) * (s - 1)
    law.masses[n] = {start: 1}
    law.denominators[n] = 1

    for k in range(n, 1, -1):
        current = law.masses[k]
        step = pair_count(k)
        following: Dict[State, int] = {}
        for state, mass in current.items():
            for jump, p in transition_law(k, state).items():
                # p has denominator dividing C(k,2)
                target = tuple(w + z for w, z in zip(state, jump))
                following[target] = following.get(target, 0) + mass * (p.numerator * (step // p.denominator))
        if len(following) > LabConfig.MAX_ORACLE_STATES:
            raise ResourceLimitError(
                f"chain law at level {k - 1} has {len(following)} states, "
                f"limit {LabConfig.MAX_ORACLE_STATES}")
        law.masses[k - 1], law.denominators[k - 1] = _reduce(following, law.denominators[k] * step)

    logger.debug(f"propagated chain law n={n} s={s}, "
                 f"widest level {max(len(m) for m in law.masses.values())} states")
    return law


@dataclass(frozen=True)
class LengthVariance:
    """V(L^{n,r}) with mean inter-coalescence times, and V(ℒ^{n,r}) with sampled ones."""
    n: int
    r: int
    smoothed: Fraction
    raw: Fraction

    def rescaled(self) -> Tuple[float, float]:
        """Both variances times n/(4 ln n), the scale whose limit is 1."""
        factor = self.n / (4.0 * math.log(self.n))
        return float(self.smoothed) * factor, float(self.raw) * factor


def length_variance(n: int, r: int) -> LengthVariance:
    """
    Exact finite-n variance of the order-r length. The count chain is pushed
    forward with, per state, its mass and the first two moments of the
    length collected so far. Given the counts, ℒ adds Σ_k W_k(r)²·V(X_k)
    with V(X_k) = (2/(k(k-1)))².
    """
    require(n >= 2, f"need n >= 2 leaves, got {n}")
    require(1 <= r <= n - 1, f"need 1 <= r <= n-1, got r={r}, n={n}")
    zero = Fraction(0)
    current: Dict[State, Tuple[Fraction, Fraction, Fraction]] = {
        (n,) + (0,) * (r - 1): (Fraction(1), zero, zero)}
    time_variance = zero

    for k in range(n, 1, -1):
        weight = Fraction(2, k * (k - 1))
        following: Dict[State, Tuple[Fraction, Fraction, Fraction]] = {}
        for state, (mass, first, second) in current.items():
            step = state[r - 1] * weight
            second += 2 * step * first + step * step * mass
            first += step * mass
            time_variance += mass * step * step
            for jump, p in transition_law(k, state).items():
                target = tuple(w + z for w, z in zip(state, jump))
                m, a, b = following.get(target, (zero, zero, zero))
                following[target] = (m + p * mass, a + p * first, b + p * second)
        if len(following) > LabConfig.MAX_ORACLE_STATES:
            raise ResourceLimitError(
                f"length law at level {k - 1} has {len(following)} states, "
                f"limit {LabConfig.MAX_ORACLE_STATES}")
        current = following

    mean = sum((first for _, first, _ in current.values()), zero)
    if mean != Fraction(2, r):
        raise InvariantViolation(f"propagated E(L^{{{n},{r}}}) = {mean}, expected 2/{r}")
    smoothed = sum((second for _, _, second in current.values()), zero) - mean * mean
    return LengthVariance(n=n, r=r, smoothed=smoothed, raw=smoothed + time_variance)


@dataclass(frozen=True)
class ConstantFit:
    """Largest observed ratio to a bound shape, with where it was attained."""
    constant: float
    at: Tuple[int, ...]


def alpha_moment_ratio(law: ExactChainLaw, alpha: int) -> ConstantFit:
    """max over (k, r) of E(W_k(r)^α) / (k^{2α}/n^α + k²/n)."""
    require(alpha >= 1, f"need alpha >= 1, got {alpha}")
    n = law.n
    best = ConstantFit(constant=0.0, at=(n, n, 1))
    for k in law.levels:
        shape = Fraction(k ** (2 * alpha), n ** alpha) + Fraction(k * k, n)
        for r in range(1, law.s + 1):
            ratio = float(law.moment(k, r, alpha) / shape)
            if ratio > best.constant:
                best = ConstantFit(constant=ratio, at=(n, k, r))
    return best


def variance_bound_grid(n_values: Iterable[int], r_max: int) -> ConstantFit:
    """max of V(W_k(r)) · n/k² over the grid, restricted to n > 2r."""
    best = ConstantFit(constant=0.0, at=())
    for n in n_values:
        for r in range(1, r_max + 1):
            if n <= 2 * r:
                continue
            for k in range(1, n + 1):
                ratio = float(variance_w(n, k, r).bound_ratio)
                if ratio > best.constant:
                    best = ConstantFit(constant=ratio, at=(n, k, r))
    logger.info(f"variance bound constant {best.constant:.6g} attained at (n,k,r)={best.at}")
    return best


def asymptotic_remainder_constant(n_values: Iterable[int], r_max: int) -> ConstantFit:
    """max of |E(W_k(r)) - ((n-k)/n)^{r-1} k²/n| / (k/n) over the grid."""
    best = ConstantFit(constant=0.0, at=())
    for n in n_values:
        for r in range(1, min(r_max, n - 1) + 1):
            for k in range(1, n + 1):
                gap = abs(float(mean_w(n, k, r)) - asymptotic_mean_w(n, k, r))
                ratio = gap * n / k
                if ratio > best.constant:
                    best = ConstantFit(constant=ratio, at=(n, k, r))
    return best
