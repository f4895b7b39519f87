"""
Optimal (maximal) coupling of the joint count chain V_k with s independent
copies of the external-count chain, Ṽ_k.

At every level both one-step laws are known exactly: Q from the joint chain,
Q̃ as the product of s external laws. With p = 1 - TV(Q, Q̃) both chains take a
common jump drawn from min(Q, Q̃)/p; otherwise they jump independently from
the two normalised positive parts. The exact layer below works in Fractions;
``simulate_coupled_paths`` runs the same construction in floating point for
many replicates at once.
"""

import functools
import itertools
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from branch_count_chain import (CountVector, Jump, JumpLaw, _weight_columns,
                                external_transition_law, jump_table, run_chain,
                                transition_law)
from coalescent_core import pair_count
from errors import InvalidArgumentError, InvariantViolation, ResourceLimitError, require

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CoupledState:
    k: int
    v: Tuple[int, ...]
    v_tilde: Tuple[int, ...]

    def __post_init__(self):
        if len(self.v) != len(self.v_tilde):
            raise InvalidArgumentError(f"state sizes differ: {self.v} vs {self.v_tilde}")
        CountVector(k=self.k, w=tuple(self.v))
        if any(not 0 <= w <= self.k for w in self.v_tilde):
            raise InvalidArgumentError(f"external counts {self.v_tilde} invalid at level {self.k}")

    @property
    def s(self) -> int:
        return len(self.v)


@dataclass(frozen=True)
class CouplingDecomposition:
    p: Fraction
    gamma_I: JumpLaw
    gamma_II: JumpLaw
    gamma_III: JumpLaw

    def first_marginal(self) -> JumpLaw:
        return _mix(self.p, self.gamma_I, self.gamma_II)

    def second_marginal(self) -> JumpLaw:
        return _mix(self.p, self.gamma_I, self.gamma_III)


def _mix(p: Fraction, common: JumpLaw, residual: JumpLaw) -> JumpLaw:
    weights: Dict[Jump, Fraction] = {}
    for z, q in common.items():
        weights[z] = weights.get(z, Fraction(0)) + p * q
    for z, q in residual.items():
        weights[z] = weights.get(z, Fraction(0)) + (1 - p) * q
    return JumpLaw(weights)


def product_external_law(k: int, v_tilde: Sequence[int]) -> JumpLaw:
    """Law of ΔṼ when the s components move as independent external chains."""
    return _product_external_law(k, tuple(int(w) for w in v_tilde))


@functools.lru_cache(maxsize=1 << 16)
def _product_external_law(k: int, v_tilde: Tuple[int, ...]) -> JumpLaw:
    marginals = [external_transition_law(k, int(w)) for w in v_tilde]
    weights: Dict[Jump, Fraction] = {}
    for combo in itertools.product(*(list(m.items()) for m in marginals)):
        z = tuple(part[0][0] for part in combo)
        weights[z] = math.prod((part[1] for part in combo), start=Fraction(1))
    return JumpLaw(weights)


def tv_distance(P: JumpLaw, Q: JumpLaw) -> Fraction:
    support = set(P.support()) | set(Q.support())
    return sum((abs(P[z] - Q[z]) for z in support), Fraction(0)) / 2


def tv_distance_by_events(P: JumpLaw, Q: JumpLaw) -> Fraction:
    """
    max_A |P(A) - Q(A)| over events A. Small supports are searched exhaustively;
    larger ones evaluate the maximising event {P > Q} and its complement.
    """
    support = sorted(set(P.support()) | set(Q.support()))
    if len(support) <= 16:
        best = Fraction(0)
        for size in range(len(support) + 1):
            for event in itertools.combinations(support, size):
                best = max(best, abs(sum((P[z] - Q[z] for z in event), Fraction(0))))
        return best
    above = sum((P[z] - Q[z] for z in support if P[z] > Q[z]), Fraction(0))
    below = sum((Q[z] - P[z] for z in support if Q[z] > P[z]), Fraction(0))
    return max(above, below)


def optimal_coupling(k: int, v: Sequence[int], v_tilde: Sequence[int]) -> CouplingDecomposition:
    state = CoupledState(k=k, v=tuple(int(w) for w in v), v_tilde=tuple(int(w) for w in v_tilde))
    require(k >= 2, f"no transition out of level {k}")
    Q = transition_law(k, state.v)
    Qt = product_external_law(k, state.v_tilde)
    p = 1 - tv_distance(Q, Qt)

    support = set(Q.support()) | set(Qt.support())
    gamma_I = JumpLaw({z: min(Q[z], Qt[z]) / p for z in support}) if p > 0 else JumpLaw.empty()
    if p < 1:
        gamma_II = JumpLaw({z: max(Q[z] - Qt[z], Fraction(0)) / (1 - p) for z in support})
        gamma_III = JumpLaw({z: max(Qt[z] - Q[z], Fraction(0)) / (1 - p) for z in support})
    else:
        gamma_II = gamma_III = JumpLaw.empty()
    return CouplingDecomposition(p=p, gamma_I=gamma_I, gamma_II=gamma_II, gamma_III=gamma_III)


def coupled_outcomes(decomposition: CouplingDecomposition) -> Dict[Tuple[Jump, Jump], Fraction]:
    """Exact joint law of (ΔV, ΔṼ) produced by one coupled step."""
    outcomes: Dict[Tuple[Jump, Jump], Fraction] = {}
    for z, q in decomposition.gamma_I.items():
        outcomes[(z, z)] = decomposition.p * q
    for z, q in decomposition.gamma_II.items():
        for zt, qt in decomposition.gamma_III.items():
            key = (z, zt)
            outcomes[key] = outcomes.get(key, Fraction(0)) + (1 - decomposition.p) * q * qt
    return outcomes


def coupled_jumps(decomposition: CouplingDecomposition,
                  rng: np.random.Generator) -> Tuple[Jump, Jump]:
    if decomposition.p == 1 or rng.random() < decomposition.p:
        z = decomposition.gamma_I.sample(rng)
        return z, z
    return decomposition.gamma_II.sample(rng), decomposition.gamma_III.sample(rng)


def coupled_step(state: CoupledState, rng: np.random.Generator) -> CoupledState:
    require(state.k >= 2, f"no transition out of level {state.k}")
    z, zt = coupled_jumps(optimal_coupling(state.k, state.v, state.v_tilde), rng)
    return CoupledState(
        k=state.k - 1,
        v=tuple(w + d for w, d in zip(state.v, z)),
        v_tilde=tuple(w + d for w, d in zip(state.v_tilde, zt)),
    )


@dataclass(frozen=True)
class CoupledPath:
    """Joint trajectory; row k holds V_k, Ṽ_k and whether ΔW_k(r) != ΔW̃_k(r)."""
    start: int
    stop: int
    v: np.ndarray
    v_tilde: np.ndarray
    mismatched: np.ndarray


def simulate_coupled_path(state: CoupledState, rng: np.random.Generator,
                          stop_level: int = 1) -> CoupledPath:
    require(1 <= stop_level < state.k, f"stop level {stop_level} not below {state.k}")
    v = np.zeros((state.k + 1, state.s), dtype=np.int64)
    vt = np.zeros_like(v)
    mismatched = np.zeros_like(v, dtype=bool)
    v[state.k], vt[state.k] = state.v, state.v_tilde
    while state.k > stop_level:
        following = coupled_step(state, rng)
        k = following.k
        v[k], vt[k] = following.v, following.v_tilde
        mismatched[k] = (v[k] - v[k + 1]) != (vt[k] - vt[k + 1])
        state = following
    return CoupledPath(start=len(v) - 1, stop=stop_level, v=v, v_tilde=vt, mismatched=mismatched)


@dataclass(frozen=True)
class RegionConfig:
    a_n: int
    b_n: int
    n: int

    def __post_init__(self):
        if not 1 <= self.b_n < self.a_n <= self.n:
            raise InvalidArgumentError(
                f"need 1 <= b_n < a_n <= n, got a_n={self.a_n}, b_n={self.b_n}, n={self.n}")

    @staticmethod
    def default_bounds(n: int) -> Tuple[int, int]:
        """(⌊n/(ln n)²⌋, ⌈√n⌉); for n below roughly 5000 these cross."""
        return int(n // math.log(n) ** 2), math.isqrt(n - 1) + 1

    @classmethod
    def default(cls, n: int) -> "RegionConfig":
        a_n, b_n = cls.default_bounds(n)
        return cls(a_n=a_n, b_n=b_n, n=n)


@dataclass
class CouplingDiagnostics:
    """
    Integer sums over replicates, indexed by level. ``mismatches[k, r-1]``
    counts ΔW_k(r) != ΔW̃_k(r) with ΔW_k = W_k - W_{k+1}; the difference
    sums are taken over d = W_k(r) - W̃_k(r).
    """
    top: int
    bottom: int
    s: int
    replicates: int = 0
    mismatches: np.ndarray = field(default=None)
    diff_sum: np.ndarray = field(default=None)
    abs_diff_sum: np.ndarray = field(default=None)
    sq_diff_sum: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in ("mismatches", "diff_sum", "abs_diff_sum", "sq_diff_sum"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros((self.top + 1, self.s), dtype=np.int64))

    def record_differences(self, k: int, v: np.ndarray, v_tilde: np.ndarray) -> None:
        d = v - v_tilde
        self.diff_sum[k] += d.sum(axis=0)
        self.abs_diff_sum[k] += np.abs(d).sum(axis=0)
        self.sq_diff_sum[k] += (d * d).sum(axis=0)

    def merge(self, other: "CouplingDiagnostics") -> "CouplingDiagnostics":
        if (self.top, self.bottom, self.s) != (other.top, other.bottom, other.s):
            raise InvalidArgumentError("cannot merge diagnostics over different level ranges")
        return CouplingDiagnostics(
            top=self.top, bottom=self.bottom, s=self.s,
            replicates=self.replicates + other.replicates,
            mismatches=self.mismatches + other.mismatches,
            diff_sum=self.diff_sum + other.diff_sum,
            abs_diff_sum=self.abs_diff_sum + other.abs_diff_sum,
            sq_diff_sum=self.sq_diff_sum + other.sq_diff_sum,
        )

    @property
    def levels(self) -> np.ndarray:
        """Levels k with a recorded jump into them, top-1 down to bottom."""
        return np.arange(self.top - 1, self.bottom - 1, -1)

    def mismatch_rate(self) -> np.ndarray:
        return self.mismatches / max(self.replicates, 1)

    def mean_abs_diff(self) -> np.ndarray:
        return self.abs_diff_sum / max(self.replicates, 1)

    def var_diff(self) -> np.ndarray:
        reps = max(self.replicates, 1)
        mean = self.diff_sum / reps
        return np.maximum(self.sq_diff_sum / reps - mean * mean, 0.0)


@dataclass(frozen=True)
class CoupledRun:
    """
    Output of the vectorised engine. ``lengths[i, g, r-1]`` is the smoothed
    length of order r collected over region g, i.e. levels
    boundaries[g+1] < k <= boundaries[g]. ``raw_lengths`` uses sampled
    X_k instead of 2/(k(k-1)) and is only filled when times were sampled.
    """
    boundaries: Tuple[int, ...]
    lengths: np.ndarray
    lengths_tilde: np.ndarray
    diagnostics: CouplingDiagnostics
    final_v: np.ndarray
    final_v_tilde: np.ndarray
    raw_lengths: Optional[np.ndarray] = None
    v_path: Optional[np.ndarray] = None        # (replicates, levels, s), start level first
    v_tilde_path: Optional[np.ndarray] = None

    @property
    def length_differences(self) -> np.ndarray:
        return self.lengths - self.lengths_tilde

    @staticmethod
    def concatenate(runs: Sequence["CoupledRun"]) -> "CoupledRun":
        """Stack replicate blocks in the given order and merge their diagnostics."""
        require(len(runs) > 0, "nothing to concatenate")
        diagnostics = runs[0].diagnostics
        for run in runs[1:]:
            diagnostics = diagnostics.merge(run.diagnostics)

        def stacked(name: str) -> Optional[np.ndarray]:
            parts = [getattr(run, name) for run in runs]
            return np.concatenate(parts) if all(p is not None for p in parts) else None

        return CoupledRun(
            boundaries=runs[0].boundaries,
            lengths=np.concatenate([run.lengths for run in runs]),
            lengths_tilde=np.concatenate([run.lengths_tilde for run in runs]),
            diagnostics=diagnostics,
            final_v=np.concatenate([run.final_v for run in runs]),
            final_v_tilde=np.concatenate([run.final_v_tilde for run in runs]),
            raw_lengths=stacked("raw_lengths"),
            v_path=stacked("v_path"),
            v_tilde_path=stacked("v_tilde_path"),
        )


@functools.lru_cache(maxsize=None)
def jump_space(s: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Union of the joint jump patterns and the product patterns {0,-1,-2}^s.
    Returns (space, joint columns, product columns, product digits), where
    digit d in a product pattern means that component moves by -d.
    """
    joint = jump_table(s)
    digits = np.array(list(itertools.product(range(3), repeat=s)), dtype=np.int64).reshape(-1, s)
    index: Dict[Jump, int] = {}
    for row in itertools.chain(joint, -digits):
        index.setdefault(tuple(int(x) for x in row), len(index))
    space = np.array(list(index), dtype=np.int64).reshape(-1, s)
    joint_cols = np.array([index[tuple(int(x) for x in row)] for row in joint])
    if len(set(joint_cols.tolist())) != len(joint):
        raise InvariantViolation(f"joint jump patterns collide for s={s}")
    product_cols = np.array([index[tuple(int(x) for x in row)] for row in -digits])
    return space, joint_cols, product_cols, digits


def _categorical(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of nonnegative ``weights``; rows must have positive mass."""
    cumulative = np.cumsum(weights, axis=1)
    target = rng.random(len(weights)) * cumulative[:, -1]
    idx = (cumulative <= target[:, None]).sum(axis=1)
    return np.minimum(idx, weights.shape[1] - 1)


def _one_step_laws(k: int, v: np.ndarray, vt: np.ndarray, space_size: int,
                   joint_cols: np.ndarray, product_cols: np.ndarray,
                   digits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    replicates, s = v.shape
    pairs = float(pair_count(k))
    Q = np.zeros((replicates, space_size))
    Q[:, joint_cols] = _weight_columns(k, v) / pairs

    free = k - vt
    components = np.stack([free * (free - 1) // 2, vt * free, vt * (vt - 1) // 2], axis=2) / pairs
    product = np.ones((replicates, len(digits)))
    for i in range(s):
        product *= components[:, i, digits[:, i]]
    Qt = np.zeros((replicates, space_size))
    Qt[:, product_cols] = product
    return Q, Qt


@dataclass(frozen=True)
class CouplingNumerators:
    """
    Q and Q̃ at level k as integers over ``denominator`` = C(k,2)^s, one column
    per row of ``jump_space(s)``. Leading axes follow the broadcast of v
    against ṽ.
    """
    k: int
    denominator: int
    first: np.ndarray
    second: np.ndarray

    @property
    def common(self) -> np.ndarray:
        return np.minimum(self.first, self.second)

    @property
    def residual(self) -> np.ndarray:
        return self.first - self.common

    @property
    def residual_tilde(self) -> np.ndarray:
        return self.second - self.common

    def agreement(self) -> np.ndarray:
        """p times the denominator."""
        return self.common.sum(axis=-1)

    def mismatch(self) -> np.ndarray:
        """P(ΔV != ΔṼ) times the denominator."""
        return self.denominator - self.agreement()

    def tv(self) -> np.ndarray:
        return np.abs(self.first - self.second).sum(axis=-1) // 2


def coupling_numerators(k: int, v, v_tilde) -> CouplingNumerators:
    """
    Exact one-step laws of many coupled states at once, in int64. ``v`` and
    ``v_tilde`` have shape (..., s) and broadcast against each other.
    """
    require(k >= 2, f"no transition out of level {k}")
    v = np.asarray(v, dtype=np.int64)
    vt = np.asarray(v_tilde, dtype=np.int64)
    require(v.ndim >= 1 and v.shape[-1] == vt.shape[-1], "state sizes differ")
    require(bool(np.all(v >= 0)) and bool(np.all(v.sum(axis=-1) <= k)),
            f"joint counts outside the state space at level {k}")
    require(bool(np.all((vt >= 0) & (vt <= k))), f"external counts outside 0..{k}")
    s = v.shape[-1]
    pairs = pair_count(k)
    denominator = pairs ** s
    if 2 * denominator > np.iinfo(np.int64).max:
        raise ResourceLimitError(f"C({k},2)^{s} is too large for exact int64 laws")

    space, joint_cols, product_cols, digits = jump_space(s)
    first = np.zeros(v.shape[:-1] + (len(space),), dtype=np.int64)
    weights = _weight_columns(k, v.reshape(-1, s)) * pairs ** (s - 1)
    first[..., joint_cols] = weights.reshape(v.shape[:-1] + (-1,))

    free = k - vt
    components = np.stack([free * (free - 1) // 2, vt * free, vt * (vt - 1) // 2], axis=-1)
    product = np.ones(vt.shape[:-1] + (len(digits),), dtype=np.int64)
    for i in range(s):
        product *= components[..., i, digits[:, i]]
    second = np.zeros(vt.shape[:-1] + (len(space),), dtype=np.int64)
    second[..., product_cols] = product

    shape = np.broadcast_shapes(first.shape, second.shape)
    return CouplingNumerators(k=k, denominator=denominator,
                              first=np.broadcast_to(first, shape),
                              second=np.broadcast_to(second, shape))


def simulate_coupled_paths(start_level: int, v: np.ndarray, v_tilde: np.ndarray,
                           rng: np.random.Generator, stop_level: int = 1,
                           boundaries: Optional[Sequence[int]] = None,
                           sample_times: bool = False, record_paths: bool = False) -> CoupledRun:
    """
    Couple many replicates from ``start_level`` down to ``stop_level``.
    ``v`` and ``v_tilde`` have shape (replicates, s). With ``sample_times``
    the joint chain also collects raw lengths Σ W_k(r)·X_k; ``record_paths``
    keeps V_k and Ṽ_k for every level.
    """
    v = np.array(v, dtype=np.int64)
    vt = np.array(v_tilde, dtype=np.int64)
    require(v.shape == vt.shape and v.ndim == 2, "start states must share shape (replicates, s)")
    require(1 <= stop_level < start_level, f"stop level {stop_level} not below {start_level}")
    boundaries = tuple(boundaries or (start_level, stop_level))
    require(boundaries[0] == start_level and boundaries[-1] == stop_level,
            "region boundaries must span the simulated levels")
    require(all(a >= b for a, b in zip(boundaries, boundaries[1:])),
            "region boundaries must be non-increasing")

    replicates, s = v.shape
    space, joint_cols, product_cols, digits = jump_space(s)
    diagnostics = CouplingDiagnostics(top=start_level, bottom=stop_level, s=s, replicates=replicates)
    diagnostics.record_differences(start_level, v, vt)

    region_of = np.zeros(start_level + 1, dtype=np.int64)
    for g, (upper, lower) in enumerate(zip(boundaries, boundaries[1:])):
        region_of[lower + 1:upper + 1] = g
    lengths = np.zeros((replicates, len(boundaries) - 1, s))
    lengths_tilde = np.zeros_like(lengths)
    raw = np.zeros((replicates, s)) if sample_times else None
    v_path = vt_path = None
    if record_paths:
        v_path = np.zeros((replicates, start_level - stop_level + 1, s), dtype=np.int64)
        vt_path = np.zeros_like(v_path)
        v_path[:, 0], vt_path[:, 0] = v, vt

    for k in range(start_level, stop_level, -1):
        weight = 2.0 / (k * (k - 1))
        lengths[:, region_of[k]] += weight * v
        lengths_tilde[:, region_of[k]] += weight * vt
        if sample_times:
            raw += rng.exponential(scale=weight, size=replicates)[:, None] * v

        Q, Qt = _one_step_laws(k, v, vt, len(space), joint_cols, product_cols, digits)
        common = np.minimum(Q, Qt)
        p = common.sum(axis=1)
        residual, residual_tilde = Q - common, Qt - common
        same = ((rng.random(replicates) < p)
                | (residual.sum(axis=1) <= 0.0)
                | (residual_tilde.sum(axis=1) <= 0.0))
        z_idx = _categorical(np.where(same[:, None], common, residual), rng)
        zt_idx = np.where(same, z_idx, _categorical(residual_tilde, rng))

        z, zt = space[z_idx], space[zt_idx]
        v += z
        vt += zt
        diagnostics.mismatches[k - 1] += (z != zt).sum(axis=0)
        diagnostics.record_differences(k - 1, v, vt)
        if record_paths:
            v_path[:, start_level - k + 1], vt_path[:, start_level - k + 1] = v, vt

    if np.any(v < 0) or np.any(vt < 0) or np.any(vt > stop_level):
        raise InvariantViolation("coupled chains left their state space")
    return CoupledRun(boundaries=boundaries, lengths=lengths, lengths_tilde=lengths_tilde,
                      diagnostics=diagnostics, final_v=v, final_v_tilde=vt, raw_lengths=raw,
                      v_path=v_path, v_tilde_path=vt_path)


def simulate_coupled_region(n: int, region: RegionConfig, s: int, rng: np.random.Generator,
                            replicates: int = 1, record_paths: bool = False) -> CoupledRun:
    """
    V_{a_n} from a true chain run n -> a_n; Ṽ_{a_n} from s independent
    external chains run n -> a_n (independent starting coupling); then the
    optimal coupling from a_n down to b_n. With ``record_paths`` the run
    carries both trajectories over a_n..b_n.
    """
    require(region.n == n, f"region was built for n={region.n}, not n={n}")
    require(1 <= s <= n - 1, f"need 1 <= s <= n-1, got s={s}, n={n}")
    v = vt = None
    for _, w in run_chain(n, s, replicates, rng, stop_level=region.a_n):
        v = w
    for _, w in run_chain(n, 1, replicates * s, rng, stop_level=region.a_n):
        vt = w
    return simulate_coupled_paths(region.a_n, v.copy(), vt.reshape(replicates, s).copy(), rng,
                                  stop_level=region.b_n, record_paths=record_paths)


def full_coupling_boundaries(n: int) -> Tuple[int, int, int, int]:
    """Levels (n, a_n, b_n, 1) of the three-region split, with b_n clipped to a_n when they cross."""
    a_n, b_n = RegionConfig.default_bounds(n)
    a_n = min(max(a_n, 1), n)
    if b_n > a_n:
        logger.warning(f"n={n}: default middle region is empty (a_n={a_n} < b_n={b_n}), clipping")
        b_n = a_n
    return n, a_n, b_n, 1


def coupled_regions(n: int, s: int, replicates: int, rng: np.random.Generator,
                    sample_times: bool = False) -> CoupledRun:
    """Couple from level n with V_n = (n, 0, ...) and Ṽ_n = (n, ..., n), split into three regions."""
    require(n >= 2, f"need n >= 2 leaves, got {n}")
    require(1 <= s <= n - 1, f"need 1 <= s <= n-1, got s={s}, n={n}")
    v = np.zeros((replicates, s), dtype=np.int64)
    v[:, 0] = n
    vt = np.full((replicates, s), n, dtype=np.int64)
    return simulate_coupled_paths(n, v, vt, rng, boundaries=full_coupling_boundaries(n),
                                  sample_times=sample_times)


class GapSummary(BaseModel):
    n: int
    s: int
    replicates: int
    a_n: int
    b_n: int
    median_gap: List[float]
    mean_gap: List[float]
    q95_gap: List[float]
    region_variance: List[List[float]]  # [region][r-1] variance of the centred difference
    region_variance_shape: List[float]
    variance_sum_constant: List[float]
    mismatch_constant: float
    abs_diff_constant: float = 0.0  # E|W_k - W̃_k| against the absolute-difference shape
    var_diff_constant: float = 0.0  # V(W_k - W̃_k) against the difference-variance shape
    wall_time_s: Optional[float] = None


def summarize_gap(n: int, run: CoupledRun) -> GapSummary:
    """
    Gap statistics of √(n/ln n)·|(L - mean L) - (L̃ - mean L̃)| per order, centred
    by the ensemble means. Region variances are compared with the
    variance-sum bound shape.
    """
    replicates, regions, s = run.lengths.shape
    scale = math.sqrt(n / math.log(n))
    centred = run.length_differences - run.length_differences.mean(axis=0)
    gaps = scale * np.abs(centred.sum(axis=1))

    _, a_n, b_n, _ = run.boundaries
    region_variance = centred.var(axis=0, ddof=1) if replicates > 1 else np.zeros((regions, s))
    shapes = [variance_sum_shape(n, upper, lower)
              for upper, lower in zip(run.boundaries, run.boundaries[1:])]
    constants = [fit_constant(region_variance[:, r], np.array(shapes)) for r in range(s)]

    diagnostics = run.diagnostics
    levels = diagnostics.levels
    levels = levels[levels >= 1]
    mismatch = diagnostics.mismatch_rate()[levels].max(axis=1)
    mismatch_constant = fit_constant(mismatch, lemma2_mismatch_shape(n, n, levels))
    # coupling starts at level n, so n stands in for a_n in the per-level shapes
    abs_diff = diagnostics.mean_abs_diff()[levels].max(axis=1)
    var_diff = diagnostics.var_diff()[levels].max(axis=1)

    return GapSummary(
        n=n, s=s, replicates=replicates, a_n=a_n, b_n=b_n,
        median_gap=np.median(gaps, axis=0).tolist(),
        mean_gap=gaps.mean(axis=0).tolist(),
        q95_gap=np.quantile(gaps, 0.95, axis=0).tolist(),
        region_variance=region_variance.tolist(),
        region_variance_shape=shapes,
        variance_sum_constant=constants,
        mismatch_constant=mismatch_constant,
        abs_diff_constant=fit_constant(abs_diff, lemma2_absdiff_shape(n, n, levels)),
        var_diff_constant=fit_constant(var_diff, lemma3_variance_shape(n, n, levels)),
    )


def coupled_length_gap(n: int, s: int, rng: np.random.Generator, replicates: int) -> GapSummary:
    require(n >= 100, f"gap statistics need n >= 100, got {n}")
    return summarize_gap(n, coupled_regions(n, s, replicates, rng))


def lemma2_mismatch_shape(n: int, a_n: int, k) -> np.ndarray:
    """k/(a_n √n) + a_n k/n² + 1/k."""
    k = np.asarray(k, dtype=np.float64)
    return k / (a_n * math.sqrt(n)) + a_n * k / n ** 2 + 1.0 / k


def lemma2_absdiff_shape(n: int, a_n: int, k) -> np.ndarray:
    """k²/(a_n √n) + a_n k²/n² + 1."""
    k = np.asarray(k, dtype=np.float64)
    return k ** 2 / (a_n * math.sqrt(n)) + a_n * k ** 2 / n ** 2 + 1.0


def lemma3_variance_shape(n: int, a_n: int, k) -> np.ndarray:
    """k²/(a_n √n) + a_n k²/n² + k³/(a_n n) + 1."""
    k = np.asarray(k, dtype=np.float64)
    return k ** 2 / (a_n * math.sqrt(n)) + a_n * k ** 2 / n ** 2 + k ** 3 / (a_n * n) + 1.0


def variance_sum_shape(n: int, a_n: int, b_n: int) -> float:
    """(1/(a_n √n) + a_n/n²)·ln²(a_n/b_n) + 1/n + 1/b_n²."""
    require(1 <= b_n <= a_n, f"need 1 <= b_n <= a_n, got a_n={a_n}, b_n={b_n}")
    log_ratio = math.log(a_n / b_n)
    return (1.0 / (a_n * math.sqrt(n)) + a_n / n ** 2) * log_ratio ** 2 + 1.0 / n + 1.0 / b_n ** 2


def fit_constant(observed, shape) -> float:
    """Smallest C with observed <= C·shape wherever shape > 0."""
    observed = np.asarray(observed, dtype=np.float64)
    shape = np.asarray(shape, dtype=np.float64)
    mask = shape > 0
    if not mask.any():
        return 0.0
    return float(np.max(observed[mask] / shape[mask], initial=0.0))
