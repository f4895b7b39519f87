"""
The branch-count Markov chain V_k = (W_k(1), ..., W_k(s)), run from level n
down to level 1 straight from its transition probabilities, with no tree.

Laws are exact: every weight is an integer numerator over C(k,2).
``run_chain`` draws a uniform integer in [0, C(k,2)) and walks the cumulative
numerators, so no floating point enters a simulated path. ``JumpLaw.sample``
is a float convenience for single exact-layer steps.
"""

import functools
import itertools
import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from coalescent_core import BranchCountPath, pair_count
from errors import InvalidArgumentError, require

logger = logging.getLogger(__name__)

Jump = Tuple[int, ...]


@dataclass(frozen=True)
class CountVector:
    k: int
    w: Tuple[int, ...]

    def __post_init__(self):
        if self.k < 1:
            raise InvalidArgumentError(f"level must be >= 1, got {self.k}")
        if any(x < 0 for x in self.w):
            raise InvalidArgumentError(f"negative count in {self.w}")
        if sum(self.w) > self.k:
            raise InvalidArgumentError(f"counts {self.w} exceed level {self.k}")

    @property
    def s(self) -> int:
        return len(self.w)

    @property
    def tracked(self) -> int:
        return sum(self.w)


def _count_vector(k: int, v: Union[CountVector, Tuple[int, ...]]) -> CountVector:
    if isinstance(v, CountVector):
        if v.k != k:
            raise InvalidArgumentError(f"state attached to level {v.k}, used at level {k}")
        return v
    return CountVector(k=k, w=tuple(int(x) for x in v))


class JumpLaw:
    """Sparse law over jump vectors z in {-2,-1,0,1}^s with rational weights."""

    def __init__(self, weights: Dict[Jump, Fraction]):
        self._weights = {z: Fraction(p) for z, p in weights.items() if p != 0}

    @classmethod
    def from_numerators(cls, numerators: Dict[Jump, int], denominator: int) -> "JumpLaw":
        return cls({z: Fraction(c, denominator) for z, c in numerators.items()})

    @classmethod
    def empty(cls) -> "JumpLaw":
        return cls({})

    def __getitem__(self, z: Jump) -> Fraction:
        return self._weights.get(tuple(z), Fraction(0))

    def __len__(self) -> int:
        return len(self._weights)

    def __eq__(self, other) -> bool:
        return isinstance(other, JumpLaw) and self._weights == other._weights

    def __repr__(self) -> str:
        return f"JumpLaw({dict(sorted(self._weights.items()))})"

    def items(self):
        return self._weights.items()

    def support(self) -> List[Jump]:
        return sorted(self._weights)

    def total(self) -> Fraction:
        return sum(self._weights.values(), Fraction(0))

    def first_moment(self, r: int) -> Fraction:
        """Σ_z z_r · P(z), orders counted from 1."""
        return sum((z[r - 1] * p for z, p in self._weights.items()), Fraction(0))

    def sample(self, rng: np.random.Generator) -> Jump:
        support = self.support()
        cumulative = np.cumsum([float(self._weights[z]) for z in support])
        idx = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))
        return support[min(idx, len(support) - 1)]


def unit(i: int, s: int) -> np.ndarray:
    """e_i, which is the zero vector for i > s."""
    e = np.zeros(s, dtype=np.int64)
    if i <= s:
        e[i - 1] = 1
    return e


def jump_table(s: int) -> np.ndarray:
    """
    Jump vectors in the column order used by ``_weight_columns``: stay, then
    -e_i, then -2e_i + e_2i, then -e_i - e_j + e_{i+j} for i < j.
    """
    rows = [np.zeros(s, dtype=np.int64)]
    rows += [-unit(i, s) for i in range(1, s + 1)]
    rows += [-2 * unit(i, s) + unit(2 * i, s) for i in range(1, s + 1)]
    rows += [-unit(i, s) - unit(j, s) + unit(i + j, s)
             for i, j in itertools.combinations(range(1, s + 1), 2)]
    return np.vstack(rows)


def _weight_columns(k: int, w: np.ndarray) -> np.ndarray:
    """Integer numerators over C(k,2) for every row of ``w`` (shape (R, s))."""
    s = w.shape[1]
    free = k - w.sum(axis=1)
    cols = [free * (free - 1) // 2]
    cols += [w[:, i] * free for i in range(s)]
    cols += [w[:, i] * (w[:, i] - 1) // 2 for i in range(s)]
    cols += [w[:, i] * w[:, j] for i, j in itertools.combinations(range(s), 2)]
    return np.column_stack(cols)


def transition_law(k: int, v: Union[CountVector, Tuple[int, ...]]) -> JumpLaw:
    """One-step law of ΔV when leaving level k in state v. Laws are cached per (k, v)."""
    require(k >= 2, f"no transition out of level {k}")
    return _transition_law(k, _count_vector(k, v))


@functools.lru_cache(maxsize=1 << 16)
def _transition_law(k: int, v: CountVector) -> JumpLaw:
    s = v.s
    m = v.tracked
    numerators: Dict[Jump, int] = {}

    def add(z: np.ndarray, weight: int) -> None:
        if weight:
            key = tuple(int(x) for x in z)
            numerators[key] = numerators.get(key, 0) + weight

    add(np.zeros(s, dtype=np.int64), pair_count(k - m))
    for i, wi in enumerate(v.w, start=1):
        add(-unit(i, s), wi * (k - m))
        add(-2 * unit(i, s) + unit(2 * i, s), pair_count(wi))
        for j in range(i + 1, s + 1):
            add(-unit(i, s) - unit(j, s) + unit(i + j, s), wi * v.w[j - 1])
    return JumpLaw.from_numerators(numerators, pair_count(k))


def external_transition_law(k: int, w: int) -> JumpLaw:
    """One-step law of the external count alone (s = 1)."""
    require(k >= 2, f"no transition out of level {k}")
    if not 0 <= w <= k:
        raise InvalidArgumentError(f"external count {w} outside 0..{k}")
    return _external_transition_law(k, int(w))


@functools.lru_cache(maxsize=1 << 16)
def _external_transition_law(k: int, w: int) -> JumpLaw:
    return JumpLaw.from_numerators(
        {(0,): pair_count(k - w), (-1,): w * (k - w), (-2,): pair_count(w)},
        pair_count(k),
    )


def count_vectors(k: int, s: int, max_total: Optional[int] = None) -> Iterator[CountVector]:
    """Every valid state at level k with Σw <= min(k, max_total)."""
    cap = k if max_total is None else min(k, max_total)
    for w in itertools.product(range(cap + 1), repeat=s):
        if sum(w) <= cap:
            yield CountVector(k=k, w=w)


def run_chain(n: int, s: int, replicates: int, rng: np.random.Generator,
              start_level: Optional[int] = None, start_state: Optional[np.ndarray] = None,
              stop_level: int = 1) -> Iterator[Tuple[int, np.ndarray]]:
    """
    Run ``replicates`` independent chains side by side and yield (k, V_k) for
    k = start_level .. stop_level. The yielded array is reused; copy it to keep it.
    """
    start_level = start_level or n
    if start_state is None:
        require(start_level == n, "a start state is needed below level n")
        w = np.zeros((replicates, s), dtype=np.int64)
        w[:, 0] = n
    else:
        w = np.array(start_state, dtype=np.int64).reshape(replicates, s)
    table = jump_table(s)

    yield start_level, w
    for k in range(start_level, stop_level, -1):
        cumulative = np.cumsum(_weight_columns(k, w), axis=1)
        u = rng.integers(0, pair_count(k), size=replicates)
        idx = (cumulative <= u[:, None]).sum(axis=1)
        w += table[idx]
        yield k - 1, w


def simulate_paths(n: int, s: int, replicates: int, rng: np.random.Generator) -> np.ndarray:
    """Counts of shape (replicates, n+1, s); slice [:, k] is V_k."""
    require(n >= 2, f"need n >= 2, got {n}")
    require(1 <= s <= n - 1, f"need 1 <= s <= n-1, got s={s}, n={n}")
    paths = np.zeros((replicates, n + 1, s), dtype=np.int64)
    for k, w in run_chain(n, s, replicates, rng):
        paths[:, k] = w
    return paths


def simulate_path(n: int, s: int, rng: np.random.Generator) -> BranchCountPath:
    counts = simulate_paths(n, s, 1, rng)[0]
    levels = np.arange(n + 1)
    other = levels - counts.sum(axis=1)
    other[0] = 0
    path = BranchCountPath(n=n, s=s, counts=counts, other_blocks=other)
    path.check_identities()
    return path


def z_creation(v: Union[CountVector, Tuple[int, ...]], r: int) -> int:
    """Unordered branch pairs whose merge creates a branch of order r."""
    w = v.w if isinstance(v, CountVector) else tuple(v)
    if r < 2:
        raise InvalidArgumentError(f"creation needs r >= 2, got {r}")
    require(r <= 2 * len(w), f"order {r} above 2s = {2 * len(w)}")

    def count(order: int) -> int:
        return w[order - 1] if order <= len(w) else 0

    z = sum(count(i) * count(r - i) for i in range(1, r) if i < r - i)
    if r % 2 == 0:
        z += pair_count(count(r // 2))
    return z


def expected_jump(k_plus_1: int, v: Union[CountVector, Tuple[int, ...]], r: int) -> Fraction:
    """E[ΔW_k(r) | V_{k+1} = v] = -2 w_r/(k+1) + Z_{k+1}(r)/C(k+1, 2)."""
    v = _count_vector(k_plus_1, v)
    require(1 <= r <= v.s, f"order {r} outside 1..{v.s}")
    z = 0 if r == 1 else z_creation(v, r)
    return Fraction(-2 * v.w[r - 1], k_plus_1) + Fraction(z, pair_count(k_plus_1))


def expansion_ratio(k: int, v: Union[CountVector, Tuple[int, ...]]) -> Fraction:
    """max_i |P(-e_i) - 2w_i/k| divided by Σ w_j²/k²; zero on the empty state."""
    v = _count_vector(k, v)
    scale = Fraction(sum(x * x for x in v.w), k * k)
    if scale == 0:
        return Fraction(0)
    law = transition_law(k, v)
    worst = max(abs(law[tuple(-unit(i, v.s))] - Fraction(2 * wi, k))
                for i, wi in enumerate(v.w, start=1))
    return worst / scale
