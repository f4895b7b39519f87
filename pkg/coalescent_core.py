"""
Exact simulation of the Kingman n-coalescent and extraction of order-r lengths.

A merge history is stored as index pairs into a block array: at level k the
array holds k blocks; merging (i, j) with i < j writes the merged block to
slot i, moves the last block into slot j and shrinks the array by one.
Leaf l starts in slot l, so the index pairs fix the labelled tree.
"""

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, List, Optional, Tuple

import numpy as np

from errors import InvalidArgumentError, InvariantViolation, require

logger = logging.getLogger(__name__)


def pair_count(k: int) -> int:
    return k * (k - 1) // 2


def decode_pairs(u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Map u in [0, C(k,2)) to the index pair i < j with u = C(j,2) + i."""
    u = np.asarray(u, dtype=np.int64)
    j = np.floor((1.0 + np.sqrt(1.0 + 8.0 * u.astype(np.float64))) / 2.0).astype(np.int64)
    # float sqrt can land one off next to triangular numbers
    j = np.where(j * (j - 1) // 2 > u, j - 1, j)
    j = np.where((j + 1) * j // 2 <= u, j + 1, j)
    i = u - j * (j - 1) // 2
    return i, j


def expected_times(n: int) -> np.ndarray:
    """E(X_k) = 2/(k(k-1)) indexed by level; entries 0 and 1 are zero."""
    x = np.zeros(n + 1)
    k = np.arange(2, n + 1, dtype=np.float64)
    x[2:] = 2.0 / (k * (k - 1.0))
    return x


@dataclass(frozen=True, eq=False)
class MergeHistory:
    n: int
    pairs: np.ndarray   # (n-1, 2): slots merged when leaving level n - t
    orders: np.ndarray  # (n-1, 2): orders of the two merged blocks
    formed: np.ndarray  # (n-1, 2): levels at which those two blocks were formed

    def same_as(self, other: "MergeHistory") -> bool:
        return (self.n == other.n
                and np.array_equal(self.pairs, other.pairs)
                and np.array_equal(self.orders, other.orders)
                and np.array_equal(self.formed, other.formed))

    def block_orders(self, k: int) -> Tuple[int, ...]:
        """Sorted multiset of block sizes at level k (replays the history)."""
        require(1 <= k <= self.n, f"level {k} outside 1..{self.n}")
        sizes = [1] * self.n
        for t in range(self.n - k):
            i, j = int(self.pairs[t, 0]), int(self.pairs[t, 1])
            sizes[i] += sizes[j]
            last = sizes.pop()
            if j < len(sizes):
                sizes[j] = last
        return tuple(sorted(sizes))


@dataclass(frozen=True, eq=False)
class InterCoalescenceTimes:
    n: int
    values: np.ndarray  # X_k for k = n, n-1, ..., 2

    def by_level(self) -> np.ndarray:
        """X_k indexed by level k; entries 0 and 1 are zero."""
        x = np.zeros(self.n + 1)
        x[2:] = self.values[::-1]
        return x


@dataclass(frozen=True)
class BranchRecord:
    order: int
    formed_at: int
    ends_at: int

    def length(self, times: InterCoalescenceTimes) -> float:
        x = times.by_level()
        return math.fsum(x[self.ends_at + 1:self.formed_at + 1])


@dataclass(frozen=True, eq=False)
class BranchCountPath:
    """
    Counts W_k(1..s) for every level. Row k of ``counts`` is V_k; row 0 is
    unused. ``other_blocks``/``other_leaves`` hold the number of blocks of
    order above s and the leaves below them (leaves are unknown for paths
    produced by the count chain, hence optional).
    """
    n: int
    s: int
    counts: np.ndarray
    other_blocks: np.ndarray
    other_leaves: Optional[np.ndarray] = None
    start: Optional[int] = None

    @property
    def top(self) -> int:
        return self.start or self.n

    def at(self, k: int) -> Tuple[int, ...]:
        return tuple(int(w) for w in self.counts[k])

    def jumps(self) -> np.ndarray:
        """ΔW_k = W_k - W_{k+1} for k = top-1 .. 1, row k."""
        delta = np.zeros_like(self.counts)
        delta[1:self.top] = self.counts[1:self.top] - self.counts[2:self.top + 1]
        return delta

    def check_identities(self) -> None:
        levels = np.arange(1, self.top + 1)
        blocks = self.counts[1:self.top + 1].sum(axis=1) + self.other_blocks[1:self.top + 1]
        if not np.array_equal(blocks, levels):
            raise InvariantViolation("sum_r W_k(r) != k on some level")
        if self.other_leaves is not None:
            orders = np.arange(1, self.s + 1)
            leaves = self.counts[1:self.top + 1] @ orders + self.other_leaves[1:self.top + 1]
            if not np.all(leaves == self.n):
                raise InvariantViolation("sum_r r*W_k(r) != n on some level")
        if np.any(self.counts < 0):
            raise InvariantViolation("negative branch count")


@dataclass(frozen=True)
class OrderLengths:
    raw: np.ndarray       # ℒ^{n,r}, index r-1
    smoothed: np.ndarray  # L^{n,r}, index r-1

    @property
    def s(self) -> int:
        return len(self.raw)


def sample_merge_history(n: int, rng: np.random.Generator) -> MergeHistory:
    """Merge a uniformly random pair of blocks at every level from n down to 1."""
    require(n >= 2, f"need n >= 2 leaves, got {n}")
    levels = np.arange(n, 1, -1, dtype=np.int64)
    first, second = decode_pairs(rng.integers(0, levels * (levels - 1) // 2))
    return _replay(n, first, second)


def history_from_pairs(n: int, pairs) -> MergeHistory:
    """Build a history from explicit slot pairs, one per level n..2."""
    require(n >= 2, f"need n >= 2 leaves, got {n}")
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    require(len(pairs) == n - 1, f"need {n - 1} merges, got {len(pairs)}")
    for t, (i, j) in enumerate(pairs.tolist()):
        require(0 <= i < j < n - t, f"merge {t} pairs slots {i},{j} at level {n - t}")
    return _replay(n, pairs[:, 0], pairs[:, 1])


def _replay(n: int, first: np.ndarray, second: np.ndarray) -> MergeHistory:
    sizes = [1] * n
    formed = [n] * n
    order_a, order_b = [0] * (n - 1), [0] * (n - 1)
    formed_a, formed_b = [0] * (n - 1), [0] * (n - 1)
    k = n
    for t, (i, j) in enumerate(zip(first.tolist(), second.tolist())):
        order_a[t], order_b[t] = sizes[i], sizes[j]
        formed_a[t], formed_b[t] = formed[i], formed[j]
        sizes[i] += sizes[j]
        k -= 1
        formed[i] = k
        last_size, last_formed = sizes.pop(), formed.pop()
        if j < k:
            sizes[j], formed[j] = last_size, last_formed

    return MergeHistory(
        n=n,
        pairs=np.column_stack([first, second]),
        orders=np.column_stack([order_a, order_b]).astype(np.int64),
        formed=np.column_stack([formed_a, formed_b]).astype(np.int64),
    )


def sample_times(n: int, rng: np.random.Generator) -> InterCoalescenceTimes:
    """X_k ~ Exp(C(k,2)) independently for k = n..2."""
    require(n >= 2, f"need n >= 2 leaves, got {n}")
    k = np.arange(n, 1, -1, dtype=np.float64)
    return InterCoalescenceTimes(n=n, values=rng.exponential(scale=2.0 / (k * (k - 1.0))))


def order_counts(history: MergeHistory, s: int, full_spectrum: bool = False) -> BranchCountPath:
    """W_k(r) for r <= s at every level, with the two count identities asserted."""
    n = history.n
    if full_spectrum:
        s = n
    else:
        require(1 <= s <= n - 1, f"need 1 <= s <= n-1, got s={s}, n={n}")

    a = history.orders[:, 0]
    b = history.orders[:, 1]
    c = a + b
    # column s collects every order above s
    width = s + 1
    base = np.arange(n - 1) * width
    cells = np.concatenate([base + np.minimum(a, width) - 1,
                            base + np.minimum(b, width) - 1,
                            base + np.minimum(c, width) - 1])
    signs = np.repeat(np.array([-1, -1, 1], dtype=np.int64), n - 1)
    delta = np.bincount(cells, weights=signs, minlength=(n - 1) * width)
    delta = delta.round().astype(np.int64).reshape(n - 1, width)
    leaves_delta = -a * (a > s) - b * (b > s) + c * (c > s)

    start = np.zeros(s + 1, dtype=np.int64)
    start[0] = n
    running = start + np.cumsum(delta, axis=0)

    counts = np.zeros((n + 1, s + 1), dtype=np.int64)
    counts[n] = start
    counts[1:n] = running[::-1]
    other_leaves = np.zeros(n + 1, dtype=np.int64)
    other_leaves[1:n] = np.cumsum(leaves_delta)[::-1]

    path = BranchCountPath(
        n=n, s=s,
        counts=counts[:, :s],
        other_blocks=counts[:, s],
        other_leaves=other_leaves,
    )
    path.check_identities()
    return path


def branch_table(history: MergeHistory) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Orders, formation levels and end levels of all 2n-2 branches."""
    n = history.n
    ends = np.repeat(np.arange(n - 1, 0, -1, dtype=np.int64), 2)
    return history.orders.ravel(), history.formed.ravel(), ends


def branch_records(history: MergeHistory) -> Iterator[BranchRecord]:
    orders, formed, ends = branch_table(history)
    for order, sigma, rho in zip(orders.tolist(), formed.tolist(), ends.tolist()):
        yield BranchRecord(order=order, formed_at=sigma, ends_at=rho)


def exact_lengths(history: MergeHistory, times: InterCoalescenceTimes, s: int,
                  path: Optional[BranchCountPath] = None) -> Tuple[List[Fraction], List[Fraction]]:
    """
    ℒ^{n,r} for r <= s in exact rationals of the sampled floats, once as a sum
    of branch lengths S over (σ, ρ] and once as Σ_k W_k(r)·X_k.
    """
    n = history.n
    x = [Fraction(float(v)) for v in times.by_level()]
    prefix = [Fraction(0)] * (n + 1)
    for k in range(2, n + 1):
        prefix[k] = prefix[k - 1] + x[k]

    by_branch = [Fraction(0)] * s
    orders, formed, ends = branch_table(history)
    for order, sigma, rho in zip(orders.tolist(), formed.tolist(), ends.tolist()):
        if order <= s:
            by_branch[order - 1] += prefix[sigma] - prefix[rho]

    counts = (path if path is not None else order_counts(history, s)).counts
    by_level = [sum((int(counts[k, r]) * x[k] for k in range(2, n + 1)), Fraction(0))
                for r in range(s)]
    return by_branch, by_level


def lengths_from_tree(history: MergeHistory, times: InterCoalescenceTimes, s: int,
                      cross_check: bool = True,
                      path: Optional[BranchCountPath] = None) -> OrderLengths:
    """Raw and smoothed order lengths; pass ``path`` when the counts are already known."""
    if history.n != times.n:
        raise InvalidArgumentError(f"history has n={history.n} but times have n={times.n}")
    if path is None:
        path = order_counts(history, s)
    require(path.n == history.n and path.s == s, "count path does not match the history")
    w = path.counts[2:].astype(np.float64)
    raw = w.T @ times.by_level()[2:]
    smoothed = w.T @ expected_times(history.n)[2:]

    if cross_check:
        by_branch, by_level = exact_lengths(history, times, s, path)
        if by_branch != by_level:
            raise InvariantViolation("branch-sum and level-sum lengths disagree")
        raw = np.array([float(v) for v in by_level])
    return OrderLengths(raw=raw, smoothed=smoothed)


def total_length(times: InterCoalescenceTimes) -> float:
    """Σ_k k·X_k."""
    x = times.by_level()
    return math.fsum(np.arange(times.n + 1) * x)


def pair_formation_levels(history: MergeHistory, a: int = 0,
                          b: int = 1) -> Optional[Tuple[int, Optional[int]]]:
    """
    (σ, ρ) for the leaf pair {a, b}, or None when the two leaves never form a
    block of their own. ρ is None when that block is the root (n = 2).
    """
    n = history.n
    require(0 <= a < n and 0 <= b < n and a != b, "need two distinct leaves")
    pos_a, pos_b = a, b
    sigma = None
    for t in range(n - 1):
        k = n - t
        i, j = int(history.pairs[t, 0]), int(history.pairs[t, 1])
        if sigma is None:
            if {pos_a, pos_b} == {i, j}:
                if int(history.orders[t, 0]) != 1 or int(history.orders[t, 1]) != 1:
                    return None
                sigma = k - 1
        elif pos_a in (i, j):
            return sigma, k - 1
        pos_a = i if pos_a == j else (j if pos_a == k - 1 else pos_a)
        pos_b = i if pos_b == j else (j if pos_b == k - 1 else pos_b)
    return (sigma, None) if sigma is not None else None


@dataclass(frozen=True)
class FormationLevelLaw:
    n: int
    k: int
    counts: np.ndarray  # index l - k for levels l = k..n-1
    accepted: int

    @property
    def levels(self) -> np.ndarray:
        return np.arange(self.k, self.n)

    @property
    def frequencies(self) -> np.ndarray:
        if self.accepted == 0:
            return np.zeros(len(self.counts))
        return self.counts / self.accepted


def formation_level_law_check(n: int, k: int, reps: int,
                              rng: np.random.Generator) -> FormationLevelLaw:
    """Empirical law of σ(1,2) on the event that {1,2} is a block at level k."""
    require(2 <= k <= n - 1, f"need 2 <= k <= n-1, got k={k}, n={n}")
    counts = np.zeros(n - k, dtype=np.int64)
    accepted = 0
    for _ in range(reps):
        levels = pair_formation_levels(sample_merge_history(n, rng))
        if levels is None:
            continue
        sigma, rho = levels
        if sigma >= k and (rho is None or rho < k):
            counts[sigma - k] += 1
            accepted += 1
    logger.debug(f"formation law n={n} k={k}: {accepted}/{reps} histories on the event")
    return FormationLevelLaw(n=n, k=k, counts=counts, accepted=accepted)
