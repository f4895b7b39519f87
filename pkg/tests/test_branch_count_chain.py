from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from branch_count_chain import (CountVector, JumpLaw, count_vectors, expansion_ratio,
                                expected_jump, external_transition_law, jump_table,
                                simulate_path, simulate_paths, transition_law, z_creation)
from errors import InvalidArgumentError
from exact_moments import mean_w, second_moment_w


def grid(k_max, s_max, total):
    for s in range(1, s_max + 1):
        for k in range(2, k_max + 1):
            yield from count_vectors(k, s, max_total=total)


def test_count_vector_validation():
    with pytest.raises(InvalidArgumentError):
        CountVector(k=3, w=(2, 2))
    with pytest.raises(InvalidArgumentError):
        CountVector(k=3, w=(-1, 0))
    assert CountVector(k=3, w=(1, 1)).tracked == 2


def test_all_external_state_merges_two_externals():
    for k in range(2, 25):
        assert transition_law(k, (k,)) == JumpLaw({(-2,): Fraction(1)})


def test_two_orders_at_level_three():
    law = transition_law(3, (1, 1))
    assert law[(-1, 0)] == Fraction(1, 3)
    assert law[(0, -1)] == Fraction(1, 3)
    assert law[(-1, -1)] == Fraction(1, 3)
    assert len(law) == 3


def test_transition_law_rejects_invalid_state():
    with pytest.raises(InvalidArgumentError):
        transition_law(3, (3, 1))
    with pytest.raises(InvalidArgumentError):
        transition_law(1, (1,))


def test_laws_sum_to_one_on_legal_patterns():
    for v in grid(30, 4, 6):
        law = transition_law(v.k, v)
        assert law.total() == 1
        legal = {tuple(row) for row in jump_table(v.s).tolist()}
        assert set(law.support()) <= legal
        assert all(p > 0 for _, p in law.items())


def test_external_law_values():
    law = external_transition_law(4, 2)
    assert law[(0,)] == Fraction(1, 6)
    assert law[(-1,)] == Fraction(4, 6)
    assert law[(-2,)] == Fraction(1, 6)
    assert external_transition_law(7, 0) == JumpLaw({(0,): Fraction(1)})
    with pytest.raises(InvalidArgumentError):
        external_transition_law(4, 5)


def test_external_law_matches_joint_law_with_one_order():
    for k in range(2, 51):
        for w in range(k + 1):
            assert external_transition_law(k, w) == transition_law(k, (w,))


def test_z_creation_examples():
    assert z_creation((3,), 2) == 3
    assert z_creation((2, 5), 3) == 10
    assert z_creation((0, 2, 0), 4) == 1
    with pytest.raises(InvalidArgumentError):
        z_creation((3,), 1)


def test_expected_jump_examples():
    assert expected_jump(3, (1, 1), 2) == Fraction(-2, 3)
    assert expected_jump(10, (4, 0), 2) == Fraction(6, 45)
    assert expected_jump(10, (4, 0), 1) == Fraction(-8, 10)


def test_drift_identity_matches_enumerated_law():
    for v in grid(30, 4, 6):
        law = transition_law(v.k, v)
        for r in range(1, v.s + 1):
            assert expected_jump(v.k, v, r) == law.first_moment(r)


def test_expansion_ratio_bounded():
    assert expansion_ratio(10, (0, 0)) == 0
    worst = max(expansion_ratio(v.k, v) / v.s for v in grid(40, 3, 6))
    assert 0 < worst <= 4


def test_jump_law_sampling_stays_on_support():
    rng = np.random.default_rng(3)
    law = transition_law(10, (3, 1, 1))
    for _ in range(200):
        assert law[law.sample(rng)] > 0


def test_first_step_creates_one_pair():
    rng = np.random.default_rng(17)
    for n in (3, 10, 40):
        path = simulate_path(n, 2, rng)
        assert path.at(n) == (n, 0)
        assert path.at(n - 1) == (n - 2, 1)


def test_level_two_law_for_four_leaves():
    paths = simulate_paths(4, 3, 12_000, np.random.default_rng(99))
    balanced = np.mean(np.all(paths[:, 2] == (0, 2, 0), axis=1))
    caterpillar = np.mean(np.all(paths[:, 2] == (1, 0, 1), axis=1))
    assert balanced + caterpillar == pytest.approx(1.0)
    assert abs(balanced - 1 / 3) < 0.02


@settings(max_examples=30, deadline=None)
@given(n=st.integers(min_value=2, max_value=80), s_frac=st.floats(min_value=0, max_value=1),
       seed=st.integers(min_value=0, max_value=2**32 - 1))
def test_paths_take_legal_jumps(n, s_frac, seed):
    s = 1 + int(s_frac * (n - 2))
    path = simulate_path(n, s, np.random.default_rng(seed))
    delta = path.jumps()[1:n]
    assert set(delta[:, 0].tolist()) <= {-2, -1, 0}
    assert np.all((delta >= -2) & (delta <= 1))
    legal = {tuple(row) for row in jump_table(s).tolist()}
    assert all(tuple(row) in legal for row in delta.tolist())


def test_chain_means_match_closed_form():
    n, s, reps = 30, 3, 20_000
    paths = simulate_paths(n, s, reps, np.random.default_rng(2718))
    for k in range(2, n + 1, 4):
        for r in range(1, s + 1):
            exact = mean_w(n, k, r)
            variance = second_moment_w(n, k, r) - exact * exact
            if variance == 0:
                assert np.all(paths[:, k, r - 1] == exact)
                continue
            se = float(variance / reps) ** 0.5
            assert abs(paths[:, k, r - 1].mean() - float(exact)) < 4.5 * se


def test_exact_laws_are_cached_per_state():
    law = transition_law(9, (3, 1))
    assert transition_law(9, CountVector(k=9, w=(3, 1))) is law
    assert external_transition_law(9, 4) is external_transition_law(9, 4)
    with pytest.raises(InvalidArgumentError):
        transition_law(9, CountVector(k=8, w=(3, 1)))
