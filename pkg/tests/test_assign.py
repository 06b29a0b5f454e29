import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from spinetrack.assign import CostMatrix, solve, solve_gated
from spinetrack.model import ValidationError


def brute_force(costs, forbidden=None):
    """Best (cardinality, -cost) over every injection of the smaller side."""
    n, m = costs.shape
    if forbidden is None:
        forbidden = np.zeros_like(costs, dtype=bool)
    best = (0, 0.0)
    if n <= m:
        for cols in itertools.permutations(range(m), n):
            pairs = [(i, j) for i, j in enumerate(cols) if not forbidden[i, j]]
            cand = (len(pairs), sum(costs[i, j] for i, j in pairs))
            if cand[0] > best[0] or (cand[0] == best[0] and cand[1] < best[1]):
                best = cand
    else:
        return brute_force(costs.T, forbidden.T)
    return best


def test_diagonal():
    res = solve(CostMatrix.from_array([[0, 1], [1, 0]]))
    assert [(r, c) for r, c, _ in res.pairs] == [("r0", "c0"), ("r1", "c1")]
    assert res.total_cost == 0


def test_forbidden_single_cell():
    res = solve(CostMatrix(("a",), ("b",), np.array([[5.0]]), np.array([[True]])))
    assert res.pairs == [] and res.unmatched_rows == ["a"] and res.unmatched_cols == ["b"]


def test_empty_matrix():
    res = solve(CostMatrix((), ("x", "y"), np.zeros((0, 2))))
    assert res.pairs == [] and res.unmatched_cols == ["x", "y"]


def test_gate_boundaries():
    assert solve_gated(CostMatrix.from_array([[0.6]]), 0.5).pairs == []
    assert len(solve_gated(CostMatrix.from_array([[0.5]]), 0.5).pairs) == 1
    assert len(solve_gated(CostMatrix.from_array([[0.1, 0.9], [0.9, 0.1]]), 0.5).pairs) == 2


def test_pre_gate_can_match_more():
    # the optimum (a,x),(b,y) costs 0.0+0.6 and the gate then drops (b,y);
    # forbidding 0.6 first leaves (a,y),(b,x) at 0.5+0.5
    m = CostMatrix(("a", "b"), ("x", "y"), np.array([[0.0, 0.5], [0.5, 0.6]]))
    assert len(solve_gated(m, 0.5, "post").pairs) == 1
    assert len(solve_gated(m, 0.5, "pre").pairs) == 2


def test_rejects_bad_matrices():
    with pytest.raises(ValidationError):
        CostMatrix(("a", "a"), ("x",), np.zeros((2, 1)))
    with pytest.raises(ValidationError):
        CostMatrix(("a",), ("x",), np.array([[np.nan]]))


def test_random_against_brute_force(rng):
    for _ in range(300):
        n, m = rng.integers(1, 6, size=2)
        costs = rng.uniform(0, 10, size=(n, m))
        forbidden = rng.random((n, m)) < 0.3
        res = solve(CostMatrix.from_array(np.where(forbidden, np.inf, costs)))
        card, cost = brute_force(costs, forbidden)
        assert len(res.pairs) == card
        assert res.total_cost == pytest.approx(cost, abs=1e-9)


matrices = st.integers(1, 5).flatmap(
    lambda n: st.integers(1, 5).flatmap(
        lambda m: st.lists(st.lists(st.integers(0, 10), min_size=m, max_size=m), min_size=n, max_size=n)
    )
)


@given(matrices, st.integers(-5, 5))
def test_constant_shift_keeps_pairing(rows, shift):
    costs = np.array(rows, dtype=float)
    base = solve(CostMatrix.from_array(costs))
    shifted = solve(CostMatrix.from_array(costs + shift))
    assert [(r, c) for r, c, _ in base.pairs] == [(r, c) for r, c, _ in shifted.pairs]


@given(matrices, st.randoms())
def test_permutation_consistency(rows, rnd):
    costs = np.array(rows, dtype=float)
    n, m = costs.shape
    rids, cids = [f"r{i}" for i in range(n)], [f"c{j}" for j in range(m)]
    rp, cp = list(range(n)), list(range(m))
    rnd.shuffle(rp)
    rnd.shuffle(cp)
    base = solve(CostMatrix(tuple(rids), tuple(cids), costs))
    perm = solve(CostMatrix(tuple(rids[i] for i in rp), tuple(cids[j] for j in cp), costs[np.ix_(rp, cp)]))
    # ids are sorted before solving, so the permuted problem is the same problem
    assert base.as_dict() == perm.as_dict()


@given(matrices, st.floats(0, 10))
def test_gated_pairs_subset_of_optimum(rows, threshold):
    costs = np.array(rows, dtype=float)
    full = set(solve(CostMatrix.from_array(costs)).as_dict().items())
    gated = solve_gated(CostMatrix.from_array(costs), threshold)
    assert set(gated.as_dict().items()) <= full
    assert all(c <= threshold for _, _, c in gated.pairs)
