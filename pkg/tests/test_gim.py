import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from itr.gim import (CandidateSet, adaptive_density, explore, greedy_alpha, identify_groups, merge_split,
                     nearest_center, pairwise_distances, radius_proposals)
from itr.synthetic import make_blobs


def line_D(vals):
    """Distance matrix whose row 0 holds ``vals`` for candidates 1..k."""
    pts = np.zeros((len(vals) + 1, 1))
    pts[1:, 0] = vals
    return pairwise_distances(pts)


def test_pairwise_examples():
    D = pairwise_distances([[0, 0], [3, 4], [3, 4]])
    assert D[0, 1] == 5.0
    assert D[1, 2] == 0.0
    np.testing.assert_array_equal(np.diag(D), 0.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-100, 100)))
def test_triangle_inequality(P):
    D = pairwise_distances(P)
    assert D[0, 2] <= D[0, 1] + D[1, 2] + 1e-9


def test_radius_proposals():
    np.testing.assert_allclose(radius_proposals(0, line_D([1.0, 2.0]), [0.1]), [1.1])
    np.testing.assert_array_equal(radius_proposals(0, line_D([0.7, 0.7]), [0.1, 0.2, 0.3]), 0.7)
    np.testing.assert_allclose(radius_proposals(0, line_D([0.5, 1.5])), [0.6, 0.7, 0.8])


def test_radius_proposals_respect_live_mask():
    D = line_D([1.0, 2.0, 10.0])
    np.testing.assert_allclose(radius_proposals(0, D, [0.5], live=[True, True, True, False]), [1.5])


def test_density_three_on_a_line():
    D = pairwise_distances([[0, 0], [1, 0], [2, 0]])
    mu, r = adaptive_density(0, D)
    assert r == pytest.approx(1.1)
    assert mu == 2 / (math.pi * (1.1 * 1.1)) or mu == pytest.approx(2 / (math.pi * 1.21), rel=1e-15)
    assert mu == pytest.approx(0.5263, abs=1e-3)


def test_density_two_points():
    mu, r = adaptive_density(0, pairwise_distances([[0, 0], [2, 0]]), [0.1])
    assert r == 2.0
    assert mu == pytest.approx(2 / (4 * math.pi))


def test_density_monotone_in_count():
    sparse = adaptive_density(0, line_D([1.0, 2.0, 2.0]), [0.5])[0]
    dense = adaptive_density(0, line_D([1.0, 1.5, 2.0]), [0.5])[0]
    assert dense > sparse


def test_density_rejects_zero_radius():
    with pytest.raises(ValueError):
        adaptive_density(0, line_D([0.0, 0.0]))


def test_alpha():
    assert greedy_alpha(0, 17) == 1.0
    assert greedy_alpha(3, 8) == pytest.approx(math.exp(-1))
    vals = [greedy_alpha(s, 50) for s in range(10)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert all(0 < v <= 1 for v in vals)


def test_explore_examples(rng):
    v = np.array([1.5, -2.0])
    for _ in range(5):
        np.testing.assert_array_equal(explore(v, v, rng), v)
    np.testing.assert_array_equal(explore([0, 0], [2, 0], rng, sigma=0.5), [1, 0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_explore_on_line(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=2), rng.normal(size=2)
    p = explore(a, b, rng)
    cross = (p - b)[0] * (a - b)[1] - (p - b)[1] * (a - b)[0]
    assert abs(cross) < 1e-9 * (1 + np.abs(p).max() ** 2)


def test_merge_hand_example():
    cs = CandidateSet.from_arrays([[0, 0], [1, 0], [5, 0]], [2.0, 2.0, 0.5], [3.0, 2.0, 1.0])
    rep = merge_split(0, cs)
    assert sorted(rep.members.tolist()) == [0, 1]
    np.testing.assert_array_equal(cs.positions[0], [0.5, 0])
    assert cs.k_prime == 2 and rep.k_after == 2
    assert cs.processed[0]


def test_merge_split_factor_excludes_small_radius():
    # j is within r_i but its own radius does not reach i
    cs = CandidateSet.from_arrays([[0, 0], [1, 0]], [2.0, 0.5], [1.0, 1.0])
    rep = merge_split(0, cs)
    assert rep.members.tolist() == [0] and cs.k_prime == 2


def test_merge_duplicates_and_noop():
    cs = CandidateSet.from_arrays([[1, 1]] * 3 + [[9, 9]], [0.1] * 4, [1.0] * 4)
    rep = merge_split(0, cs)
    assert rep.members.size == 3 and cs.k_prime == 2
    np.testing.assert_array_equal(cs.positions[0], [1, 1])
    rep = merge_split(3, cs)
    assert rep.members.tolist() == [3] and cs.k_prime == 2


def test_merge_rejects_processed():
    cs = CandidateSet.from_arrays([[0, 0], [1, 0]], [2.0, 2.0], [1.0, 1.0])
    merge_split(0, cs)
    with pytest.raises(ValueError):
        merge_split(0, cs)


def test_identical_points():
    cs = identify_groups(np.ones((7, 3)), rng=0)
    assert cs.k_prime == 1
    np.testing.assert_array_equal(cs.centers, np.ones((1, 3)))


def test_two_blobs_no_explore():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 0.05, (50, 2))
    b = rng.normal(0, 0.05, (50, 2)) + [10, 0]
    cs = identify_groups(np.vstack([a, b]), rng=1, explore_budget=0)
    assert cs.k_prime == 2
    c = cs.centers[np.argsort(cs.centers[:, 0])]
    assert np.linalg.norm(c[0] - a.mean(0)) < 0.1
    assert np.linalg.norm(c[1] - b.mean(0)) < 0.1


def test_determinism():
    X, _, _ = make_blobs(3, 0, n_per=40)
    a = identify_groups(X, rng=5)
    b = identify_groups(X, rng=5)
    for f in ("positions", "radius", "density", "live", "processed", "explored"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def test_needs_two_points():
    with pytest.raises(ValueError):
        identify_groups(np.zeros((1, 2)))


def test_nearest_center_ties_low_index():
    assert nearest_center([[0.0]], [[1.0], [-1.0]]).tolist() == [0]


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.integers(1, 4), st.integers(0, 2**31), st.booleans())
def test_pass_bookkeeping(n, d, seed, dup):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    if dup:
        X[: n // 2] = X[0]
    budget = int(rng.integers(0, n + 1))
    seen = []

    def check(rec, cs):
        seen.append(rec)
        assert cs.k_prime == rec.k_after
        if rec.action == "exploit":
            assert rec.k_after == rec.k_before - rec.merged + 1
            assert rec.k_after <= rec.k_before

    cs = identify_groups(X, rng=rng, explore_budget=budget, on_step=check)
    assert cs.k_prime + cs.n_removed - cs.n_explored == n
    assert sum(r.action == "exploit" for r in seen) <= n + budget
    assert sum(r.action == "explore" for r in seen) <= budget
    assert cs.k_prime >= 1


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 40), st.integers(0, 2**31))
def test_centers_in_hull_without_explore(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    C = identify_groups(X, rng=rng, explore_budget=0).centers
    for _ in range(8):
        w = rng.normal(size=2)
        assert (C @ w).max() <= (X @ w).max() + 1e-9
        assert (C @ w).min() >= (X @ w).min() - 1e-9
