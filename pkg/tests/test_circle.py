import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from decoupling_lab.circle import (
    SYMMETRIES,
    CorrelationCount,
    GaussianIntegerSet,
    brute_force_sextuples,
    correlation_scan,
    count_sextuples,
    lambda_m,
    scan_summary,
)
from decoupling_lab.errors import InvalidArgument


def _vector_count(points):
    """Independent count: all ordered triple sums, then pairs of equal sums."""
    pts = np.array(points, dtype=np.int64).reshape(-1, 2)
    if len(pts) == 0:
        return 0
    s = (pts[:, None, None, :] + pts[None, :, None, :] + pts[None, None, :, :]).reshape(-1, 2)
    _, counts = np.unique(s, axis=0, return_counts=True)
    return int(np.sum(counts.astype(np.int64) ** 2))


def _naive_lambda(m):
    r = math.isqrt(m)
    return sorted((x, y) for x in range(-r, r + 1) for y in range(-r, r + 1) if x * x + y * y == m)


def test_lambda_examples():
    assert lambda_m(1).points == ((-1, 0), (0, -1), (0, 1), (1, 0))
    assert len(lambda_m(3)) == 0
    assert len(lambda_m(5)) == 8
    assert lambda_m(0).points == ((0, 0),)
    with pytest.raises(InvalidArgument):
        lambda_m(-1)


@given(st.integers(0, 3000))
def test_lambda_matches_naive(m):
    assert list(lambda_m(m).points) == _naive_lambda(m)


@given(st.integers(1, 5000), st.integers(0, 7))
def test_symmetries_setwise(m, k):
    lam = lambda_m(m)
    assert lam.transformed(k).points == lam.points


def test_symmetries_are_distinct():
    images = {sym(2, 1) for sym in SYMMETRIES}
    assert len(images) == 8


def test_count_examples():
    one = GaussianIntegerSet(1, ((1, 0),))
    assert count_sextuples(one).count == 1
    pair = GaussianIntegerSet(1, ((1, 0), (-1, 0)))
    assert count_sextuples(pair).count == 20
    assert count_sextuples(GaussianIntegerSet(3, ())).count == 0


def test_lambda5_brute_force():
    lam = lambda_m(5)
    expected = brute_force_sextuples(lam.points)
    assert count_sextuples(lam).count == expected == _vector_count(lam.points)


def test_random_sets_match_vector_count():
    rng = np.random.default_rng(11)
    candidates = [m for m in range(1, 2000) if 0 < len(lambda_m(m)) <= 12]
    for m in rng.choice(candidates, size=20, replace=False):
        lam = lambda_m(int(m))
        assert count_sextuples(lam).count == _vector_count(lam.points)


def test_six_loop_brute_force_on_subsets():
    rng = np.random.default_rng(3)
    lam = lambda_m(25)
    for _ in range(3):
        mask = rng.random(len(lam)) < 0.5
        sub = lam.subset(mask)
        assert count_sextuples(sub).count == brute_force_sextuples(sub.points)


@given(st.integers(1, 400), st.integers(0, 7), st.data())
def test_count_invariant_under_symmetry(m, k, data):
    lam = lambda_m(m)
    mask = data.draw(st.lists(st.booleans(), min_size=len(lam), max_size=len(lam)))
    sub = lam.subset(mask)
    assert count_sextuples(sub.transformed(k)).count == count_sextuples(sub).count


@given(st.integers(1, 2000))
def test_count_bounds(m):
    # trivial solutions (a permutation of the right side) give N^3 up to overlap
    c = count_sextuples(lambda_m(m))
    n = c.size
    if n:
        assert n ** 3 <= c.count <= n ** 5


def test_subset_mask_length():
    with pytest.raises(InvalidArgument):
        lambda_m(5).subset([True])


def test_correlation_count_properties():
    c = CorrelationCount(5, 8, 1000)
    assert c.ratio == pytest.approx(1000 / 512)
    assert c.exponent == pytest.approx(math.log(1000) / math.log(8))
    assert math.isnan(CorrelationCount(1, 1, 1).exponent)
    assert CorrelationCount(3, 0, 0).ratio == 0.0


def test_scan_first_row():
    rows = correlation_scan(1)
    assert [(r.m, r.size) for r in rows] == [(1, 4)]
    assert correlation_scan(0) == []


def test_scan_lower_bound_and_workers():
    rows = correlation_scan(10 ** 4, min_size=8)
    assert rows and all(r.size >= 8 for r in rows)
    assert all(r.count >= r.size ** 3 for r in rows)
    assert [r.m for r in rows] == sorted(r.m for r in rows)
    assert correlation_scan(2000, min_size=8, workers=2) == [r for r in rows if r.m <= 2000]
    summary = scan_summary(rows)
    assert summary["rows"] == len(rows) and summary["maxExponent"] > 3
