import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from decoupling_lab.errors import InvalidArgument
from decoupling_lab.torus import (
    CoeffVector,
    exp_sum_l2,
    exp_sum_l6,
    exp_sum_l6_fft,
    fft_grid,
    flat_count,
    k6_lower_bound,
)

# S(N) for the flat vector, frozen from an independent run of the counting routine
# cross-checked against the FFT oracle at N = 64, 128, 256
FLAT_COUNTS = {64: 22515321, 128: 199378913, 256: 1755876465, 512: 15365355785}


def _brute_l6(a):
    """Sum over all sextuples with matching first and second moments."""
    N = (len(a) - 1) // 2
    rng = range(-N, N + 1)
    total = 0.0
    for n1, n2, n3, n4, n5, n6 in itertools.product(rng, repeat=6):
        if n1 + n2 + n3 == n4 + n5 + n6 and n1**2 + n2**2 + n3**2 == n4**2 + n5**2 + n6**2:
            total += (a[n1 + N] * a[n2 + N] * a[n3 + N]
                      * np.conj(a[n4 + N] * a[n5 + N] * a[n6 + N])).real
    return total


def test_single_frequency_is_one():
    assert exp_sum_l6(np.ones(1)) == 1.0
    assert exp_sum_l6(CoeffVector.flat(0)) == 1.0


def test_flat_n1_matches_brute_force():
    a = np.ones(3)
    assert exp_sum_l6(a) == pytest.approx(_brute_l6(a), abs=0)


def test_random_n2_matches_brute_force(rng):
    a = rng.normal(size=5) + 1j * rng.normal(size=5)
    assert exp_sum_l6(a) == pytest.approx(_brute_l6(a), rel=1e-12)


def test_zero_vector():
    assert exp_sum_l6(np.zeros(9)) == 0.0


def test_count_matches_fft_n16(rng):
    a = rng.normal(size=33) + 1j * rng.normal(size=33)
    exact = exp_sum_l6(a)
    assert exp_sum_l6_fft(a) == pytest.approx(exact, rel=1e-9)


def test_fft_grid_shape():
    assert fft_grid(3) == (44, 116)


def test_fft_size_limit():
    with pytest.raises(InvalidArgument):
        exp_sum_l6_fft(np.ones(2 * 257 + 1))


def test_fft_x_grid_must_hold_frequencies():
    with pytest.raises(InvalidArgument):
        exp_sum_l6_fft(np.ones(9), grid=(5, 200))


def test_fft_halved_grid_aliases():
    # below the exactness threshold the trapezoid sum picks up aliased terms
    N = 8
    a = CoeffVector.flat(N)
    exact = exp_sum_l6(a)
    # the smallest exact grid, then half of it
    mx, mt = 6 * N + 1, 6 * N * N + 1
    assert exp_sum_l6_fft(a, grid=(mx, mt)) == pytest.approx(exact, rel=1e-10)
    coarse = exp_sum_l6_fft(a, grid=(mx // 2, mt // 2))
    assert abs(coarse - exact) > 1e-3 * exact


def test_count_limit():
    with pytest.raises(InvalidArgument):
        exp_sum_l6(np.ones(2 * 2049 + 1))


def test_bad_vectors():
    with pytest.raises(InvalidArgument):
        CoeffVector(np.ones(4))
    with pytest.raises(InvalidArgument):
        CoeffVector(np.array([1.0, np.nan, 1.0]))


def test_flat_counts_small():
    assert flat_count(1) == int(round(_brute_l6(np.ones(3))))
    assert flat_count(64) == FLAT_COUNTS[64]


def test_k6_examples():
    assert k6_lower_bound(0).value == 1.0
    for N in (3, 10):
        r = k6_lower_bound(N)
        assert r.value == pytest.approx(flat_count(N) ** (1 / 6) / math.sqrt(2 * N + 1), rel=1e-14)
    assert k6_lower_bound(1).log_fit is None
    assert set(k6_lower_bound(4).to_dict()) == {"N", "value", "family", "l6Sixth", "fitLogPower"}


def test_k6_flat_increasing():
    vals = [k6_lower_bound(N).value for N in (8, 16, 32, 64)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_k6_families():
    rp = k6_lower_bound(6, family="randomPhase", seed=2, samples=3)
    assert rp.value >= 1.0
    asc = k6_lower_bound(6, family="ascent", seed=2, iters=5)
    start = CoeffVector.random_phase(6, 2)
    start_val = exp_sum_l6(start) ** (1 / 6) / math.sqrt(start.l2_squared)
    assert asc.value >= start_val - 1e-12
    with pytest.raises(InvalidArgument):
        k6_lower_bound(4, family="nope")
    with pytest.raises(InvalidArgument):
        k6_lower_bound(-1)


def test_workers_independent(rng):
    a = rng.normal(size=41) + 1j * rng.normal(size=41)
    assert exp_sum_l6(a, workers=1) == exp_sum_l6(a, workers=3)


coeffs = st.integers(0, 6).flatmap(
    lambda N: st.lists(st.complex_numbers(max_magnitude=3, allow_nan=False, allow_infinity=False),
                       min_size=2 * N + 1, max_size=2 * N + 1))


@given(coeffs)
def test_real_coefficients_reflection(c):
    a = np.array([z.real for z in c])
    assert exp_sum_l6(a[::-1]) == pytest.approx(exp_sum_l6(a), rel=1e-12, abs=1e-9)


@given(coeffs, st.complex_numbers(min_magnitude=0.1, max_magnitude=3,
                                  allow_nan=False, allow_infinity=False))
def test_scaling_homogeneity(c, z):
    a = np.array(c)
    base = exp_sum_l6(a)
    assert exp_sum_l6(z * a) == pytest.approx(abs(z) ** 6 * base, rel=1e-12, abs=1e-9)


@given(coeffs)
def test_parseval_and_hoelder(c):
    a = np.array(c)
    l2 = exp_sum_l2(a)
    assert l2 == pytest.approx(float(np.sum(np.abs(a) ** 2)), rel=1e-15)
    # on a probability space L^6 dominates L^2
    assert exp_sum_l6(a) >= l2 ** 3 * (1 - 1e-9) - 1e-9
