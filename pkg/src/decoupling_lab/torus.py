"""Discrete restriction for the parabola over the integers.

For coefficients ``a_n``, ``|n| <= N``, the sixth power of the ``L^6(T^2)`` norm
of ``g(x, t) = sum_n a_n e(n x + n^2 t)`` equals ``sum_{u,v} |h(u, v)|^2`` with

    h(u, v) = sum_{n1+n2+n3 = u, n1^2+n2^2+n3^2 = v} a_{n1} a_{n2} a_{n3}.

:func:`exp_sum_l6` evaluates that count exactly; :func:`exp_sum_l6_fft` is an
independent quadrature oracle on a grid finer than the degree of ``|g|^6``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial

import numpy as np

from .errors import InvalidArgument
from .parallel import ordered_map

FFT_MAX_N = 256
COUNT_MAX_N = 2048


@dataclass(frozen=True)
class CoeffVector:
    """Coefficients ``a_n`` for ``n = -N..N`` (``a[n + N]``)."""

    a: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.a)
        if arr.ndim != 1 or arr.size % 2 != 1:
            raise InvalidArgument("coefficient vector must have odd length 2N+1")
        if not np.all(np.isfinite(arr)):
            raise InvalidArgument("coefficients must be finite")

    @property
    def N(self) -> int:
        return (np.asarray(self.a).size - 1) // 2

    @property
    def l2_squared(self) -> float:
        return float(np.sum(np.abs(self.a) ** 2))

    @classmethod
    def flat(cls, N: int) -> "CoeffVector":
        return cls(np.ones(2 * N + 1, dtype=complex))

    @classmethod
    def random_phase(cls, N: int, seed: int) -> "CoeffVector":
        rng = np.random.default_rng(seed)
        return cls(np.exp(2j * np.pi * rng.random(2 * N + 1)))


def _coerce(a) -> CoeffVector:
    return a if isinstance(a, CoeffVector) else CoeffVector(np.asarray(a, dtype=complex))


def _slice_l6(u_values: np.ndarray, a: np.ndarray, N: int) -> float:
    """``sum_v |h(u, v)|^2`` summed over the given ``u`` values, in order."""
    n = np.arange(-N, N + 1)
    vmax = 3 * N * N
    real = np.isrealobj(a)
    total = 0.0
    for u in u_values:
        # n3 ranges over values leaving room for n1 + n2 = u - n3
        n3 = n[(u - n >= -2 * N) & (u - n <= 2 * N)]
        lo = np.maximum(-N, u - n3 - N)
        hi = np.minimum(N, u - n3 + N)
        counts = hi - lo + 1
        rep3 = np.repeat(n3, counts)
        start = np.repeat(lo - np.concatenate(([0], np.cumsum(counts)[:-1])), counts)
        n1 = start + np.arange(rep3.size)
        n2 = u - rep3 - n1
        v = n1 * n1 + n2 * n2 + rep3 * rep3
        w = a[n1 + N] * a[n2 + N] * a[rep3 + N]
        if real:
            h = np.bincount(v, weights=w, minlength=vmax + 1)
            total += float(np.dot(h, h))
        else:
            hr = np.bincount(v, weights=w.real, minlength=vmax + 1)
            hi_ = np.bincount(v, weights=w.imag, minlength=vmax + 1)
            total += float(np.dot(hr, hr) + np.dot(hi_, hi_))
    return total


def exp_sum_l6(a, workers: int = 1) -> float:
    """Exact ``||sum a_n e(nx + n^2 t)||_{L^6(T^2)}^6`` by counting.

    The ``u`` range is split into contiguous blocks; block results are summed
    in block order, so the value is independent of ``workers``.
    """
    vec = _coerce(a)
    N = vec.N
    if N > COUNT_MAX_N:
        raise InvalidArgument(f"N must be <= {COUNT_MAX_N}")
    arr = np.asarray(vec.a)
    if np.all(arr.imag == 0):
        arr = arr.real.astype(float)
    if not np.any(arr):
        return 0.0
    us = np.arange(-3 * N, 3 * N + 1)
    # the split does not depend on ``workers``, so the summation order is fixed
    blocks = np.array_split(us, min(len(us), 64))
    parts = ordered_map(partial(_slice_l6, a=arr, N=N), blocks, workers)
    return float(sum(parts))


def exp_sum_l2(a) -> float:
    """``||g||_{L^2(T^2)}^2`` by the same counting (distinct ``n`` give distinct keys)."""
    vec = _coerce(a)
    return float(np.sum(np.abs(np.asarray(vec.a)) ** 2))


def fft_grid(N: int) -> tuple[int, int]:
    """Quadrature grid ``(12N + 8) x (12N^2 + 8)`` for the FFT oracle."""
    return 12 * N + 8, 12 * N * N + 8


def exp_sum_l6_fft(a, grid: tuple[int, int] | None = None, chunk: int = 4096) -> float:
    """``||g||_6^6`` as the trapezoid sum of ``|g|^6`` on a uniform grid of T^2.

    The sum is exact whenever the grid has more than ``6N`` points in ``x`` and
    more than ``6N^2`` points in ``t``.  ``t`` is processed in chunks, each row
    obtained by one FFT over ``x``.
    """
    vec = _coerce(a)
    N = vec.N
    if N > FFT_MAX_N:
        raise InvalidArgument(f"FFT oracle limited to N <= {FFT_MAX_N}")
    mx, mt = fft_grid(N) if grid is None else (int(grid[0]), int(grid[1]))
    if mx < 2 * N + 1:
        raise InvalidArgument("x grid must hold every frequency of g")
    coeffs = np.asarray(vec.a, dtype=complex)
    n = np.arange(-N, N + 1)
    slots = n % mx
    nsq = (n * n) % mt
    total = 0.0
    for start in range(0, mt, chunk):
        t = np.arange(start, min(start + chunk, mt))
        phase = np.exp(2j * np.pi * np.outer(t, nsq) / mt)
        rows = np.zeros((t.size, mx), dtype=complex)
        np.add.at(rows, (slice(None), slots), phase * coeffs)
        g = np.fft.ifft(rows, axis=1) * mx
        total += float(np.sum(np.abs(g) ** 6))
    return total / (mx * mt)


@dataclass(frozen=True)
class K6Result:
    N: int
    value: float
    family: str
    coefficients: np.ndarray
    l6_sixth: float

    @property
    def log_fit(self) -> float | None:
        """``value / (log N)^{1/6}`` (``None`` for ``N < 2``)."""
        return None if self.N < 2 else self.value / math.log(self.N) ** (1 / 6)

    def to_dict(self) -> dict:
        return {"N": self.N, "value": self.value, "family": self.family,
                "l6Sixth": self.l6_sixth, "fitLogPower": self.log_fit}


def _ratio(vec: CoeffVector, workers: int) -> tuple[float, float]:
    s = exp_sum_l6(vec, workers=workers)
    return s ** (1 / 6) / math.sqrt(vec.l2_squared), s


def _ascent(N: int, iters: int, seed: int, workers: int) -> CoeffVector:
    """Coordinate phase ascent on the exact counting form (amplitudes fixed)."""
    rng = np.random.default_rng(seed)
    a = np.exp(2j * np.pi * rng.random(2 * N + 1))
    best = exp_sum_l6(a, workers=workers)
    trial_phases = np.exp(2j * np.pi * np.arange(1, 8) / 8)
    for _ in range(iters):
        i = int(rng.integers(0, 2 * N + 1))
        for z in trial_phases:
            b = a.copy()
            b[i] *= z
            val = exp_sum_l6(b, workers=workers)
            if val > best:
                best, a = val, b
    return CoeffVector(a)


def k6_lower_bound(N: int, family: str = "flat", seed: int = 0, iters: int = 10,
                   samples: int = 1, workers: int = 1) -> K6Result:
    """Lower-bound probe ``max_a ||g||_6 / ||a||_2`` over a heuristic family.

    ``family`` is ``flat`` (all ones), ``randomPhase`` (``samples`` draws) or
    ``ascent`` (coordinate phase ascent from a random start).
    """
    if N < 0:
        raise InvalidArgument("N must be nonnegative")
    if family == "flat":
        candidates = [CoeffVector.flat(N)]
    elif family == "randomPhase":
        candidates = [CoeffVector.random_phase(N, seed + i) for i in range(max(1, samples))]
    elif family == "ascent":
        candidates = [_ascent(N, iters, seed, workers)]
    else:
        raise InvalidArgument(f"unknown family {family!r}")
    best = None
    for vec in candidates:
        value, s = _ratio(vec, workers)
        if best is None or value > best.value:
            best = K6Result(N, value, family, np.asarray(vec.a), s)
    return best


def flat_count(N: int, workers: int = 1) -> int:
    """Number of solutions ``S(N)`` of the sextuple system with ``|n_i| <= N``."""
    return int(round(exp_sum_l6(np.ones(2 * N + 1), workers=workers)))
