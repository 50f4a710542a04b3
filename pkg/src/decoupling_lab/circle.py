"""Lattice points on circles and their sextuple correlations.

``Lambda_m`` is the set of integer points on ``x^2 + y^2 = m``.  The count
``N_m(Lambda)`` of ordered solutions of ``l1 + l2 + l3 = l4 + l5 + l6`` equals
``sum_z F(z)^2`` where ``F(z)`` counts ordered triples with sum ``z``.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from functools import partial
from typing import Sequence

import numpy as np

from .errors import InvalidArgument
from .parallel import ordered_map

MAX_M = 10 ** 12
MAX_POINTS = 10 ** 4

SYMMETRIES = (
    lambda x, y: (x, y),
    lambda x, y: (-x, y),
    lambda x, y: (x, -y),
    lambda x, y: (-x, -y),
    lambda x, y: (y, x),
    lambda x, y: (-y, x),
    lambda x, y: (y, -x),
    lambda x, y: (-y, -x),
)


@dataclass(frozen=True)
class GaussianIntegerSet:
    m: int
    points: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, mask: Sequence[bool]) -> "GaussianIntegerSet":
        if len(mask) != len(self.points):
            raise InvalidArgument("mask length must match the point count")
        return GaussianIntegerSet(self.m, tuple(p for p, keep in zip(self.points, mask) if keep))

    def transformed(self, k: int) -> "GaussianIntegerSet":
        sym = SYMMETRIES[k]
        return GaussianIntegerSet(self.m, tuple(sorted(sym(x, y) for x, y in self.points)))


def lambda_m(m: int) -> GaussianIntegerSet:
    """All ``(x, y)`` with ``x^2 + y^2 = m``, sorted lexicographically."""
    m = int(m)
    if m < 0 or m > MAX_M:
        raise InvalidArgument(f"m must lie in [0, {MAX_M}]")
    pts = set()
    for x in range(math.isqrt(m) + 1):
        r = m - x * x
        y = math.isqrt(r)
        if y * y == r:
            for sx in (1, -1):
                for sy in (1, -1):
                    pts.add((sx * x, sy * y))
                    pts.add((sy * y, sx * x))
    return GaussianIntegerSet(m, tuple(sorted(pts)))


@dataclass(frozen=True)
class CorrelationCount:
    m: int
    size: int
    count: int

    @property
    def ratio(self) -> float:
        return self.count / self.size ** 3 if self.size else 0.0

    @property
    def exponent(self) -> float:
        """``log_N N_m`` (``nan`` when ``N <= 1``)."""
        return math.log(self.count) / math.log(self.size) if self.size > 1 else float("nan")


def triple_sums(points: Sequence[tuple[int, int]]) -> Counter:
    """``F(z)``: number of ordered triples of points summing to ``z``."""
    pair = Counter()
    for x1, y1 in points:
        for x2, y2 in points:
            pair[(x1 + x2, y1 + y2)] += 1
    triple = Counter()
    for (px, py), c in pair.items():
        for x3, y3 in points:
            triple[(px + x3, py + y3)] += c
    return triple


def count_sextuples(lam: GaussianIntegerSet) -> CorrelationCount:
    if len(lam) > MAX_POINTS:
        raise InvalidArgument(f"|Lambda| must be <= {MAX_POINTS}")
    if len(lam) == 0:
        return CorrelationCount(lam.m, 0, 0)
    F = triple_sums(lam.points)
    return CorrelationCount(lam.m, len(lam), int(sum(c * c for c in F.values())))


def brute_force_sextuples(points: Sequence[tuple[int, int]]) -> int:
    """Six nested loops; only for small point sets."""
    pts = np.array(points, dtype=np.int64).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        return 0
    count = 0
    for i in range(n):
        for j in range(n):
            for k in range(n):
                s = pts[i] + pts[j] + pts[k]
                for a in range(n):
                    rest = s - pts[a]
                    for b in range(n):
                        need = rest - pts[b]
                        count += int(np.sum((pts[:, 0] == need[0]) & (pts[:, 1] == need[1])))
    return count


def _scan_block(ms: Sequence[int], min_size: int) -> list[CorrelationCount]:
    rows = []
    for m in ms:
        lam = lambda_m(m)
        if len(lam) >= min_size and len(lam) > 0:
            rows.append(count_sextuples(lam))
    return rows


def correlation_scan(m_max: int, min_size: int = 1, workers: int = 1) -> list[CorrelationCount]:
    """Counts for every ``1 <= m <= m_max`` with ``|Lambda_m| >= min_size``, ascending in ``m``."""
    if m_max < 1:
        return []
    blocks = [list(b) for b in np.array_split(np.arange(1, m_max + 1), max(1, min(m_max, 64)))]
    parts = ordered_map(partial(_scan_block, min_size=min_size), blocks, workers)
    return [row for part in parts for row in part]


def scan_summary(rows: Sequence[CorrelationCount]) -> dict:
    exps = [r.exponent for r in rows if r.size > 1]
    return {"rows": len(rows), "maxExponent": max(exps) if exps else None}
