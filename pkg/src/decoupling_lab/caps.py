"""Geometry of the curve neighborhood.

Caps are parallelograms tangent to the curve.  A cap at scale ``R_k`` is the
block

    |xi_1 - c| <= R_k^{-1/2} / 2,   |xi_2 - h(c) - h'(c)(xi_1 - c)| <= R_k^{-1},

except that the rightmost cap of a tiling may be narrower so that the tiling
ends exactly at ``xi_1 = 1``.  This module also builds dual bodies, parabolic
rescaling maps, spacing checks and the well-spaced subsampling procedure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgument

ArrayFn = Callable[[np.ndarray], np.ndarray]

_CURVE_SAMPLES = 1001


def _as_array_fn(fn: Callable) -> ArrayFn:
    def wrapped(x):
        return np.asarray(fn(np.asarray(x, dtype=float)), dtype=float) * np.ones_like(
            np.asarray(x, dtype=float)
        )

    return wrapped


@dataclass(frozen=True, eq=False)
class CurveSpec:
    """A curve ``xi_2 = h(xi_1)`` on ``[-1, 1]`` in the class used throughout.

    Use :meth:`parabola` or :meth:`explicit`; both validate ``h(0) = h'(0) = 0``
    and ``1/2 <= h'' <= 2`` on a 1001-point sample.
    """

    kind: str
    h: ArrayFn
    h_prime: ArrayFn
    h_double_prime: ArrayFn

    @classmethod
    def parabola(cls) -> "CurveSpec":
        return cls(
            kind="parabola",
            h=lambda x: np.asarray(x, dtype=float) ** 2,
            h_prime=lambda x: 2.0 * np.asarray(x, dtype=float),
            h_double_prime=lambda x: np.full_like(np.asarray(x, dtype=float), 2.0),
        )

    @classmethod
    def explicit(cls, h: Callable, h_prime: Callable, h_double_prime: Callable,
                 domain: tuple[float, float] = (-1.0, 1.0)) -> "CurveSpec":
        curve = cls("explicit", _as_array_fn(h), _as_array_fn(h_prime),
                    _as_array_fn(h_double_prime))
        curve.validate(domain)
        return curve

    def validate(self, domain: tuple[float, float] = (-1.0, 1.0)) -> None:
        lo, hi = domain
        if lo <= 0.0 <= hi:
            h0 = float(self.h(np.array([0.0]))[0])
            hp0 = float(self.h_prime(np.array([0.0]))[0])
            if abs(h0) > 1e-12 or abs(hp0) > 1e-12:
                raise InvalidArgument(f"curve must satisfy h(0)=h'(0)=0, got {h0}, {hp0}")
        xs = np.linspace(lo, hi, _CURVE_SAMPLES)
        hpp = self.h_double_prime(xs)
        if not np.all(np.isfinite(hpp)) or hpp.min() < 0.5 - 1e-12 or hpp.max() > 2.0 + 1e-12:
            raise InvalidArgument(
                f"h'' must lie in [1/2, 2]; sampled range [{hpp.min()}, {hpp.max()}]"
            )


def _is_power_of_two(x: float) -> bool:
    if x < 1:
        return False
    e = round(math.log2(x))
    return abs(2.0 ** e - x) <= 1e-9 * x


@dataclass(frozen=True)
class ScaleLadder:
    """Geometric ladder ``R_k = ratio**k`` with ``R_N = R``.

    ``scale(k)`` is defined for every ``k >= 0`` so that kernels can read
    ``R_{N+1}`` and ``R_{N+2}`` off the extended ladder.
    """

    R: float
    ratio: float = 16.0
    cutoff_factor: float = 0.25

    def __post_init__(self):
        if not _is_power_of_two(self.R) or self.R < 1:
            raise InvalidArgument(f"R must be a power of 2, got {self.R}")
        if self.ratio < 4:
            raise InvalidArgument(f"ladder ratio must be >= 4, got {self.ratio}")
        n = math.log(self.R) / math.log(self.ratio)
        if abs(n - round(n)) > 1e-9 or round(n) < 1:
            raise InvalidArgument(
                f"log R / log ratio must be a positive integer, got {n:.6g}"
            )

    @property
    def N(self) -> int:
        return int(round(math.log(self.R) / math.log(self.ratio)))

    @property
    def scales(self) -> tuple[float, ...]:
        return tuple(self.scale(k) for k in range(1, self.N + 1))

    def scale(self, k: int) -> float:
        if k < 0:
            raise InvalidArgument(f"scale index must be nonnegative, got {k}")
        if k == self.N:
            return float(self.R)
        return float(self.ratio) ** k

    @property
    def log_R(self) -> float:
        return math.log(self.R)

    @property
    def stride(self) -> int:
        """Number of children per cap between consecutive scales."""
        return _integer_stride(math.sqrt(self.ratio))

    def to_dict(self) -> dict:
        return {"R": self.R, "ratio": self.ratio, "N": self.N,
                "scales": list(self.scales), "cutoffFactor": self.cutoff_factor}


def _integer_stride(value: float) -> int:
    s = int(round(value))
    if s < 1 or abs(s - value) > 1e-9:
        raise InvalidArgument(f"stride must be a positive integer, got {value}")
    return s


@dataclass(frozen=True, eq=False)
class CapSpec:
    """A block of the ``scale^{-1}``-neighborhood of the curve.

    ``lo`` and ``hi`` are the ends of the block's ``xi_1`` range; ``center`` is
    the base point of the tangent line (the midpoint of ``[lo, hi]``).
    """

    scale: float
    index: int
    center: float
    lo: float
    hi: float
    curve: CurveSpec = field(repr=False)

    @property
    def halfwidth(self) -> float:
        return 0.5 * (self.hi - self.lo)

    @property
    def thickness(self) -> float:
        return 1.0 / self.scale

    @property
    def height(self) -> float:
        return float(self.curve.h(np.array([self.center]))[0])

    @property
    def slope(self) -> float:
        return float(self.curve.h_prime(np.array([self.center]))[0])

    @property
    def base_point(self) -> np.ndarray:
        return np.array([self.center, self.height])

    def normal_offset(self, xi: np.ndarray) -> np.ndarray:
        """Signed offset ``xi_2 - h(c) - h'(c)(xi_1 - c)`` of points ``(..., 2)``."""
        xi = np.asarray(xi, dtype=float)
        return xi[..., 1] - self.height - self.slope * (xi[..., 0] - self.center)

    def contains(self, xi: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        x1 = xi[..., 0]
        inside = (x1 >= self.lo - tol) & (x1 <= self.hi + tol)
        return inside & (np.abs(self.normal_offset(xi)) <= self.thickness * (1 + 1e-12) + tol)

    def corners(self) -> np.ndarray:
        """Block corners, counter-clockwise starting bottom-left."""
        out = []
        for x1, sgn in ((self.lo, -1), (self.hi, -1), (self.hi, 1), (self.lo, 1)):
            x2 = self.height + self.slope * (x1 - self.center) + sgn * self.thickness
            out.append((x1, x2))
        return np.array(out)

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "index": self.index,
            "center": self.center,
            "lo": self.lo,
            "hi": self.hi,
            "corners": self.corners().tolist(),
        }


def build_caps(curve: CurveSpec, scale: float) -> list[CapSpec]:
    """Tile ``|xi_1| <= 1`` by ``ceil(2 scale^{1/2})`` caps, left to right."""
    if not np.isfinite(scale) or scale < 1:
        raise InvalidArgument(f"scale must be >= 1, got {scale}")
    width = scale ** -0.5
    count = int(math.ceil(2.0 / width - 1e-9))
    # shared edges, so neighbouring caps meet at bit-identical abscissae
    edges = [-1.0 + i * width for i in range(count)] + [1.0]
    caps = []
    for i in range(count):
        lo, hi = edges[i], min(edges[i + 1], 1.0)
        caps.append(CapSpec(float(scale), i, 0.5 * (lo + hi), lo, hi, curve))
    return caps


def cap_of(caps: Sequence[CapSpec], x1: np.ndarray) -> np.ndarray:
    """Index of the cap whose half-open range ``[lo, hi)`` contains ``x1``.

    The last cap also owns its right end point, so a tiling assigns every
    abscissa in ``[-1, 1]`` to exactly one cap.
    """
    los = np.array([c.lo for c in caps])
    idx = np.searchsorted(los, np.asarray(x1, dtype=float), side="right") - 1
    return np.clip(idx, 0, len(caps) - 1)


@dataclass(frozen=True)
class DualBody:
    """Dual body of a cap: the rhombus ``a|s| + H|x_2| <= 1``, ``s = x_1 + h'x_2``."""

    center: np.ndarray
    slope: float
    halfwidth: float
    thickness: float

    @property
    def rhombus_vertices(self) -> np.ndarray:
        a, H, m = self.halfwidth, self.thickness, self.slope
        v = np.array([[1.0 / a, 0.0], [-m / H, 1.0 / H], [-1.0 / a, 0.0], [m / H, -1.0 / H]])
        return v + self.center

    @property
    def normal(self) -> np.ndarray:
        return np.array([-self.slope, 1.0]) / math.hypot(1.0, self.slope)

    @property
    def tangent(self) -> np.ndarray:
        return np.array([1.0, self.slope]) / math.hypot(1.0, self.slope)

    @property
    def box_half_extents(self) -> tuple[float, float]:
        """Half extents (along the normal, along the tangent) of the bounding box."""
        verts = self.rhombus_vertices - self.center
        along_n = float(np.max(np.abs(verts @ self.normal)))
        along_t = float(np.max(np.abs(verts @ self.tangent)))
        return along_n, along_t

    @property
    def bounding_box(self) -> np.ndarray:
        """Corners of the oriented bounding rectangle."""
        hn, ht = self.box_half_extents
        n, t = self.normal, self.tangent
        return np.array([self.center + sn * hn * n + st * ht * t
                         for sn, st in ((-1, -1), (-1, 1), (1, 1), (1, -1))])

    @property
    def sheared_half_extents(self) -> tuple[float, float]:
        """Half extents of the sheared box ``|s| <= 1/a``, ``|x_2| <= 1/H``."""
        return 1.0 / self.halfwidth, 1.0 / self.thickness

    def support(self, x: np.ndarray) -> np.ndarray:
        """``sup_{y in cap} |x . (y - C)|`` in closed form."""
        x = np.asarray(x, dtype=float) - self.center
        s = x[..., 0] + self.slope * x[..., 1]
        return self.halfwidth * np.abs(s) + self.thickness * np.abs(x[..., 1])

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(),
                "rhombus": self.rhombus_vertices.tolist(),
                "boundingBox": self.bounding_box.tolist()}


def dual_body(cap: CapSpec, center: Sequence[float] = (0.0, 0.0)) -> DualBody:
    return DualBody(np.asarray(center, dtype=float), cap.slope, cap.halfwidth, cap.thickness)


@dataclass(frozen=True)
class AffineMap:
    """``x -> linear @ x + translation``."""

    linear: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        lin = np.asarray(self.linear, dtype=float)
        if lin.shape != (2, 2) or abs(np.linalg.det(lin)) == 0:
            raise InvalidArgument("affine map must have an invertible 2x2 linear part")

    @property
    def jacobian(self) -> float:
        return float(abs(np.linalg.det(self.linear)))

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ np.asarray(self.linear).T + self.translation

    def inverse(self) -> "AffineMap":
        inv = np.linalg.inv(self.linear)
        return AffineMap(inv, -inv @ np.asarray(self.translation))

    def compose(self, inner: "AffineMap") -> "AffineMap":
        """``self o inner``."""
        lin = np.asarray(self.linear) @ np.asarray(inner.linear)
        return AffineMap(lin, np.asarray(self.linear) @ inner.translation + self.translation)


def rescale_map(cap: CapSpec) -> AffineMap:
    """Parabolic rescaling sending the cap onto an O(1) block at the origin.

    ``(xi_1, xi_2) -> (nu (xi_1 - c), nu^2 (xi_2 - h(c) - h'(c)(xi_1 - c)))``
    with ``nu = scale^{1/2}``.
    """
    nu = math.sqrt(cap.scale)
    c, hc, m = cap.center, cap.height, cap.slope
    linear = np.array([[nu, 0.0], [-nu * nu * m, nu * nu]])
    translation = np.array([-nu * c, nu * nu * (-hc + m * c)])
    return AffineMap(linear, translation)


def image_curve(cap: CapSpec) -> CurveSpec:
    """The curve ``eta -> nu^2 (h(c + eta/nu) - h(c) - h'(c) eta/nu)``."""
    nu = math.sqrt(cap.scale)
    c, hc, m = cap.center, cap.height, cap.slope
    h, hp, hpp = cap.curve.h, cap.curve.h_prime, cap.curve.h_double_prime
    kind = "parabola" if cap.curve.kind == "parabola" else "explicit"

    def ht(eta):
        eta = np.asarray(eta, dtype=float)
        return nu * nu * (h(c + eta / nu) - hc - m * eta / nu)

    def htp(eta):
        eta = np.asarray(eta, dtype=float)
        return nu * (hp(c + eta / nu) - m)

    def htpp(eta):
        eta = np.asarray(eta, dtype=float)
        return hpp(c + eta / nu)

    return CurveSpec(kind, ht, htp, htpp)


# ---------------------------------------------------------------------------
# Spacing and cap trees


def _spacing(ladder: ScaleLadder, k: int, spacing_fraction: float) -> float:
    return spacing_fraction * ladder.scale(k + 1) ** -0.5


def cluster_intervals(intervals: np.ndarray, gap: float) -> list[np.ndarray]:
    """Group sorted ``[lo, hi]`` intervals, merging when the gap is below ``gap``."""
    if len(intervals) == 0:
        return []
    order = np.argsort(intervals[:, 0], kind="stable")
    groups = [[order[0]]]
    right = intervals[order[0], 1]
    for i in order[1:]:
        if intervals[i, 0] - right < gap:
            groups[-1].append(i)
            right = max(right, intervals[i, 1])
        else:
            groups.append([i])
            right = intervals[i, 1]
    return [np.array(g) for g in groups]


def spacing_check(caps: Sequence[CapSpec], ladder: ScaleLadder,
                  spacing_fraction: float = 0.5,
                  width_multiplier: float = 1.0) -> dict[int, bool]:
    """Whether the given final-scale caps are well spaced at ``R_1..R_{N-1}``.

    At scale ``R_k`` the caps are grouped into clusters whose mutual gaps are
    at least ``s_k = spacing_fraction * R_{k+1}^{-1/2}``.  The scale passes when
    every cluster fits in a ``width_multiplier * R_k^{-1/2}`` arc, so the clusters
    are the covering ``tau_k`` blocks and distinct ones are ``s_k`` apart.
    """
    intervals = np.array([[c.lo, c.hi] for c in caps], dtype=float).reshape(-1, 2)
    report = {}
    for k in range(1, ladder.N):
        limit = width_multiplier * ladder.scale(k) ** -0.5
        clusters = cluster_intervals(intervals, _spacing(ladder, k, spacing_fraction))
        report[k] = all(
            intervals[g, 1].max() - intervals[g, 0].min() <= limit * (1 + 1e-12)
            for g in clusters
        )
    return report


@dataclass(frozen=True, eq=False)
class CapTree:
    """Caps at every ladder scale with parent links.

    ``levels[k-1]`` holds the caps at scale ``R_k`` (``k = 1..N``); the last
    level is the list of final-scale caps the tree was built from.
    ``parents[k-1][j]`` is the index at level ``k-1`` of the parent of cap ``j``
    at level ``k`` (``-1`` on level 1).
    """

    ladder: ScaleLadder
    levels: tuple[tuple[CapSpec, ...], ...]
    parents: tuple[tuple[int, ...], ...]
    well_spaced: bool

    def caps(self, k: int) -> tuple[CapSpec, ...]:
        return self.levels[k - 1]

    def children(self, k: int, j: int) -> list[int]:
        """Indices at level ``k+1`` of the children of cap ``j`` at level ``k``."""
        return [i for i, p in enumerate(self.parents[k]) if p == j]

    def leaves(self, k: int, j: int) -> list[int]:
        """Final-scale cap indices below cap ``j`` at level ``k``."""
        nodes = [j]
        for level in range(k, self.ladder.N):
            nodes = [i for i, p in enumerate(self.parents[level]) if p in set(nodes)]
        return nodes

    def to_dict(self) -> dict:
        return {
            "ladder": self.ladder.to_dict(),
            "wellSpaced": self.well_spaced,
            "levels": [[c.to_dict() for c in lvl] for lvl in self.levels],
            "parents": [list(p) for p in self.parents],
        }


def cluster_tree(caps: Sequence[CapSpec], ladder: ScaleLadder,
                 spacing_fraction: float = 0.5,
                 width_multiplier: float = 1.0) -> CapTree:
    """Cap tree whose ``tau_k`` nodes are the spacing clusters of ``caps``.

    Each cluster becomes a block at scale ``R_k`` of width
    ``width_multiplier * R_k^{-1/2}`` centred on the cluster hull, widened to the
    hull when the family is not well spaced.  Clusters nest because the
    merging gap grows as ``k`` decreases.
    """
    caps = sorted(caps, key=lambda c: c.lo)
    if not caps:
        raise InvalidArgument("cluster_tree needs at least one cap")
    curve = caps[0].curve
    intervals = np.array([[c.lo, c.hi] for c in caps])
    N = ladder.N
    levels: list[tuple[CapSpec, ...]] = [None] * N  # type: ignore[list-item]
    members: list[list[np.ndarray]] = [None] * N  # type: ignore[list-item]
    levels[N - 1] = tuple(caps)
    members[N - 1] = [np.array([i]) for i in range(len(caps))]
    spaced = all(spacing_check(caps, ladder, spacing_fraction, width_multiplier).values())
    for k in range(N - 1, 0, -1):
        groups = cluster_intervals(intervals, _spacing(ladder, k, spacing_fraction))
        half = 0.5 * width_multiplier * ladder.scale(k) ** -0.5
        nodes = []
        for j, g in enumerate(groups):
            lo, hi = intervals[g, 0].min(), intervals[g, 1].max()
            mid = 0.5 * (lo + hi)
            hw = max(half, 0.5 * (hi - lo))
            nodes.append(CapSpec(ladder.scale(k), j, mid, mid - hw, mid + hw, curve))
        levels[k - 1] = tuple(nodes)
        members[k - 1] = groups
    parents = [tuple([-1] * len(levels[0]))]
    for k in range(2, N + 1):
        owner = {}
        for j, g in enumerate(members[k - 2]):
            for i in g:
                owner[int(i)] = j
        parents.append(tuple(owner[int(m[0])] for m in members[k - 1]))
    return CapTree(ladder, tuple(levels), tuple(parents), spaced)


def standard_tree(curve: CurveSpec, ladder: ScaleLadder,
                  caps: Sequence[CapSpec] | None = None) -> CapTree:
    """Tree of the standard tilings, restricted to ancestors of ``caps``."""
    final = list(caps) if caps is not None else build_caps(curve, ladder.R)
    tilings = [build_caps(curve, s) for s in ladder.scales[:-1]]
    N = ladder.N
    levels: list[tuple[CapSpec, ...]] = [None] * N  # type: ignore[list-item]
    levels[N - 1] = tuple(final)
    parents: list[tuple[int, ...]] = [None] * N  # type: ignore[list-item]
    lower = final
    for k in range(N - 1, 0, -1):
        tiling = tilings[k - 1]
        owner = cap_of(tiling, np.array([c.center for c in lower]))
        used = sorted(set(int(o) for o in owner))
        remap = {u: j for j, u in enumerate(used)}
        levels[k - 1] = tuple(tiling[u] for u in used)
        parents[k] = tuple(remap[int(o)] for o in owner)
        lower = levels[k - 1]
    parents[0] = tuple([-1] * len(levels[0]))
    return CapTree(ladder, tuple(levels), tuple(parents), False)


# ---------------------------------------------------------------------------
# Well-spaced subsampling


@dataclass(frozen=True)
class SubsampleStep:
    scale_index: int
    residue: int
    branch: str  # "F" keeps f minus the residue class, "H" keeps the class
    factor: float


@dataclass(frozen=True)
class WellSpacedResult:
    selected: tuple[int, ...]
    loss_factor: float
    steps: tuple[SubsampleStep, ...]
    threshold: float
    stride: int

    @property
    def all_f_branches(self) -> bool:
        return all(s.branch == "F" for s in self.steps)

    @property
    def paper_factor(self) -> float:
        """``(1 - t)^{6 k}`` with ``k`` the number of steps."""
        return (1.0 - self.threshold) ** (6 * len(self.steps))


def well_spaced_subsample(weights: Sequence[float], l6mass: Callable[[np.ndarray], float],
                          ladder: ScaleLadder, threshold: float | None = None,
                          stride: float | None = None) -> WellSpacedResult:
    """Iteratively discard residue classes of arcs until the family is well spaced.

    Parameters
    ----------
    weights
        Nonnegative ``l^2`` weights, one per final-scale cap of the full tiling
        (typically ``||f_theta||_2^2``).
    l6mass
        Callback returning ``||sum_{theta in S} f_theta||_6^6`` for an index array ``S``.
    ladder
        Scale ladder; one step is taken per intermediate scale ``R_{N-1}, ..., R_1``.
    threshold
        The constant ``t`` in the rule "keep the residue class ``H`` when
        ``||H||_6 > t ||f||_6``"; defaults to ``1 / log R``.
    stride
        Arcs per parent arc; defaults to ``sqrt(ratio)`` and must be an integer.

    Returns
    -------
    WellSpacedResult
        ``selected`` lists every final-scale index inside the surviving arcs.
        ``loss_factor`` is the guaranteed lower bound on
        (output ``L^6``/``l^2`` ratio) / (input ratio): each ``F`` step
        contributes ``(1 - t)^6`` and each ``H`` step ``t^6 * stride``.
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidArgument("weights must be a finite nonnegative vector")
    s = _integer_stride(math.sqrt(ladder.ratio) if stride is None else float(stride))
    t = 1.0 / ladder.log_R if threshold is None else float(threshold)
    if not 0 < t < 1:
        raise InvalidArgument(f"threshold must lie in (0, 1), got {t}")
    arcs = [np.array([i]) for i in range(len(w))]
    if s == 1:
        return WellSpacedResult(tuple(range(len(w))), 1.0, (), t, 1)
    steps = []
    for k in range(ladder.N - 1, 0, -1):
        labels = np.arange(len(arcs))
        class_mass = np.array([sum(w[arcs[i]].sum() for i in labels[labels % s == r])
                               for r in range(s)])
        total = class_mass.sum()
        # the smallest class always satisfies  total >= s * class_mass
        r0 = int(np.argmin(class_mass))
        assert total >= s * class_mass[r0] - 1e-12 * max(total, 1.0)
        h_arcs = [arcs[i] for i in labels if i % s == r0]
        current = np.concatenate(arcs) if arcs else np.array([], dtype=int)
        h_idx = np.concatenate(h_arcs) if h_arcs else np.array([], dtype=int)
        mass_f = float(l6mass(np.sort(current))) if len(current) else 0.0
        mass_h = float(l6mass(np.sort(h_idx))) if len(h_idx) else 0.0
        if mass_h > t ** 6 * mass_f:
            arcs = h_arcs
            steps.append(SubsampleStep(k, r0, "H", t ** 6 * s))
        else:
            runs, run = [], []
            for i in labels:
                if i % s == r0:
                    if run:
                        runs.append(np.concatenate(run))
                    run = []
                else:
                    run.append(arcs[i])
            if run:
                runs.append(np.concatenate(run))
            arcs = runs
            steps.append(SubsampleStep(k, r0, "F", (1.0 - t) ** 6))
    selected = tuple(sorted(int(i) for a in arcs for i in a))
    loss = float(np.prod([st.factor for st in steps])) if steps else 1.0
    return WellSpacedResult(selected, loss, tuple(steps), t, s)


def random_well_spaced(ladder: ScaleLadder, rng: np.random.Generator,
                       count: int | None = None, stride: int | None = None) -> tuple[int, ...]:
    """Random well-spaced family: at each scale drop one random residue class of arcs.

    This is the ``F`` branch of :func:`well_spaced_subsample` with a random
    residue instead of the lightest one.
    """
    s = _integer_stride(math.sqrt(ladder.ratio) if stride is None else float(stride))
    n = int(math.ceil(2.0 * math.sqrt(ladder.R) - 1e-9)) if count is None else int(count)
    arcs = [[i] for i in range(n)]
    if s == 1:
        return tuple(range(n))
    for _ in range(ladder.N - 1, 0, -1):
        r0 = int(rng.integers(0, s))
        runs, run = [], []
        for i, arc in enumerate(arcs):
            if i % s == r0:
                if run:
                    runs.append(run)
                run = []
            else:
                run = run + arc
        if run:
            runs.append(run)
        arcs = runs
    return tuple(sorted(i for a in arcs for i in a))
