"""Gaussian partitions of unity on tube tilings and the amplitude-pruning ladder.

The one-dimensional profile ``phi1(t) = pi^{-1/2} int_{-1/2}^{1/2} e^{-(t-y)^2} dy``
has the closed form ``(erf(t + 1/2) - erf(t - 1/2)) / 2`` and integer
translates summing to one.  ``psi0(x) = phi1(x_1) phi1(x_2)`` is the bump of
the unit square and ``psi_T = psi0 o A`` for an affine ``A`` taking ``T`` to
the unit square.

Tubes of a cap live on the lattice spanned by ``b1 = (a, 0)`` and
``b2 = (-d, l)``, with ``a = R / n1`` and ``l = R / n2``.  ``d`` is rounded so
that ``R Z^2`` is a sublattice, which makes the tiling periodic on ``Q_R``:
there are exactly ``n1 * n2`` tubes and the long side has slope ``e / n1``
with ``e = round(n1 h'(c))``.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import scipy.fft as sfft
from scipy.special import erf

from .caps import CapSpec, CapTree, dual_body
from .errors import InvalidArgument, InvariantViolation
from .field import BandlimitedField, restrict_to_cap

# phi1_hat(2.2) ~ 1e-22, so coefficients beyond this radius are below float64 resolution
KAPPA_MAX = 2.2
DEFAULT_WIDTH = 8.0
DEFAULT_WINDOW = 3
GAUSS_NORMALIZATION = 1.0 / math.pi  # (int e^{-|x|^2} dx)^{-1} in the plane


def phi1(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return 0.5 * (erf(t + 0.5) - erf(t - 0.5))


def phi1_hat(k) -> np.ndarray:
    """Fourier transform ``sinc(k) exp(-pi^2 k^2)`` of :func:`phi1`."""
    k = np.asarray(k, dtype=float)
    return np.sinc(k) * np.exp(-(math.pi * k) ** 2)


def psi0(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return phi1(x[..., 0]) * phi1(x[..., 1])


@dataclass(frozen=True)
class Tube:
    """The parallelogram ``corner + [0, 1) b1 + [0, 1) b2``."""

    corner: tuple[float, float]
    b1: tuple[float, float]
    b2: tuple[float, float]

    @property
    def basis(self) -> np.ndarray:
        return np.array([self.b1, self.b2], dtype=float).T

    @property
    def area(self) -> float:
        return abs(float(np.linalg.det(self.basis)))

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.corner, dtype=float) + 0.5 * (np.asarray(self.b1) + np.asarray(self.b2))


@dataclass(frozen=True)
class GaussianBump:
    tube: Tube
    normalization: float = GAUSS_NORMALIZATION

    @property
    def affine(self) -> tuple[np.ndarray, np.ndarray]:
        """``(L, c)`` with ``A(x) = L (x - c)`` mapping the tube onto ``[-1/2, 1/2]^2``."""
        return np.linalg.inv(self.tube.basis), self.tube.center

    def __call__(self, x) -> np.ndarray:
        L, c = self.affine
        y = (np.asarray(x, dtype=float) - c) @ L.T
        return psi0(y)

    def decay_bound(self, x) -> np.ndarray:
        """``c exp(-dist(A x, unit square)^2)``."""
        L, c = self.affine
        y = (np.asarray(x, dtype=float) - c) @ L.T
        gap = np.maximum(np.abs(y) - 0.5, 0.0)
        return self.normalization * np.exp(-np.sum(gap ** 2, axis=-1))


def gaussian_bump(tube: Tube) -> GaussianBump:
    if not tube.area > 0 or not np.isfinite(tube.area):
        raise InvalidArgument("degenerate tube")
    return GaussianBump(tube)


# ---------------------------------------------------------------------------
# Periodic tube tilings


@dataclass(frozen=True, eq=False)
class TubeTiling:
    cap: CapSpec
    R: int
    width: float
    n1: int
    n2: int
    e: int

    @property
    def a(self) -> float:
        return self.R / self.n1

    @property
    def ell(self) -> float:
        return self.R / self.n2

    @property
    def d(self) -> float:
        return self.e * self.R / (self.n1 * self.n2)

    @property
    def slope(self) -> float:
        """Effective slope ``e / n1`` replacing ``h'(c)`` in the tube direction."""
        return self.e / self.n1

    @property
    def count(self) -> int:
        return self.n1 * self.n2

    @property
    def basis(self) -> np.ndarray:
        return np.array([[self.a, -self.d], [0.0, self.ell]])

    def tube(self, t1: int, t2: int) -> Tube:
        corner = self.basis @ np.array([t1, t2], dtype=float)
        return Tube((float(corner[0]), float(corner[1])), (self.a, 0.0), (-self.d, self.ell))

    def y_coords(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y2 = x[..., 1] / self.ell
        y1 = (x[..., 0] + self.slope * x[..., 1]) / self.a
        return np.stack([y1, y2], axis=-1)

    def canonical(self, t1, t2) -> tuple[np.ndarray, np.ndarray]:
        """Reduce tube indices modulo the image lattice of ``R Z^2``."""
        t1 = np.asarray(t1, dtype=np.int64)
        t2 = np.asarray(t2, dtype=np.int64)
        m2 = np.floor_divide(t2, self.n2)
        return np.mod(t1 - self.e * m2, self.n1), t2 - m2 * self.n2

    def tube_of(self, x) -> tuple[np.ndarray, np.ndarray]:
        y = np.floor(self.y_coords(x)).astype(np.int64)
        return self.canonical(y[..., 0], y[..., 1])

    def psi(self, t1: int, t2: int, x, reach: float = 8.0) -> np.ndarray:
        """Periodized bump of tube ``(t1, t2)`` at points ``x`` (direct image sum).

        Images further than ``reach`` tube widths away contribute below
        ``phi1(reach)`` and are skipped.
        """
        y = self.y_coords(x)
        out = np.zeros(y.shape[:-1])
        u2 = y[..., 1] - t2 - 0.5
        q = np.floor(u2 / self.n2)
        base2 = u2 - self.n2 * q
        # reducing y2 by q periods moves y1 by -e q periods as well
        base1 = y[..., 0] - t1 - 0.5 - self.e * q
        M2 = int(math.ceil(reach / self.n2)) + 1
        for m2 in range(-M2, M2 + 1):
            s2 = base2 + self.n2 * m2
            shift = np.mod(base1 + self.e * m2, self.n1)
            M1 = int(math.ceil(reach / self.n1)) + 1
            for m1 in range(-M1, M1 + 1):
                out += phi1(shift + self.n1 * m1) * phi1(s2)
        return out

    def plane_sum(self, x, radius: int = 20) -> np.ndarray:
        """``sum psi_T(x)`` over the tubes of the planar tiling within ``radius`` of ``x``."""
        y = self.y_coords(x)
        base = np.floor(y).astype(np.int64)
        total = np.zeros(y.shape[:-1])
        offsets = np.arange(-radius, radius + 1)
        p1 = phi1(y[..., 0, None] - base[..., 0, None] - offsets - 0.5).sum(axis=-1)
        p2 = phi1(y[..., 1, None] - base[..., 1, None] - offsets - 0.5).sum(axis=-1)
        total += p1 * p2
        return total

    def grid_shift(self, t1: int, t2: int, shape: tuple[int, int]) -> tuple[int, int]:
        """Grid translation taking tube ``(0, 0)`` to tube ``(t1, t2)``."""
        g1, g2 = shape
        if g1 % (self.n1 * self.n2) or g2 % self.n2:
            raise InvalidArgument(f"grid {shape} is not adapted to tiling ({self.n1}, {self.n2})")
        s1 = g1 // self.n1 * t1 - g1 // (self.n1 * self.n2) * self.e * t2
        s2 = g2 // self.n2 * t2
        return int(s1), int(s2)

    def coefficient_support(self, kappa_max: float = KAPPA_MAX) -> tuple[np.ndarray, np.ndarray]:
        """Frequencies ``j`` (in units of ``1/R``) where a mask can be non-negligible."""
        J1 = int(math.floor(kappa_max * self.n1))
        j1s, j2s = [], []
        for j1 in range(-J1, J1 + 1):
            c = self.e * j1 / self.n1
            lo = math.ceil(c - kappa_max * self.n2)
            hi = math.floor(c + kappa_max * self.n2)
            j2 = np.arange(lo, hi + 1)
            j1s.append(np.full(j2.size, j1))
            j2s.append(j2)
        return np.concatenate(j1s).astype(np.int64), np.concatenate(j2s).astype(np.int64)

    def mask_coefficients(self, kept: np.ndarray, kappa_max: float = KAPPA_MAX) -> "MaskSpectrum":
        """Fourier coefficients of ``M = sum_t kept[t] Psi_t`` on the torus ``Q_R``.

        ``Psi_t`` has coefficient ``psi0_hat(k) e(-k . (t + 1/2)) / (n1 n2)`` at
        ``k = (j1 / n1, (j2 - e j1 / n1) / n2)``.  The sum over ``t1`` is one FFT,
        the sum over ``t2`` is direct.
        """
        kept = np.asarray(kept, dtype=float)
        if kept.shape != (self.n1, self.n2):
            raise InvalidArgument("kept mask must have shape (n1, n2)")
        j1, j2 = self.coefficient_support(kappa_max)
        k1 = j1 / self.n1
        k2 = (j2 - self.e * j1 / self.n1) / self.n2
        K1 = np.fft.fft(kept, axis=0)  # sum_t1 kept e(-j1 t1 / n1)
        t2 = np.arange(self.n2)
        rows = K1[np.mod(j1, self.n1)]
        S = np.sum(rows * np.exp(-2j * np.pi * np.outer(k2, t2)), axis=1)
        vals = phi1_hat(k1) * phi1_hat(k2) * np.exp(-1j * np.pi * (k1 + k2)) * S / (self.n1 * self.n2)
        return MaskSpectrum(self.R, j1, j2, vals)

    def to_dict(self) -> dict:
        return {"scale": self.cap.scale, "cap": self.cap.index, "n1": self.n1, "n2": self.n2,
                "e": self.e, "a": self.a, "ell": self.ell, "d": self.d, "width": self.width}


def tube_tiling(cap: CapSpec, R: int, width: float = DEFAULT_WIDTH) -> TubeTiling:
    """Periodic tiling of ``Q_R`` by ``width``-dilates of the dual body box of ``cap``."""
    if width <= 0:
        raise InvalidArgument("packet width must be positive")
    body = dual_body(cap)
    half_s, half_x2 = body.sheared_half_extents
    n1 = max(1, int(round(R / (2 * width * half_s))))
    n2 = max(1, int(round(R / (2 * width * half_x2))))
    e = int(round(cap.slope * n1))
    return TubeTiling(cap, int(R), float(width), n1, n2, e)


@dataclass(frozen=True)
class MaskSpectrum:
    """Sparse Fourier series ``M(x) = sum v e(j . x / R)``."""

    R: int
    j1: np.ndarray
    j2: np.ndarray
    values: np.ndarray

    def on_grid(self, shape: tuple[int, int]) -> np.ndarray:
        """Exact samples on a grid; the folded spectrum is Hermitian, so a real inverse FFT suffices."""
        spec = np.zeros(shape, dtype=complex)
        np.add.at(spec, (np.mod(self.j1, shape[0]), np.mod(self.j2, shape[1])), self.values)
        return sfft.irfft2(spec[:, :shape[1] // 2 + 1], s=shape, norm="forward")

    def evaluate(self, points, chunk: int = 4096) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        out = np.empty(len(pts))
        u1, i1 = np.unique(self.j1, return_inverse=True)
        u2, i2 = np.unique(self.j2, return_inverse=True)
        for s in range(0, len(pts), chunk):
            p = pts[s:s + chunk]
            e1 = np.exp(2j * np.pi * np.outer(p[:, 0], u1) / self.R)
            e2 = np.exp(2j * np.pi * np.outer(p[:, 1], u2) / self.R)
            out[s:s + chunk] = np.einsum("pk,pk,k->p", e1[:, i1], e2[:, i2], self.values).real
        return out.reshape(np.shape(points)[:-1])


def grid_points(R: int, shape: tuple[int, int]) -> np.ndarray:
    g1, g2 = shape
    x1 = np.arange(g1) * (R / g1)
    x2 = np.arange(g2) * (R / g2)
    return np.stack(np.meshgrid(x1, x2, indexing="ij"), axis=-1)


def adapted_shape(R: int, tilings: Sequence[TubeTiling], minimum: tuple[int, int] = (1, 1),
                  extra: tuple[int, int] = (1, 1)) -> tuple[int, int]:
    """Smallest grid at least ``minimum`` on which every tube translate is a grid shift."""
    m1 = math.lcm(*[t.n1 * t.n2 for t in tilings], int(extra[0])) if tilings else int(extra[0])
    m2 = math.lcm(*[t.n2 for t in tilings], int(extra[1])) if tilings else int(extra[1])
    g1 = m1 * max(1, math.ceil(minimum[0] / m1))
    g2 = m2 * max(1, math.ceil(minimum[1] / m2))
    if R & (R - 1) == 0:
        # keep powers of two so FFT sizes stay fast
        g1 = 1 << (g1 - 1).bit_length()
        g2 = 1 << (g2 - 1).bit_length()
    return g1, g2


# ---------------------------------------------------------------------------
# Amplitudes


class _BumpTable:
    """``Psi_0`` on a grid, stored in row-unsheared block form.

    Shifting grid row ``i2`` by ``sigma(i2) = floor(e i2 c1 / g2)`` turns every
    tube translate into the block shift ``(c1 t1, c2 t2)`` with
    ``c = grid / (n1, n2)``; amplitudes of all tubes then come from one
    blockwise product per offset between a tube and the bump's support.
    """

    def __init__(self, tiling: TubeTiling, shape: tuple[int, int], window: int,
                 full_limit: int = 16):
        g1, g2 = shape
        n1, n2 = tiling.n1, tiling.n2
        if g1 % (n1 * n2) or g2 % n2:
            raise InvalidArgument(f"grid {shape} is not adapted to tiling ({n1}, {n2})")
        self.tiling, self.shape = tiling, shape
        self.c1, self.c2 = g1 // n1, g2 // n2
        self.sigma = np.floor_divide(tiling.e * np.arange(g2, dtype=np.int64) * self.c1, g2)
        rows_back = np.mod(np.arange(g1)[:, None] - self.sigma[None, :], g1)
        self.flat_back = (rows_back * g2 + np.arange(g2)[None, :]).ravel()
        delta = np.zeros((n1, n2))
        delta[0, 0] = 1.0
        psi = tiling.mask_coefficients(delta).on_grid(shape)
        self.blocks = self._to_blocks(psi)
        if n1 * n2 <= full_limit or (2 * window + 1) ** 2 >= n1 * n2:
            offs = [(o1, o2) for o1 in range(n1) for o2 in range(n2)]
        else:
            o1s = sorted({o % n1 for o in range(-window, window + 1)})
            o2s = sorted({o % n2 for o in range(-window, window + 1)})
            offs = [(o1, o2) for o1 in o1s for o2 in o2s]
        self.offsets = offs
        inside = np.zeros((n1, n2), dtype=bool)
        for o in offs:
            inside[o] = True
        peak = self.blocks.max(axis=(2, 3))
        self.tail = float(peak[~inside].max()) if (~inside).any() else 0.0
        self.complete = bool(inside.all())

    def _to_blocks(self, A: np.ndarray) -> np.ndarray:
        """``A'[i1', i2] = A[i1' - sigma(i2), i2]`` reshaped to ``(n1, n2, c1, c2)``."""
        n1, n2 = self.tiling.n1, self.tiling.n2
        un = np.ravel(A).take(self.flat_back)
        return un.reshape(n1, self.c1, n2, self.c2).transpose(0, 2, 1, 3)

    def grid_index(self, s1, s2, r) -> tuple[int, int]:
        """Original grid index of in-block position ``r`` of block ``(s1, s2)``."""
        r1, r2 = divmod(int(r), self.c2)
        i2 = s2 * self.c2 + r2
        i1 = (s1 * self.c1 + r1 - int(self.sigma[i2])) % self.shape[0]
        return int(i1), int(i2)

    def partner(self, t1, t2, o1: int, o2: int):
        """Block of ``|F|`` met by bump block ``(o1, o2)`` of tube ``(t1, t2)``.

        Passing the top of the block column wraps ``t2`` and, through the
        lattice shear, moves ``t1`` back by ``e``.
        """
        n1, n2 = self.tiling.n1, self.tiling.n2
        q = (np.asarray(t2) + o2) >= n2
        return (np.asarray(t1) + o1 - q * self.tiling.e) % n1, (np.asarray(t2) + o2) % n2

    def amplitudes(self, B: np.ndarray, offsets=None):
        """Max of ``Psi_t |F|`` over the given offsets, with argmax grid points.

        ``B`` is ``|F|`` in block form, as returned by :meth:`_to_blocks`.
        """
        n1, n2 = self.tiling.n1, self.tiling.n2
        B = B.reshape(n1, n2, self.c1 * self.c2)
        amps = np.full((n1, n2), -1.0)
        where = np.zeros((n1, n2, 2), dtype=np.int64)
        best_s1 = np.zeros((n1, n2), dtype=np.int64)
        best_s2 = np.zeros((n1, n2), dtype=np.int64)
        best_r = np.zeros((n1, n2), dtype=np.int64)
        t1, t2 = np.meshgrid(np.arange(n1), np.arange(n2), indexing="ij")
        for o1, o2 in (self.offsets if offsets is None else offsets):
            prod = B * self.blocks[o1, o2].reshape(1, 1, -1)
            r = np.argmax(prod, axis=2)
            val = np.take_along_axis(prod, r[..., None], axis=2)[..., 0]
            s1, s2 = self.partner(t1, t2, o1, o2)
            v, rr = val[s1, s2], r[s1, s2]
            better = v > amps
            amps[better] = v[better]
            best_r[better] = rr[better]
            best_s1[better] = s1[better]
            best_s2[better] = s2[better]
        for a in range(n1):
            for b in range(n2):
                where[a, b] = self.grid_index(best_s1[a, b], best_s2[a, b], best_r[a, b])
        return np.maximum(amps, 0.0), where

    def exact_one(self, B: np.ndarray, t1: int, t2: int) -> tuple[float, tuple[int, int]]:
        """Whole-grid sup for one tube, with ``B`` in block form."""
        n1, n2 = self.tiling.n1, self.tiling.n2
        o1, o2 = np.meshgrid(np.arange(n1), np.arange(n2), indexing="ij")
        q = (t2 + o2) >= n2
        s1 = (t1 + o1 - q * self.tiling.e) % n1
        s2 = (t2 + o2) % n2
        prod = self.blocks * B[s1, s2]
        a1, a2, r1, r2 = np.unravel_index(int(np.argmax(prod)), prod.shape)
        return float(prod[a1, a2, r1, r2]), self.grid_index(s1[a1, a2], s2[a1, a2], r1 * self.c2 + r2)


def tube_amplitudes(F: np.ndarray, tiling: TubeTiling, lam: float = math.inf,
                    window: int = DEFAULT_WINDOW, full_limit: int = 16,
                    table: _BumpTable | None = None):
    """Grid sup of ``|Psi_t F|`` for every tube, plus argmax grid points.

    With at most ``full_limit`` tubes every product is evaluated on the whole
    grid.  Otherwise offsets within ``window`` tubes give a lower bound
    ``L_t`` and ``max(L_t, tail * max|F|)`` an upper bound; tubes whose bounds
    straddle ``lam`` are re-evaluated on the whole grid, so the kept/pruned
    decision always matches the whole-grid sup.
    """
    table = table or _BumpTable(tiling, F.shape, window, full_limit)
    absF = np.abs(F)
    B = table._to_blocks(absF)
    amps, where = table.amplitudes(B)
    exact = np.full(amps.shape, table.complete)
    if not table.complete:
        bound = table.tail * float(absF.max())
        ambiguous = (amps <= lam) & (lam < np.maximum(amps, bound))
        for t1, t2 in zip(*np.nonzero(ambiguous)):
            amps[t1, t2], where[t1, t2] = table.exact_one(B, int(t1), int(t2))
            exact[t1, t2] = True
    return amps, where, exact, table


# ---------------------------------------------------------------------------
# Decomposition of a single cap field


@dataclass(frozen=True)
class PacketDecomposition:
    tiling: TubeTiling
    shape: tuple[int, int]
    tubes: tuple[tuple[int, int], ...]
    amplitudes: np.ndarray
    dropped: int
    samples: np.ndarray = field(repr=False)

    def packet(self, i: int) -> np.ndarray:
        t1, t2 = self.tubes[i]
        K = np.zeros((self.tiling.n1, self.tiling.n2))
        K[t1, t2] = 1.0
        return self.tiling.mask_coefficients(K).on_grid(self.shape) * self.samples

    def reconstruct(self) -> np.ndarray:
        K = np.zeros((self.tiling.n1, self.tiling.n2))
        for t1, t2 in self.tubes:
            K[t1, t2] = 1.0
        return self.tiling.mask_coefficients(K).on_grid(self.shape) * self.samples


def decompose(f_cap: BandlimitedField, tiling: TubeTiling,
              shape: tuple[int, int] | None = None, drop_below: float = 1e-14) -> PacketDecomposition:
    """Wave packets ``psi_T f_cap`` of a field supported in ``tiling.cap``."""
    if f_cap.R != tiling.R:
        raise InvalidArgument("tiling and field disagree on R")
    if len(f_cap) and len(restrict_to_cap(f_cap, tiling.cap)) != len(f_cap):
        raise InvalidArgument("field has atoms outside the tiling's cap")
    shape = shape or adapted_shape(tiling.R, [tiling], minimum=(64, 64))
    F = f_cap.on_grid(shape) if len(f_cap) else np.zeros(shape, dtype=complex)
    if not len(f_cap) or not np.any(F):
        return PacketDecomposition(tiling, shape, (), np.zeros(0), 0, F)
    amps, _, _, _ = tube_amplitudes(F, tiling, full_limit=tiling.count)
    top = amps.max()
    keep = amps >= drop_below * top
    tubes = tuple((int(a), int(b)) for a, b in zip(*np.nonzero(keep)))
    return PacketDecomposition(tiling, shape, tubes, amps[keep], int((~keep).sum()), F)


# ---------------------------------------------------------------------------
# Pruning ladder


def default_prune_exponent(log_R: float) -> int:
    """Smallest ``m`` with ``(log R)^m >= 100``."""
    return max(1, math.ceil(math.log(100.0) / math.log(log_R)))


@dataclass(frozen=True)
class PruneParams:
    alpha: float
    r: float
    log_R: float
    m: int | None = None
    threshold: float | None = None

    def __post_init__(self):
        lam = self.lam
        if math.isnan(lam) or lam < 0:
            raise InvalidArgument(f"pruning threshold must be nonnegative, got {lam}")

    @property
    def exponent(self) -> int:
        return default_prune_exponent(self.log_R) if self.m is None else int(self.m)

    @property
    def lam(self) -> float:
        if self.threshold is not None:
            return float(self.threshold)
        if self.alpha == 0:
            return math.inf
        return self.log_R ** self.exponent * self.r / self.alpha

    @classmethod
    def fixed(cls, lam: float, log_R: float = 1.0) -> "PruneParams":
        return cls(alpha=1.0, r=0.0, log_R=log_R, threshold=lam)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "r": self.r, "m": self.exponent, "lambda": self.lam}


@dataclass(eq=False)
class NodeRecord:
    k: int
    j: int
    tiling: TubeTiling
    amplitudes: np.ndarray
    kept: np.ndarray
    refined: int
    spectrum: MaskSpectrum | None  # None when every tube is kept (mask == 1)

    @property
    def all_kept(self) -> bool:
        return bool(self.kept.all())

    def mask_on_grid(self, shape) -> np.ndarray:
        if self.spectrum is None:
            return np.ones(shape)
        return self.spectrum.on_grid(shape)

    def mask_at(self, points) -> np.ndarray:
        if self.spectrum is None:
            return np.ones(np.shape(points)[:-1])
        return self.spectrum.evaluate(points)


Visitor = Callable[[int, int, np.ndarray, np.ndarray], None]


@dataclass(eq=False)
class PrunedLadder:
    f: BandlimitedField
    tree: CapTree
    params: PruneParams
    shape: tuple[int, int]
    nodes: dict[tuple[int, int], NodeRecord]
    theta_of_leaf: tuple[int, ...]

    @property
    def N(self) -> int:
        return self.tree.ladder.N

    @property
    def lam(self) -> float:
        return self.params.lam

    def leaf_field(self, j: int) -> BandlimitedField:
        return self.f.select(self.f.cap_index == self.theta_of_leaf[j])

    def unpruned_on_grid(self, k: int, j: int) -> np.ndarray:
        """``f_{k+1, tau_k}`` on the grid (``f_theta`` when ``k = N``)."""
        if k == self.N:
            leaf = self.leaf_field(j)
            return leaf.on_grid(self.shape) if len(leaf) else np.zeros(self.shape, dtype=complex)
        out = np.zeros(self.shape, dtype=complex)
        for c in self.tree.children(k, j):
            out += self.pruned_on_grid(k + 1, c)
        return out

    def pruned_on_grid(self, k: int, j: int) -> np.ndarray:
        """``f_{k, tau_k}`` on the grid."""
        node = self.nodes[(k, j)]
        return node.mask_on_grid(self.shape) * self.unpruned_on_grid(k, j)

    def level_on_grid(self, k: int) -> np.ndarray:
        """``f_k = sum_{tau_k} f_{k, tau_k}``."""
        out = np.zeros(self.shape, dtype=complex)
        for j in range(len(self.tree.caps(k))):
            out += self.pruned_on_grid(k, j)
        return out

    def unpruned_at(self, k: int, j: int, points) -> np.ndarray:
        if k == self.N:
            leaf = self.leaf_field(j)
            if not len(leaf):
                return np.zeros(np.shape(points)[:-1], dtype=complex)
            return leaf.evaluate(points)
        out = np.zeros(np.shape(points)[:-1], dtype=complex)
        for c in self.tree.children(k, j):
            out += self.pruned_at(k + 1, c, points)
        return out

    def pruned_at(self, k: int, j: int, points) -> np.ndarray:
        """Off-grid evaluation of ``f_{k, tau_k}`` through the whole subtree."""
        return self.nodes[(k, j)].mask_at(points) * self.unpruned_at(k, j, points)

    def packet_rows(self) -> list[dict]:
        rows = []
        for (k, j), node in sorted(self.nodes.items()):
            for t1 in range(node.tiling.n1):
                for t2 in range(node.tiling.n2):
                    rows.append({"scale": k, "cap": j, "t1": t1, "t2": t2,
                                 "amplitude": float(node.amplitudes[t1, t2]),
                                 "kept": int(node.kept[t1, t2])})
        return rows

    def summary(self) -> dict:
        per_scale = {}
        for (k, _), node in self.nodes.items():
            s = per_scale.setdefault(k, {"caps": 0, "tubes": 0, "kept": 0, "refined": 0})
            s["caps"] += 1
            s["tubes"] += node.kept.size
            s["kept"] += int(node.kept.sum())
            s["refined"] += node.refined
        return {"lambda": self.lam, "grid": list(self.shape),
                "scales": {str(k): per_scale[k] for k in sorted(per_scale)}}


def ladder_tilings(tree: CapTree, R: int, width: float = DEFAULT_WIDTH) -> dict[tuple[int, int], TubeTiling]:
    return {(k, j): tube_tiling(cap, R, width)
            for k in range(1, tree.ladder.N + 1) for j, cap in enumerate(tree.caps(k))}


def _refine(evaluate: Callable[[np.ndarray], np.ndarray], tiling: TubeTiling,
            tubes: np.ndarray, centres: np.ndarray, spacing: np.ndarray, factor: int) -> np.ndarray:
    """Sup of ``|Psi_t F|`` on a ``factor``-times finer grid spanning one cell around each centre."""
    offs = np.arange(-factor, factor + 1) / factor
    local = np.stack(np.meshgrid(offs * spacing[0], offs * spacing[1], indexing="ij"), axis=-1).reshape(-1, 2)
    pts = centres[:, None, :] + local[None, :, :]
    vals = np.abs(evaluate(pts))
    out = np.empty(len(tubes))
    for i, (t1, t2) in enumerate(tubes):
        out[i] = float(np.max(vals[i] * tiling.psi(int(t1), int(t2), pts[i])))
    return out


def prune_ladder(f: BandlimitedField, tree: CapTree, params: PruneParams,
                 shape: tuple[int, int] | None = None, width: float = DEFAULT_WIDTH,
                 window: int = DEFAULT_WINDOW, refine_factor: int = 8,
                 refine_band: float = 0.5, visitor: Visitor | None = None,
                 tilings: dict | None = None) -> PrunedLadder:
    """Top-down pruning ``f_N -> f_1`` on one periodic grid.

    Nodes are processed depth first in post order, so each ``f_{k+1, tau_k}``
    exists only while its parent is being assembled.  ``visitor(k, j, F, P)``
    receives ``F = f_{k+1, tau_k}`` and ``P = f_{k, tau_k}`` for every node.

    A tube is kept when its amplitude is at most ``lam``.  Grid amplitudes
    within ``[refine_band * lam, lam]`` are refined on a ``refine_factor``-times
    finer local grid around the grid argmax before the decision.
    """
    lam = params.lam
    R = f.R
    N = tree.ladder.N
    tilings = tilings or ladder_tilings(tree, R, width)
    if shape is None:
        shape = adapted_shape(R, list(tilings.values()), minimum=(64, 64))
    leaves = tree.caps(N)
    theta_of_leaf = tuple(int(c.index) for c in leaves)
    ladder = PrunedLadder(f, tree, params, tuple(shape), {}, theta_of_leaf)
    spacing = np.array([R / shape[0], R / shape[1]])
    # tilings sharing a lattice share their bump table; only repeated ones are cached
    uses = Counter((t.n1, t.n2, t.e) for t in tilings.values())
    tables: dict = {}

    def table_for(tiling: TubeTiling) -> _BumpTable:
        key = (tiling.n1, tiling.n2, tiling.e)
        if key in tables:
            return tables[key]
        table = _BumpTable(tiling, ladder.shape, window)
        if uses[key] > 1:
            tables[key] = table
        return table

    def process(k: int, j: int) -> np.ndarray:
        if k == N:
            F = ladder.unpruned_on_grid(N, j)
        else:
            F = np.zeros(ladder.shape, dtype=complex)
            for c in tree.children(k, j):
                F += process(k + 1, c)
        tiling = tilings[(k, j)]
        n1, n2 = tiling.n1, tiling.n2
        refined = 0
        if not np.any(F):
            amps = np.zeros((n1, n2))
            kept = np.ones((n1, n2), dtype=bool)
        else:
            amps, where, _, _ = tube_amplitudes(F, tiling, lam, window, table=table_for(tiling))
            band = (amps >= refine_band * lam) & (amps <= lam)
            if refine_factor > 1 and band.any() and not math.isinf(lam):
                tubes = np.argwhere(band)
                centres = where[band] * spacing
                amps[band] = np.maximum(amps[band], _refine(
                    lambda p: ladder.unpruned_at(k, j, p), tiling, tubes, centres, spacing, refine_factor))
                refined = len(tubes)
            kept = amps <= lam
        spectrum = None if kept.all() else tiling.mask_coefficients(kept)
        node = NodeRecord(k, j, tiling, amps, kept, refined, spectrum)
        ladder.nodes[(k, j)] = node
        if spectrum is None:
            P = F
        elif not kept.any():
            P = np.zeros_like(F)
        else:
            P = node.mask_on_grid(ladder.shape) * F
        if visitor is not None:
            visitor(k, j, F, P)
        return P

    for j in range(len(tree.caps(1))):
        process(1, j)
    return ladder


def check_partition_of_unity(tiling: TubeTiling, points: np.ndarray, tol: float = 1e-10) -> float:
    """Max deviation of the planar bump sum from one at ``points``."""
    dev = float(np.max(np.abs(tiling.plane_sum(points) - 1.0)))
    if dev > tol:
        raise InvariantViolation("partition of unity violated", {"deviation": dev})
    return dev


def fourier_leakage(ladder: PrunedLadder, k: int, j: int, dilation: float | None = None) -> float:
    """Fraction of the ``l^2`` Fourier mass of ``f_{k, tau_k}`` outside ``(1 + eps) tau_k``.

    ``eps`` defaults to ``(log R)^{-8}``; the block is dilated about its base
    point in both the tangent and the normal direction.  The field is
    demodulated to the cap's base frequency and transformed on the ladder grid,
    which must be wide enough to hold the block plus the reach of every mask
    applied on the way down; otherwise the coefficients would alias.
    """
    cap = ladder.tree.caps(k)[j]
    R = ladder.f.R
    eps = math.log(R) ** -8 if dilation is None else float(dilation)
    reach1 = reach2 = 0.0
    node = (k, j)
    for level in range(k, ladder.N + 1):
        til = ladder.nodes[node].tiling if node in ladder.nodes else None
        if til is not None:
            reach1 += KAPPA_MAX * til.n1
            reach2 += KAPPA_MAX * (til.n2 + abs(til.e))
        children = ladder.tree.children(level, node[1]) if level < ladder.N else []
        if not children:
            break
        # the widest child bounds the reach of the next level
        node = (level + 1, max(children, key=lambda c: ladder.nodes[(level + 1, c)].tiling.n1))
    need1 = 2 * ((1 + eps) * cap.halfwidth * R + reach1) + 1
    sag = cap.halfwidth ** 2 * (1 + eps) ** 2
    need2 = 2 * ((1 + eps) * (cap.thickness + sag) * R
                 + abs(cap.slope) * (1 + eps) * cap.halfwidth * R + reach2) + 1
    g1, g2 = ladder.shape
    if need1 > g1 or need2 > g2:
        raise InvalidArgument(f"grid {ladder.shape} too small to resolve the spectrum of "
                              f"cap ({k}, {j}); needs ({need1:.0f}, {need2:.0f})")
    P = ladder.pruned_on_grid(k, j)
    base = np.rint(cap.base_point * R).astype(np.int64)
    x1 = np.arange(g1) * (R / g1)
    x2 = np.arange(g2) * (R / g2)
    demod = np.exp(-2j * np.pi * base[0] * x1 / R)[:, None] * np.exp(-2j * np.pi * base[1] * x2 / R)[None, :]
    coeffs = sfft.fft2(P * demod, norm="forward")
    b1 = np.fft.fftfreq(g1, 1.0 / g1)
    b2 = np.fft.fftfreq(g2, 1.0 / g2)
    xi = np.stack(np.meshgrid((base[0] + b1) / R, (base[1] + b2) / R, indexing="ij"), axis=-1)
    inside = (np.abs(xi[..., 0] - cap.center) <= (1 + eps) * cap.halfwidth) & \
        (np.abs(cap.normal_offset(xi)) <= (1 + eps) * cap.thickness)
    mass = np.abs(coeffs) ** 2
    total = float(mass.sum())
    return float(mass[~inside].sum()) / total if total > 0 else 0.0


def write_packets_csv(path, ladder: PrunedLadder) -> Path:
    path = Path(path)
    rows = ladder.packet_rows()
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["scale", "cap", "t1", "t2", "amplitude", "kept"])
        w.writeheader()
        for row in rows:
            w.writerow({**row, "amplitude": repr(row["amplitude"])})
    return path


def iter_nodes_postorder(tree: CapTree) -> Iterator[tuple[int, int]]:
    N = tree.ladder.N

    def walk(k, j):
        if k < N:
            for c in tree.children(k, j):
                yield from walk(k + 1, c)
        yield (k, j)

    for j in range(len(tree.caps(1))):
        yield from walk(1, j)


def replay(ladder: PrunedLadder, visitor: Visitor) -> None:
    """Call ``visitor(k, j, F, P)`` for every node in post order without re-pruning."""
    N = ladder.N
    tree = ladder.tree

    def walk(k: int, j: int) -> np.ndarray:
        if k == N:
            F = ladder.unpruned_on_grid(N, j)
        else:
            F = np.zeros(ladder.shape, dtype=complex)
            for c in tree.children(k, j):
                F += walk(k + 1, c)
        node = ladder.nodes[(k, j)]
        P = F if node.spectrum is None else node.mask_on_grid(ladder.shape) * F
        visitor(k, j, F, P)
        return P

    for j in range(len(tree.caps(1))):
        walk(1, j)
