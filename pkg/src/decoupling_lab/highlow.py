"""Auxiliary kernels, square functions and their high/low split.

All kernels live on the periodic grid over ``Q_R`` and are stored as discrete
measures (grid value times cell area).  With the multiplier ``eta_k`` applied
exactly on the DFT grid, ``g_k^l = g_k * eta_k^`` is a discrete convolution and
the low-frequency bound ``|g_k^l| <= g_{k+1}`` holds on the grid up to rounding
whenever the cross frequencies of distinct children miss the support of
``eta_k`` (the well-spaced case).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.fft as sfft
from scipy.ndimage import maximum_filter1d
from scipy.special import wofz

from .caps import CapSpec, CapTree, ScaleLadder, build_caps, cap_of
from .errors import InvalidArgument, InvariantViolation
from .field import BandlimitedField, make_weight
from .wavepacket import (DEFAULT_WIDTH, DEFAULT_WINDOW, PrunedLadder, PruneParams,
                         default_prune_exponent,
                         ladder_tilings, prune_ladder, replay, tube_amplitudes)

DEFAULT_SUP_WINDOW = 1.0
DEFAULT_KAPPA_CELL = 4.0
DEFAULT_TAIL_REL = 1e-9
LOW_TOLERANCE = 1e-3
DOMINATION_SLACK = 1e-2

_TABLE_STEP = 1.0 / 512
_TABLE_END = 2048.0


# ---------------------------------------------------------------------------
# One-dimensional profile


def profile_G(xi, log_R: float) -> np.ndarray:
    """Truncated Gaussian ``G`` with a plateau on ``[-delta, delta]``, ``delta = 1/log R``."""
    b = math.sqrt(log_R)
    d = 1.0 / log_R
    a = np.abs(np.asarray(xi, dtype=float))
    core = np.exp(-b * np.maximum(a, d) ** 2) - math.exp(-b)
    return np.where(a <= 1.0, core, 0.0)


def G_at_zero(log_R: float) -> float:
    b = math.sqrt(log_R)
    return math.exp(-b / log_R ** 2) - math.exp(-b)


def G_check(t, log_R: float) -> np.ndarray:
    """``int G(xi) e(t xi) d xi`` in closed form (real, even in ``t``).

    The Gaussian piece uses ``int_0^x e^{-b u^2} e(t u) du`` written with the
    Faddeeva function ``w``, which stays finite for large ``t``.
    """
    b = math.sqrt(log_R)
    d = 1.0 / log_R
    t = np.asarray(t, dtype=float)
    rb = math.sqrt(b)

    def E(x):
        z = rb * x - 1j * np.pi * t / rb
        return np.exp(-b * x * x + 2j * np.pi * t * x) * wofz(1j * z)

    safe = np.where(t == 0, 1.0, t)

    def sinc_int(x):
        return np.where(t == 0, x, np.sin(2 * np.pi * t * x) / (2 * np.pi * safe))

    gauss = (math.sqrt(math.pi) / (2 * rb)) * (E(d) - E(1.0))
    return (2 * math.exp(-b * d * d) * sinc_int(d) - 2 * math.exp(-b) * sinc_int(1.0)
            + 2 * gauss.real)


def G_check_l1(log_R: float, t_max: float = 2 ** 14, step: float = 1.0 / 128) -> float:
    """``||G^||_1`` by midpoint quadrature of the closed form plus a tail bound."""
    ts = np.arange(0.0, t_max, step) + step / 2
    vals = np.abs(G_check(ts, log_R))
    tail_c = float(np.max(ts[-4096:] ** 2 * vals[-4096:]))
    return float(2 * np.sum(vals) * step + 2 * tail_c / t_max)


def G_check_l1_fft(log_R: float, period: float = 64.0, per_unit: int = 4096) -> float:
    """Independent oracle: FFT of finely sampled ``G`` on a long periodic interval."""
    n = int(period * per_unit)
    xs = (np.arange(n) - n // 2) / per_unit
    samples = profile_G(xs, log_R)
    spec = np.fft.fft(np.fft.ifftshift(samples)) / per_unit
    return float(np.sum(np.abs(spec.real)) / period)


# ---------------------------------------------------------------------------
# eta


@dataclass(frozen=True)
class EtaKernel:
    """``eta_k(xi) = eta(scale * xi)`` with ``scale = 4 R_{k+2}^{1/2}``."""

    R: float
    k: int
    scale: float
    log_R: float

    @property
    def plateau(self) -> float:
        """``eta_k = 1`` when both ``|xi_i|`` are at most this."""
        return 1.0 / (self.log_R * self.scale)

    @property
    def support(self) -> float:
        """``eta_k = 0`` when some ``|xi_i|`` exceeds this."""
        return 1.0 / self.scale

    def __call__(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        g0 = G_at_zero(self.log_R)
        return (profile_G(self.scale * xi[..., 0], self.log_R)
                * profile_G(self.scale * xi[..., 1], self.log_R) / g0 ** 2)

    def l1_norm(self) -> float:
        """``||eta_k^||_1 = (||G^||_1 / G(0))^2``, the same for every ``k``."""
        return (G_check_l1(self.log_R) / G_at_zero(self.log_R)) ** 2

    def multiplier(self, shape: tuple[int, int]) -> np.ndarray:
        """``eta_k(j / R)`` on the half spectrum of a real FFT of ``shape``."""
        g1, g2 = shape
        j1 = np.fft.fftfreq(g1, 1.0 / g1)
        j2 = np.fft.rfftfreq(g2, 1.0 / g2)
        g0 = G_at_zero(self.log_R)
        p1 = profile_G(self.scale * j1 / self.R, self.log_R) / g0
        p2 = profile_G(self.scale * j2 / self.R, self.log_R) / g0
        return np.outer(p1, p2)

    def weights(self, shape: tuple[int, int]) -> np.ndarray:
        """Grid measure of ``eta_k^`` (sums to ``eta_k(0) = 1``)."""
        return sfft.irfft2(self.multiplier(shape), s=shape)

    def to_dict(self) -> dict:
        return {"k": self.k, "scale": self.scale, "plateau": self.plateau,
                "support": self.support}


def build_eta(R: float, k: int, ladder: ScaleLadder) -> EtaKernel:
    if not 1 <= k <= ladder.N - 1:
        raise InvalidArgument(f"eta_k needs 1 <= k <= N-1, got k={k}")
    return EtaKernel(float(R), k, 4.0 * math.sqrt(ladder.scale(k + 2)), ladder.log_R)


# ---------------------------------------------------------------------------
# phi


@lru_cache(maxsize=8)
def _running_max_table(log_R: float, window: float) -> tuple[np.ndarray, float]:
    """``M(t) >= sup_{|u - t| <= window} |G^(u)|`` sampled on ``[0, T]``, plus a tail constant.

    Each sample is enlarged by a local slope bound so the table dominates the
    continuous running max, not just its sampled version.  Beyond ``T`` the
    bound ``K / (t - window)^2`` takes over.
    """
    h = _TABLE_STEP
    reach = window + 2.0
    ts = np.arange(-reach, _TABLE_END + reach + h / 2, h)
    vals = G_check(ts, log_R)
    slope = np.abs(np.diff(vals)) / h
    local = np.maximum(np.concatenate(([slope[0]], slope)), np.concatenate((slope, [slope[-1]])))
    padded = np.abs(vals) + 2.0 * h * local
    size = 2 * int(math.ceil((window + h) / h)) + 1
    run = maximum_filter1d(padded, size=size, mode="nearest")
    keep = (ts >= -h / 2) & (ts <= _TABLE_END + h / 2)
    table = run[keep]
    far = (ts > _TABLE_END / 4) & (ts <= _TABLE_END + reach)
    tail = 1.5 * float(np.max(ts[far] ** 2 * np.abs(vals[far])))
    return table, tail


def _uniform_interp(x: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Linear interpolation on the grid ``0, h, 2h, ...`` for ``0 <= x <= (len - 1) h``."""
    u = x * (1.0 / _TABLE_STEP)
    i = np.minimum(u.astype(np.int64), len(values) - 2)
    w = u - i
    lo = values.take(i)
    return lo + w * (values.take(i + 1) - lo)


def running_max(t, log_R: float, window: float) -> np.ndarray:
    """Upper bound for ``sup_{|u - t| <= window} |G^(u)|``."""
    table, tail = _running_max_table(float(log_R), float(window))
    a = np.abs(np.asarray(t, dtype=float))
    near = _uniform_interp(np.minimum(a, _TABLE_END), table)
    cut = _TABLE_END - window
    with np.errstate(divide="ignore"):
        far = tail / np.maximum(a - window, 1.0) ** 2
    return np.where(a <= cut, near, far)


@lru_cache(maxsize=8)
def _running_max_primitive(log_R: float, window: float) -> tuple[np.ndarray, float, float]:
    table, tail = _running_max_table(log_R, window)
    grid = np.arange(len(table)) * _TABLE_STEP
    cut = _TABLE_END - window
    inner = grid <= cut + 1e-12
    prim = np.concatenate(([0.0], np.cumsum((table[1:] + table[:-1]) * _TABLE_STEP / 2)))
    at_cut = float(np.interp(cut, grid, prim))
    return prim[inner], at_cut, tail


def running_max_primitive(t, log_R: float, window: float) -> np.ndarray:
    """``int_0^t`` of the piecewise-linear running-max table (odd in ``t``)."""
    prim, at_cut, tail = _running_max_primitive(float(log_R), float(window))
    t = np.asarray(t, dtype=float)
    a = np.abs(t)
    cut = _TABLE_END - window
    near = _uniform_interp(np.minimum(a, (len(prim) - 1) * _TABLE_STEP), prim)
    with np.errstate(divide="ignore"):
        far = at_cut + tail * (1.0 / max(cut - window, 1.0) - 1.0 / np.maximum(a - window, 1.0))
    return np.sign(t) * np.where(a <= cut, near, far)


def running_max_l1(log_R: float, window: float) -> float:
    """``int |M(t)| dt`` over the line, table part plus the tail bound."""
    prim, at_cut, tail = _running_max_primitive(float(log_R), float(window))
    cut = _TABLE_END - window
    return 2 * (at_cut + tail / max(cut - window, 1.0))


def cell_average(t_lo, t_hi, log_R: float, window: float) -> np.ndarray:
    """Mean of the running max over ``[t_lo, t_hi]``."""
    t_lo = np.asarray(t_lo, dtype=float)
    t_hi = np.asarray(t_hi, dtype=float)
    return ((running_max_primitive(t_hi, log_R, window) - running_max_primitive(t_lo, log_R, window))
            / (t_hi - t_lo))


def wrapped_coordinates(R: float, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Minimal-image coordinates of the grid points in ``[-R/2, R/2)``."""
    g1, g2 = shape
    x1 = (np.arange(g1) * (R / g1) + R / 2) % R - R / 2
    x2 = (np.arange(g2) * (R / g2) + R / 2) % R - R / 2
    return x1, x2


def rho_check_abs(cap: CapSpec, points, log_R: float) -> np.ndarray:
    """``|rho_tau^(x)|`` in closed form for the ellipse map of ``2 tau``."""
    x = np.asarray(points, dtype=float)
    al = 2 * math.sqrt(2) * cap.halfwidth * log_R
    be = 2 * math.sqrt(2) * cap.thickness * log_R
    s = x[..., 0] + cap.slope * x[..., 1]
    g0 = G_at_zero(log_R)
    return al * be / g0 ** 2 * np.abs(G_check(al * s, log_R) * G_check(be * x[..., 1], log_R))


@dataclass(eq=False)
class PhiKernel:
    """``phi_{T_tau}`` on the grid as a measure, with its ``L^1`` bookkeeping.

    ``base`` is the sup-dilated ``|rho_tau^|``; ``inherited`` (``k >= 2``) is the
    parent's kernel convolved with ``|eta_{k-1}^|``.  ``weights`` is their max.
    """

    cap: CapSpec
    k: int
    R: float
    shape: tuple[int, int]
    window: float
    weights: np.ndarray = field(repr=False)
    base_l1: float
    inherited_l1: float
    base_fraction: float

    @property
    def l1(self) -> float:
        return float(np.sum(self.weights))

    @property
    def cell(self) -> float:
        return (self.R / self.shape[0]) * (self.R / self.shape[1])

    def density(self) -> np.ndarray:
        return self.weights / self.cell

    def to_dict(self) -> dict:
        return {"k": self.k, "cap": self.cap.index, "l1": self.l1, "baseL1": self.base_l1,
                "inheritedL1": self.inherited_l1, "baseFraction": self.base_fraction,
                "supWindow": self.window}


def sup_dilated_rho(cap: CapSpec, R: float, shape: tuple[int, int], log_R: float,
                    window: float = DEFAULT_SUP_WINDOW) -> np.ndarray:
    """``sup_{y in x + D tau*} |rho_tau^(y)|`` averaged over grid cells, as a density.

    The dilate of the dual body is replaced by the sheared box that contains
    it.  In the sheared variables ``(s, x_2)`` the sup factorizes into running
    maxima of ``|G^|`` with half-window ``window = 2 sqrt 2 D log R``.  Each factor
    is averaged over the cell around the grid point, so the grid sum equals the
    integral over one period even when the kernel is narrower than a cell.
    """
    al = 2 * math.sqrt(2) * cap.halfwidth * log_R
    be = 2 * math.sqrt(2) * cap.thickness * log_R
    x1, x2 = wrapped_coordinates(R, shape)
    h1, h2 = R / shape[0], R / shape[1]
    g0 = G_at_zero(log_R)
    # Cell edges in increasing x_1 order; adjacent cells share an edge, so the
    # primitive is evaluated once per edge.
    edges = -R / 2 - h1 / 2 + h1 * np.arange(shape[0] + 1)
    prim = running_max_primitive(al * (edges[:, None] + cap.slope * x2[None, :]), log_R, window)
    m1 = np.fft.ifftshift(np.diff(prim, axis=0), axes=0) / (al * h1)
    m2 = cell_average(be * (x2 - h2 / 2), be * (x2 + h2 / 2), log_R, window)
    return (al * be / g0 ** 2) * m1 * m2[None, :]


def phi_base_l1(log_R: float, window: float = DEFAULT_SUP_WINDOW) -> float:
    """``L^1`` norm of the sup-dilated ``|rho^|`` on the plane (same for every cap)."""
    return running_max_l1(log_R, window) ** 2 / G_at_zero(log_R) ** 2


def abs_eta_spectrum(eta: EtaKernel, shape: tuple[int, int]) -> np.ndarray:
    return sfft.rfft2(np.abs(eta.weights(shape)))


def build_phi(cap: CapSpec, ladder: ScaleLadder, shape: tuple[int, int], k: int,
              parent: PhiKernel | None = None, eta_abs_hat: np.ndarray | None = None,
              window: float = DEFAULT_SUP_WINDOW, inherited: np.ndarray | None = None) -> PhiKernel:
    """``phi_k = max(sup-dilated |rho^|, phi_{k-1} * |eta_{k-1}^|)`` on the grid.

    For ``k >= 2`` pass the parent kernel and ``rfft2(|eta_{k-1}^|)`` or a
    precomputed ``inherited`` measure.
    """
    R = float(ladder.R)
    cell = (R / shape[0]) * (R / shape[1])
    base = sup_dilated_rho(cap, R, shape, ladder.log_R, window) * cell
    if k == 1:
        return PhiKernel(cap, k, R, tuple(shape), window, base, float(base.sum()), 0.0, 1.0)
    if inherited is None:
        if parent is None or eta_abs_hat is None:
            raise InvalidArgument("phi_k for k >= 2 needs the parent kernel and |eta_{k-1}^|")
        inherited = inherit(parent, eta_abs_hat)
    w = np.maximum(base, inherited)
    frac = float(np.mean(base >= inherited))
    return PhiKernel(cap, k, R, tuple(shape), window, w, float(base.sum()),
                     float(inherited.sum()), frac)


def inherit(parent: PhiKernel, eta_abs_hat: np.ndarray) -> np.ndarray:
    """``phi_{k-1} * |eta_{k-1}^|`` as a measure."""
    out = sfft.irfft2(sfft.rfft2(parent.weights) * eta_abs_hat, s=parent.shape)
    return np.maximum(out, 0.0)


class PhiCache:
    """Builds ``phi`` along the current tree path and releases finished nodes."""

    def __init__(self, tree: CapTree, shape: tuple[int, int], etas: dict[int, EtaKernel],
                 window: float = DEFAULT_SUP_WINDOW):
        self.tree, self.shape, self.window = tree, tuple(shape), window
        self.ladder = tree.ladder
        self.eta_abs = {k: abs_eta_spectrum(e, self.shape) for k, e in etas.items()}
        self._phi: dict = {}
        self._inherited: dict = {}
        self.l1: dict[tuple[int, int], float] = {}
        self.base_l1: dict[tuple[int, int], float] = {}

    def parent(self, k: int, j: int) -> int:
        return self.tree.parents[k - 1][j]

    def get(self, k: int, j: int) -> PhiKernel:
        key = (k, j)
        if key in self._phi:
            return self._phi[key]
        cap = self.tree.caps(k)[j]
        if k == 1:
            phi = build_phi(cap, self.ladder, self.shape, 1, window=self.window)
        else:
            p = self.parent(k, j)
            if (k - 1, p) not in self._inherited:
                self._inherited[(k - 1, p)] = inherit(self.get(k - 1, p), self.eta_abs[k - 1])
            phi = build_phi(cap, self.ladder, self.shape, k, window=self.window,
                            inherited=self._inherited[(k - 1, p)])
        self._phi[key] = phi
        self.l1[key] = phi.l1
        self.base_l1[key] = phi.base_l1
        return phi

    def release(self, k: int, j: int) -> None:
        """Drop the kernel of a node whose subtree is finished."""
        self._phi.pop((k, j), None)
        self._inherited.pop((k, j), None)


# ---------------------------------------------------------------------------
# Square functions


def plateau_mask(eta: EtaKernel, shape: tuple[int, int]) -> np.ndarray:
    """Half-spectrum bins where ``eta_k = 1``."""
    g1, g2 = shape
    j1 = np.abs(np.fft.fftfreq(g1, 1.0 / g1))
    j2 = np.fft.rfftfreq(g2, 1.0 / g2)
    lim = eta.plateau * eta.R
    return (j1[:, None] <= lim) & (j2[None, :] <= lim)


@dataclass(eq=False)
class SquareFunctionStack:
    R: float
    N: int
    shape: tuple[int, int]
    g: dict[int, np.ndarray] = field(repr=False)
    low: dict[int, np.ndarray] = field(repr=False)
    fourth: dict[int, float]
    phi_l1: dict[int, float]
    phi_base_l1: dict[int, float]
    eta_l1_grid: dict[int, float]
    multiplicity: dict[int, int]
    well_spaced: bool
    tree: CapTree = field(repr=False)

    @property
    def cell(self) -> float:
        return (self.R / self.shape[0]) * (self.R / self.shape[1])

    @property
    def r(self) -> float:
        """Grid sup of ``g_N``."""
        return float(self.g[self.N].max())

    def high(self, k: int) -> np.ndarray:
        return self.g[k] - self.low[k]

    def summary(self) -> dict:
        return {"r": self.r, "grid": list(self.shape),
                "phiL1": {str(k): v for k, v in sorted(self.phi_l1.items())},
                "etaL1Grid": {str(k): v for k, v in sorted(self.eta_l1_grid.items())},
                "multiplicity": {str(k): v for k, v in sorted(self.multiplicity.items())}}


class StackBuilder:
    """Visitor that accumulates ``g_k = sum |F|^2 * phi`` in the Fourier domain.

    ``F`` is ``f_{k+1, tau_k}`` as delivered by the pruning traversal.
    """

    def __init__(self, tree: CapTree, shape: tuple[int, int], R: float,
                 window: float = DEFAULT_SUP_WINDOW, levels=None):
        self.tree, self.shape, self.R = tree, tuple(shape), float(R)
        ladder = tree.ladder
        self.N = ladder.N
        self.levels = set(range(1, self.N + 1) if levels is None else levels)
        self.etas = {k: build_eta(R, k, ladder) for k in range(1, self.N)}
        self.phis = PhiCache(tree, self.shape, self.etas, window)
        half = (self.shape[0], self.shape[1] // 2 + 1)
        self.ghat = {k: np.zeros(half, dtype=complex) for k in self.levels}
        self.fourth = {k: 0.0 for k in self.levels}
        self.support = {k: np.zeros(half, dtype=np.int32) for k in self.levels if k < self.N}
        self.outside = {k: ~plateau_mask(self.etas[k], self.shape) for k in self.support}
        self.cell = (self.R / self.shape[0]) * (self.R / self.shape[1])

    def __call__(self, k: int, j: int, F: np.ndarray, P: np.ndarray) -> None:
        if k in self.levels:
            sq = F.real ** 2 + F.imag ** 2
            spec = sfft.rfft2(sq)
            phi = self.phis.get(k, j)
            self.ghat[k] += spec * sfft.rfft2(phi.weights)
            self.fourth[k] += float(np.sum(sq * sq)) * self.cell
            if k in self.support:
                mag = np.abs(spec)
                top = float(mag.max())
                if top > 0:
                    self.support[k] += (mag > 1e-10 * top) & self.outside[k]
        if k < self.N:
            for c in self.tree.children(k, j):
                self.phis.release(k + 1, c)
        if k == 1:
            self.phis.release(1, j)

    def finish(self, previous: "SquareFunctionStack | None" = None) -> SquareFunctionStack:
        g, low = {}, {}
        for k in sorted(self.levels):
            g[k] = sfft.irfft2(self.ghat[k], s=self.shape)
            if k < self.N:
                low[k] = sfft.irfft2(self.ghat[k] * self.etas[k].multiplier(self.shape), s=self.shape)
        phi_l1, base_l1 = {}, {}
        for (k, _), v in self.phis.l1.items():
            phi_l1[k] = max(phi_l1.get(k, 0.0), v)
        for (k, _), v in self.phis.base_l1.items():
            base_l1[k] = max(base_l1.get(k, 0.0), v)
        stack = SquareFunctionStack(
            self.R, self.N, self.shape, g, low, dict(self.fourth), phi_l1, base_l1,
            {k: float(np.sum(np.abs(e.weights(self.shape)))) for k, e in self.etas.items()},
            {k: int(s.max()) for k, s in self.support.items()},
            self.tree.well_spaced, self.tree)
        if previous is not None:
            for name in ("g", "low", "fourth", "phi_l1", "phi_base_l1", "multiplicity"):
                merged = dict(getattr(previous, name))
                merged.update(getattr(stack, name))
                setattr(stack, name, merged)
        return stack


def top_pass(f: BandlimitedField, tree: CapTree, shape: tuple[int, int],
             window: float = DEFAULT_SUP_WINDOW, tilings: dict | None = None,
             width: float = DEFAULT_WIDTH) -> tuple[SquareFunctionStack, np.ndarray]:
    """``g_N = sum_theta |f_theta|^2 * phi_theta`` and the top-scale tube amplitudes."""
    N = tree.ladder.N
    R = float(f.R)
    builder = StackBuilder(tree, shape, R, window, levels=[N])
    tilings = tilings or ladder_tilings(tree, int(R), width)
    theta_of_leaf = [int(c.index) for c in tree.caps(N)]
    amps = []
    order = _leaf_order(tree)
    for j in order:
        leaf = f.select(f.cap_index == theta_of_leaf[j])
        F = leaf.on_grid(shape) if len(leaf) else np.zeros(shape, dtype=complex)
        builder(N, j, F, F)
        if np.any(F):
            a, _, _, _ = tube_amplitudes(F, tilings[(N, j)], full_limit=tilings[(N, j)].count)
            amps.append(a.ravel())
        _release_path(builder.phis, tree, N, j)
    for k in range(N - 1, 0, -1):
        for jj in range(len(tree.caps(k))):
            builder.phis.release(k, jj)
    stack = builder.finish()
    return stack, (np.concatenate(amps) if amps else np.zeros(0))


def _leaf_order(tree: CapTree) -> list[int]:
    N = tree.ladder.N
    out = []

    def walk(k, j):
        if k == N:
            out.append(j)
            return
        for c in tree.children(k, j):
            walk(k + 1, c)

    for j in range(len(tree.caps(1))):
        walk(1, j)
    return out


def _release_path(cache: PhiCache, tree: CapTree, k: int, j: int) -> None:
    """Release ``(k, j)`` and every ancestor whose last child this was."""
    cache.release(k, j)
    while k > 1:
        p = tree.parents[k - 1][j]
        siblings = tree.children(k - 1, p)
        if j != siblings[-1]:
            return
        k, j = k - 1, p
        cache.release(k, j)


@dataclass(frozen=True)
class StackConfig:
    width: float = DEFAULT_WIDTH
    window: int = DEFAULT_WINDOW
    sup_window: float = DEFAULT_SUP_WINDOW
    alpha: float | None = None
    m: int | None = None
    prune_quantile: float | None = None
    refine_factor: int = 8

    def to_dict(self) -> dict:
        return {"packetWidth": self.width, "amplitudeWindow": self.window,
                "supWindow": self.sup_window, "alpha": self.alpha, "m": self.m,
                "pruneQuantile": self.prune_quantile, "refineFactor": self.refine_factor}


@dataclass(eq=False)
class LadderRun:
    ladder: PrunedLadder
    stack: SquareFunctionStack
    params: PruneParams


def run_ladder(f: BandlimitedField, tree: CapTree, shape: tuple[int, int],
               config: StackConfig = StackConfig()) -> LadderRun:
    """Top pass for ``r``, pruning with ``lambda``, then ``g_1 .. g_{N-1}``.

    ``lambda = (log R)^m r / alpha``; ``alpha`` defaults to the grid sup of
    ``|f|``.  With ``prune_quantile`` set, ``lambda`` is that quantile of the
    top-scale tube amplitudes instead.
    """
    R = int(f.R)
    ladder = tree.ladder
    tilings = ladder_tilings(tree, R, config.width)
    top, amps = top_pass(f, tree, shape, config.sup_window, tilings)
    r = top.r
    if config.prune_quantile is not None:
        lam = float(np.quantile(amps, config.prune_quantile)) if amps.size else math.inf
        # Report the alpha that reproduces this lambda through the formula.
        m = default_prune_exponent(ladder.log_R) if config.m is None else config.m
        alpha = ladder.log_R ** m * r / lam if 0 < lam < math.inf else 0.0
        params = PruneParams(alpha=alpha, r=r, log_R=ladder.log_R, m=config.m, threshold=lam)
    else:
        alpha = config.alpha
        if alpha is None:
            alpha = float(np.max(np.abs(f.on_grid(shape)))) if len(f) else 0.0
        params = PruneParams(alpha=alpha, r=r, log_R=ladder.log_R, m=config.m)
    builder = StackBuilder(tree, shape, R, config.sup_window, levels=range(1, ladder.N))
    pruned = prune_ladder(f, tree, params, shape=shape, width=config.width, window=config.window,
                          refine_factor=config.refine_factor, visitor=builder, tilings=tilings)
    stack = builder.finish(previous=top)
    return LadderRun(pruned, stack, params)


def square_stack(pruned: PrunedLadder, sup_window: float = DEFAULT_SUP_WINDOW) -> SquareFunctionStack:
    """Square functions of an existing pruned ladder (replays its masks)."""
    builder = StackBuilder(pruned.tree, pruned.shape, pruned.f.R, sup_window)
    replay(pruned, builder)
    return builder.finish()


# ---------------------------------------------------------------------------
# Verifiers


def verify_low(stack: SquareFunctionStack, diagnostic: bool = False) -> dict:
    """``max_x (|g_k^l| - g_{k+1}) / r`` for every ``k < N``.

    Refuses a family that is not well spaced unless ``diagnostic`` is set.
    """
    if not stack.well_spaced and not diagnostic:
        raise InvalidArgument("the low-frequency bound needs a well-spaced cap family")
    r = stack.r
    out = {}
    for k in range(1, stack.N):
        diff = float(np.max(np.abs(stack.low[k]) - stack.g[k + 1]))
        out[k] = diff / r if r > 0 else 0.0
    return {"violation": out, "max": max(out.values()) if out else 0.0, "r": r,
            "wellSpaced": stack.well_spaced, "passed": all(v <= LOW_TOLERANCE for v in out.values())}


def difference_parallelogram(cap: CapSpec) -> np.ndarray:
    """Corners of ``2 (tau - tau)`` (counter-clockwise)."""
    u = 4 * cap.halfwidth * np.array([1.0, cap.slope])
    v = 4 * cap.thickness * np.array([0.0, 1.0])
    return np.array([-u - v, u - v, u + v, -u + v])


def _clip(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman intersection of two convex counter-clockwise polygons."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a
        inp, out = out, []
        if not inp:
            break

        def side(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        for m in range(len(inp)):
            p, q = np.array(inp[m]), np.array(inp[(m + 1) % len(inp)])
            sp, sq = side(p), side(q)
            if sq >= 0:
                if sp < 0:
                    out.append(tuple(p + (q - p) * (sp / (sp - sq))))
                out.append(tuple(q))
            elif sp >= 0:
                out.append(tuple(p + (q - p) * (sp / (sp - sq))))
    return np.array(out).reshape(-1, 2)


def overlap_count(caps, plateau: float) -> int:
    """Max over ``tau`` of the number of ``tau'`` whose difference sets meet outside the plateau."""
    polys = [difference_parallelogram(c) for c in caps]
    best = 0
    for i, p in enumerate(polys):
        count = 0
        for q in polys:
            inter = _clip(p, q)
            if len(inter) and np.max(np.abs(inter)) > plateau * (1 + 1e-12):
                count += 1
        best = max(best, count)
    return best


def verify_high(stack: SquareFunctionStack) -> dict:
    """``C_high(k) = int |g_k^h|^2 / sum_tau int |f_{k+1,tau}|^4`` against ``10 * overlap * ||phi||_1^2``."""
    out = {}
    for k in range(1, stack.N):
        gh = stack.high(k)
        num = float(np.sum(gh * gh)) * stack.cell
        den = stack.fourth.get(k, 0.0)
        c = num / den if den > 0 else 0.0
        eta = build_eta(stack.R, k, stack.tree.ladder)
        ov = overlap_count(stack.tree.caps(k), eta.plateau)
        phi = stack.phi_l1.get(k, 0.0)
        bound = 10.0 * ov * phi ** 2
        out[k] = {"C_high": c, "overlap": ov, "multiplicity": stack.multiplicity.get(k, 0),
                  "phiL1": phi, "bound": bound, "passed": c <= bound}
    return {"scales": out, "passed": all(v["passed"] for v in out.values())}


def _window_max_axis(a: np.ndarray, axis: int, c: int, kappa: float) -> np.ndarray:
    """Per cell of width ``c`` along ``axis``: max over the concentric ``kappa``-enlarged window."""
    n = a.shape[axis]
    length = int(round(kappa * c))
    start = int(math.floor((kappa - 1) * c / 2))
    cells = np.arange(n // c) * c - start
    out = None
    for off in range(length):
        sl = np.take(a, (cells + off) % n, axis=axis)
        out = sl if out is None else np.maximum(out, sl)
    return out


def enlarged_max(a: np.ndarray, cells: tuple[int, int], kappa: float) -> np.ndarray:
    """``||a||_{L^inf(kappa Q)}`` for every cell ``Q`` of ``cells`` grid points."""
    return _window_max_axis(_window_max_axis(a, 0, cells[0], kappa), 1, cells[1], kappa)


def _cell_points(ladder: ScaleLadder, k: int, R: float, shape) -> tuple[int, int]:
    side = math.sqrt(ladder.scale(k))
    c = [side * g / R for g in shape]
    if any(abs(x - round(x)) > 1e-9 or round(x) < 1 for x in c):
        raise InvalidArgument(f"grid {tuple(shape)} does not resolve cells of side {side}")
    return int(round(c[0])), int(round(c[1]))


@dataclass(eq=False)
class OmegaPartition:
    """Labels on the finest cells (``Q_1``): ``k`` for ``Omega_k`` and ``0`` for ``L``."""

    labels: np.ndarray = field(repr=False)
    thresholds: dict[int, float]
    cells: dict[int, tuple[int, int]]
    kappa: float
    delta: float
    tail_tol: float

    def counts(self) -> dict[str, int]:
        out = {"L": int(np.sum(self.labels == 0))}
        for k in sorted(self.thresholds):
            out[str(k)] = int(np.sum(self.labels == k))
        return out

    def coarse(self, k: int) -> np.ndarray:
        """Labels sampled at the ``Q_k`` cells."""
        f = (self.cells[k][0] // self.cells[1][0], self.cells[k][1] // self.cells[1][1])
        return self.labels[::f[0], ::f[1]]


def omega_partition(stack: SquareFunctionStack, delta: float | None = None,
                    tail_tol: float | None = None, kappa: float = DEFAULT_KAPPA_CELL) -> OmegaPartition:
    """Top-down sweep ``k = N-1 .. 1`` with thresholds ``(1+delta)^{N-k} r + (N-k) tailTol``."""
    ladder = stack.tree.ladder
    N = stack.N
    log_R = ladder.log_R
    delta = 1.0 / log_R if delta is None else float(delta)
    r = stack.r
    tail_tol = DEFAULT_TAIL_REL * r if tail_tol is None else float(tail_tol)
    cells = {k: _cell_points(ladder, k, stack.R, stack.shape) for k in range(1, N)}
    fine = cells[1]
    labels = np.zeros((stack.shape[0] // fine[0], stack.shape[1] // fine[1]), dtype=np.int8)
    thresholds = {}
    for k in range(N - 1, 0, -1):
        thr = (1 + delta) ** (N - k) * r + (N - k) * tail_tol
        thresholds[k] = thr
        trip = enlarged_max(stack.g[k], cells[k], kappa) > thr
        f = (cells[k][0] // fine[0], cells[k][1] // fine[1])
        trip = np.repeat(np.repeat(trip, f[0], axis=0), f[1], axis=1)
        labels[(labels == 0) & trip] = k
    return OmegaPartition(labels, thresholds, cells, kappa, delta, tail_tol)


def check_partition(part: OmegaPartition) -> None:
    total = sum(part.counts().values())
    if total != part.labels.size:
        raise InvariantViolation("Omega/L labels do not partition Q_R", part.counts())


def verify_high_domination(stack: SquareFunctionStack, part: OmegaPartition) -> dict:
    """On every ``Omega_k`` cell: ``||g_k|| <= 2 log R ||g_k^h||`` on the enlarged cell."""
    log_R = stack.tree.ladder.log_R
    limit = 2 * log_R * (1 + DOMINATION_SLACK)
    out = {}
    for k in sorted(part.thresholds):
        mask = part.coarse(k) == k
        if not mask.any():
            out[k] = {"cells": 0, "worstRatio": 0.0, "passed": True}
            continue
        top = enlarged_max(stack.g[k], part.cells[k], part.kappa)[mask]
        high = enlarged_max(np.abs(stack.high(k)), part.cells[k], part.kappa)[mask]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(high > 0, top / high, np.inf)
        worst = float(ratio.max())
        out[k] = {"cells": int(mask.sum()), "worstRatio": worst, "passed": worst <= limit}
    return {"limit": limit, "scales": out, "passed": all(v["passed"] for v in out.values())}


def check_L_chain(stack: SquareFunctionStack, part: OmegaPartition) -> bool:
    """On ``L`` every scale stays at or below its threshold on the enlarged cells."""
    for k, thr in part.thresholds.items():
        in_L = part.coarse(k) == 0
        vals = enlarged_max(stack.g[k], part.cells[k], part.kappa)
        if np.any(vals[in_L] > thr):
            return False
    return True


def _descendants(tree: CapTree, k0: int, j0: int, k: int) -> list[int]:
    nodes = [j0]
    for level in range(k0, k):
        nodes = [c for j in nodes for c in tree.children(level, j)]
    return nodes


def prune_residual(pruned: PrunedLadder, stack: SquareFunctionStack, k: int,
                   tau: tuple[int, int] | None = None, floor: float | None = None) -> dict:
    """Measured constant of the pruning residual bound at scale ``k``.

    ``LHS(x) = |sum_{tau_k in tau} (f_{k+1,tau_k} - f_{k,tau_k})(x)|`` for the
    coarse node ``tau = (k0, j0)`` with ``k0 <= k`` (default: every ``tau_k``).
    Returns ``max_x LHS / (g_k / lambda + floor)``; ``floor`` defaults to
    ``DEFAULT_TAIL_REL`` times the grid sup of ``|f|``.
    """
    if not 1 <= k < pruned.N:
        raise InvalidArgument(f"scale index must lie in 1..{pruned.N - 1}, got {k}")
    tree = pruned.tree
    if tau is None:
        nodes = list(range(len(tree.caps(k))))
    else:
        k0, j0 = tau
        if not 1 <= k0 <= k:
            raise InvalidArgument("the coarse cap must sit at a scale no finer than k")
        nodes = _descendants(tree, k0, j0, k)
    lhs = np.zeros(pruned.shape, dtype=complex)
    for j in nodes:
        F = pruned.unpruned_on_grid(k, j)
        lhs += F - pruned.nodes[(k, j)].mask_on_grid(pruned.shape) * F
    lhs = np.abs(lhs)
    if floor is None:
        top = float(np.max(np.abs(pruned.f.on_grid(pruned.shape)))) if len(pruned.f) else 0.0
        floor = DEFAULT_TAIL_REL * max(top, 1e-300)
    lam = pruned.lam
    scale = stack.g[k] / lam if lam > 0 else np.full(pruned.shape, np.inf)
    ratio = float(np.max(lhs / (scale + floor)))
    return {"k": k, "ratio": ratio, "lhsMax": float(lhs.max()), "lambda": lam, "floor": floor}


# ---------------------------------------------------------------------------
# Local bilinear restriction


def cap_distance(a: CapSpec, b: CapSpec) -> float:
    return max(a.lo, b.lo) - min(a.hi, b.hi)


@dataclass(frozen=True)
class BilinearReport:
    R: int
    T: float
    j: int
    distance: float
    ratios: tuple[float, ...]
    bound: float

    @property
    def worst(self) -> float:
        return max(self.ratios) if self.ratios else 0.0

    @property
    def passed(self) -> bool:
        return self.worst <= self.bound

    def to_dict(self) -> dict:
        return {"R": self.R, "T": self.T, "j": self.j, "dist": self.distance,
                "worst": self.worst, "bound": self.bound, "ratios": list(self.ratios),
                "passed": self.passed}


def verify_bilinear(f: BandlimitedField, tau: CapSpec, tau2: CapSpec, j: int, T: float,
                    ladder: ScaleLadder, placements: int = 20, seed: int = 0,
                    range_constant: float | None = None, shape: tuple[int, int] | None = None) -> BilinearReport:
    """Worst of ``int_{Q_T} |f_tau f_tau'|^2 / (T^{-2} dist^{-1} I * I')`` over random cubes.

    ``I = int sum_{tau_j in tau} |f_{tau_j}|^2 w_{Q_T}`` with the Gaussian-smoothed
    weight of the cube.  ``T`` must satisfy ``R_j >= T > c R_j^{1/2} / dist``
    with ``c = range_constant`` (default ``10 log R``).
    """
    R = int(f.R)
    log_R = ladder.log_R
    dist = cap_distance(tau, tau2)
    if dist <= 0:
        raise InvalidArgument("caps must be nonadjacent (positive distance)")
    Rj = ladder.scale(j)
    c = 10 * log_R if range_constant is None else float(range_constant)
    if not (Rj >= T > c * math.sqrt(Rj) / dist):
        raise InvalidArgument(f"T={T} outside ({c * math.sqrt(Rj) / dist:.4g}, {Rj:.4g}]")
    shape = shape or (2 * R, 2 * R)
    x1 = np.arange(shape[0]) * (R / shape[0])
    x2 = np.arange(shape[1]) * (R / shape[1])
    cell = (R / shape[0]) * (R / shape[1])
    xi1 = f.xi[:, 0]

    def part(cap):
        inside = (xi1 >= cap.lo) & (xi1 < cap.hi) if cap.hi < 1 else (xi1 >= cap.lo) & (xi1 <= cap.hi)
        return f.select(inside)

    fine = build_caps(f.caps[0].curve if f.caps else None, Rj)

    def pieces(g: BandlimitedField) -> np.ndarray:
        total = np.zeros(shape)
        if not len(g):
            return total
        owner = cap_of(fine, g.xi[:, 0])
        for o in np.unique(owner):
            F = g.select(owner == o).on_grid(shape)
            total += F.real ** 2 + F.imag ** 2
        return total

    g1, g2 = part(tau), part(tau2)
    if not len(g1) or not len(g2):
        return BilinearReport(R, float(T), j, dist, tuple([0.0] * placements), 10 * log_R ** 4)
    prod = np.abs(g1.on_grid(shape) * g2.on_grid(shape)) ** 2
    s1, s2 = pieces(g1), pieces(g2)
    rng = np.random.default_rng(seed)
    ratios = []
    n = (int(round(T * shape[0] / R)), int(round(T * shape[1] / R)))
    for _ in range(placements):
        corner = rng.uniform(0, R, size=2)
        w = make_weight(((corner[0], corner[0] + T), (corner[1], corner[1] + T)),
                        2 * log_R / T, log_R)
        w1 = w.axis_profile(0, x1, period=R)
        w2 = w.axis_profile(1, x2, period=R)
        i0 = (int(math.ceil(corner[0] * shape[0] / R)), int(math.ceil(corner[1] * shape[1] / R)))
        rows = (i0[0] + np.arange(n[0])) % shape[0]
        cols = (i0[1] + np.arange(n[1])) % shape[1]
        lhs = float(prod[np.ix_(rows, cols)].sum()) * cell
        I1 = float(w1 @ s1 @ w2) * cell
        I2 = float(w1 @ s2 @ w2) * cell
        denom = T ** -2 / dist * I1 * I2
        ratios.append(lhs / denom if denom > 0 else 0.0)
    return BilinearReport(R, float(T), j, dist, tuple(ratios), 10 * log_R ** 4)


# ---------------------------------------------------------------------------
# Multi-seed driver


def lemma_report(run: LadderRun, delta: float | None = None, tail_tol: float | None = None,
                 kappa: float = DEFAULT_KAPPA_CELL) -> dict:
    stack = run.stack
    part = omega_partition(stack, delta, tail_tol, kappa)
    check_partition(part)
    return {
        "low": verify_low(stack),
        "high": verify_high(stack),
        "omega": {"counts": part.counts(), "thresholds": {str(k): v for k, v in part.thresholds.items()},
                  "LChain": check_L_chain(stack, part)},
        "domination": verify_high_domination(stack, part),
        "stack": stack.summary(),
        "pruning": run.ladder.summary(),
        "params": run.params.to_dict(),
    }


@dataclass(frozen=True, eq=False)
class Instance:
    """A random field on a well-spaced final-scale family with its cap tree and grid."""

    f: BandlimitedField
    tree: CapTree
    shape: tuple[int, int]
    seed: int


def standard_instance(R: int, ratio: float, seed: int, atoms_per_cap: int = 4,
                      shape: tuple[int, int] | None = None, width: float = DEFAULT_WIDTH,
                      spacing_fraction: float = 0.5) -> Instance:
    """Random field on ``random_well_spaced`` caps.

    The default grid is at least ``(R/2, R/4)`` and resolves every ``Q_k`` cell
    and every tube lattice of the ladder.
    """
    from .caps import CurveSpec, cluster_tree, random_well_spaced
    from .field import random_field
    from .wavepacket import adapted_shape

    ladder = ScaleLadder(R, ratio)
    rng = np.random.default_rng(seed)
    chosen = random_well_spaced(ladder, rng)
    caps = build_caps(CurveSpec.parabola(), R)
    f = random_field(R, rng, caps_used=chosen, atoms_per_cap=atoms_per_cap)
    tree = cluster_tree([caps[i] for i in chosen], ladder, spacing_fraction)
    if shape is None:
        tilings = ladder_tilings(tree, R, width)
        side = int(round(R / math.sqrt(ladder.scale(1))))
        shape = adapted_shape(R, list(tilings.values()),
                              minimum=(max(R // 2, side), max(R // 4, side)))
    return Instance(f, tree, tuple(shape), seed)


def lemma_run(R: int, ratio: float, seed: int, config: StackConfig = StackConfig(),
              shape: tuple[int, int] | None = None, delta: float | None = None,
              tail_tol: float | None = None, kappa: float = DEFAULT_KAPPA_CELL,
              spacing_fraction: float = 0.5) -> dict:
    """Full ladder, stack and every lemma check for one seed, as a JSON-ready dict."""
    inst = standard_instance(R, ratio, seed, shape=shape, width=config.width,
                             spacing_fraction=spacing_fraction)
    run = run_ladder(inst.f, inst.tree, inst.shape, config)
    report = lemma_report(run, delta, tail_tol, kappa)
    report["seed"] = seed
    report["wellSpaced"] = inst.tree.well_spaced
    return report


def bilinear_run(R: int = 1024, ratio: float = 4, seed: int = 0, k: int = 1, j: int = 3,
                 T: float | None = None, range_constant: float = 1.0,
                 placements: int = 20) -> BilinearReport:
    """Bilinear check for the outermost nonadjacent caps at scale ``R_k`` of a random field.

    ``T`` defaults to half of ``R_j``.  The default range constant is 1: with
    ``10 log R`` the admissible range of ``T`` is empty at desk scale.
    """
    from .caps import CurveSpec
    from .field import random_field

    ladder = ScaleLadder(R, ratio)
    rng = np.random.default_rng(seed)
    f = random_field(R, rng)
    coarse = build_caps(CurveSpec.parabola(), ladder.scale(k))
    if len(coarse) < 3:
        raise InvalidArgument("scale R_k has fewer than three caps")
    T = ladder.scale(j) / 2 if T is None else T
    return verify_bilinear(f, coarse[0], coarse[-1], j, T, ladder, placements=placements,
                           seed=seed, range_constant=range_constant)
