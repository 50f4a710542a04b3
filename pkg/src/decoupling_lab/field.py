"""Band-limited fields built from frequency atoms on the lattice ``(1/R) Z^2``.

A field is ``f(x) = sum_j a_j e(j . x / R)`` over integer lattice indices ``j``.
It is ``R``-periodic, so every ``L^p`` norm over ``Q_R = [0, R)^2`` with even
``p`` is a trigonometric polynomial integral that a fine enough uniform grid
computes exactly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field as dc_field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import fft as sfft
from scipy.special import erf

from .caps import CapSpec, CurveSpec, build_caps, cap_of
from .errors import InvalidArgument

_LATTICE_TOL = 1e-9
SUPPORTED_P = (2, 4, 6, math.inf)


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid on ``Q_R`` with the given spacing."""

    R: int
    spacing: float

    def __post_init__(self):
        n = self.R / self.spacing
        if abs(n - round(n)) > 1e-9 or round(n) < 1:
            raise InvalidArgument("R / spacing must be a positive integer")

    @classmethod
    def exact(cls, R: int) -> "GridSpec":
        return cls(R, 1.0 / 16)

    @classmethod
    def fast(cls, R: int) -> "GridSpec":
        return cls(R, 1.0 / 4)

    @property
    def n(self) -> int:
        return int(round(self.R / self.spacing))

    @property
    def mode(self) -> str:
        return "exact" if self.spacing <= 1.0 / 16 else "fast"

    def to_dict(self) -> dict:
        return {"R": self.R, "spacing": self.spacing, "n": self.n, "mode": self.mode}


def lattice_indices(R: int, xi: np.ndarray) -> np.ndarray:
    """Integer indices ``j = R xi``; raises when a point is off the lattice."""
    scaled = np.asarray(xi, dtype=float).reshape(-1, 2) * R
    j = np.rint(scaled)
    if np.any(np.abs(scaled - j) > _LATTICE_TOL * max(1.0, R)):
        raise InvalidArgument("frequency atom is not on the (1/R) lattice")
    return j.astype(np.int64)


def assign_caps(caps: Sequence[CapSpec], R: int, idx: np.ndarray) -> np.ndarray:
    """Final-scale cap owning each lattice index; raises when none contains it."""
    xi = idx / R
    owner = cap_of(caps, xi[:, 0])
    out = owner.copy()
    for n, (o, p) in enumerate(zip(owner, xi)):
        if caps[o].contains(p):
            continue
        for alt in (o - 1, o + 1):
            if 0 <= alt < len(caps) and caps[alt].contains(p):
                out[n] = alt
                break
        else:
            raise InvalidArgument(f"atom at xi={tuple(p)} lies in no final-scale cap block")
    return out


@dataclass(frozen=True, eq=False)
class BandlimitedField:
    """Frequency atoms ``(j, a_j)`` with their final-scale cap labels.

    ``grid`` is optional; :attr:`samples` synthesizes on it lazily.
    """

    R: int
    indices: np.ndarray
    amplitudes: np.ndarray
    caps: tuple[CapSpec, ...] = dc_field(repr=False)
    cap_index: np.ndarray = dc_field(repr=False)
    grid: GridSpec | None = None

    @property
    def xi(self) -> np.ndarray:
        return self.indices / self.R

    def __len__(self) -> int:
        return len(self.amplitudes)

    @cached_property
    def samples(self) -> np.ndarray:
        if self.grid is None:
            raise InvalidArgument("field has no grid to sample on")
        return synthesize(self, self.grid)

    def select(self, mask: np.ndarray) -> "BandlimitedField":
        mask = np.asarray(mask, dtype=bool)
        return BandlimitedField(self.R, self.indices[mask], self.amplitudes[mask],
                                self.caps, self.cap_index[mask], self.grid)

    def scaled(self, factor: complex) -> "BandlimitedField":
        return BandlimitedField(self.R, self.indices, self.amplitudes * factor,
                                self.caps, self.cap_index, self.grid)

    def cap_field(self, theta: int) -> "BandlimitedField":
        """``f_theta``: the atoms labelled with final-scale cap ``theta``."""
        return self.select(self.cap_index == theta)

    @property
    def occupied_caps(self) -> np.ndarray:
        return np.unique(self.cap_index)

    def evaluate(self, points: np.ndarray, chunk: int = 4096) -> np.ndarray:
        """Direct evaluation of the exponential sum at arbitrary points."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        out = np.empty(len(pts), dtype=complex)
        freqs = self.indices.astype(float) / self.R
        for s in range(0, len(pts), chunk):
            phase = np.exp(2j * np.pi * (pts[s:s + chunk] @ freqs.T))
            out[s:s + chunk] = phase @ self.amplitudes
        return out.reshape(np.shape(points)[:-1])

    def on_grid(self, shape: tuple[int, int]) -> np.ndarray:
        """Exact samples at ``x = (i R / n1, k R / n2)`` for any grid shape.

        Atoms are folded modulo the grid size; folding is exact for point
        values because ``e(j x / R)`` only depends on ``j mod n`` there.
        """
        n1, n2 = shape
        spec = np.zeros((n1, n2), dtype=complex)
        np.add.at(spec, (self.indices[:, 0] % n1, self.indices[:, 1] % n2), self.amplitudes)
        return sfft.ifft2(spec, norm="forward")


def make_field(R: int, xi: np.ndarray, amplitudes: Sequence[complex],
               curve: CurveSpec | None = None, caps: Sequence[CapSpec] | None = None,
               grid: GridSpec | None = None) -> BandlimitedField:
    """Validate atoms (lattice, cap membership) and build a field."""
    idx = lattice_indices(R, xi)
    return field_from_indices(R, idx, amplitudes, curve, caps, grid)


def field_from_indices(R: int, idx: np.ndarray, amplitudes: Sequence[complex],
                       curve: CurveSpec | None = None, caps: Sequence[CapSpec] | None = None,
                       grid: GridSpec | None = None) -> BandlimitedField:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1, 2)
    amps = np.asarray(amplitudes, dtype=complex).reshape(-1)
    if len(amps) != len(idx):
        raise InvalidArgument("one amplitude per atom is required")
    if caps is None:
        caps = build_caps(curve or CurveSpec.parabola(), R)
    caps = tuple(caps)
    labels = assign_caps(caps, R, idx) if len(idx) else np.zeros(0, dtype=int)
    return BandlimitedField(int(R), idx, amps, caps, labels, grid)


def synthesize(f: BandlimitedField, grid: GridSpec) -> np.ndarray:
    """Samples on ``grid`` from one inverse FFT of the placed atoms."""
    n = grid.n
    if grid.R != f.R:
        raise InvalidArgument("grid and field disagree on R")
    if len(f.indices) and (f.indices.min() < -n // 2 or f.indices.max() >= n - n // 2):
        raise InvalidArgument("atom beyond the Nyquist frequency of the grid")
    return f.on_grid((n, n))


def lattice_points_in_cap(cap: CapSpec, R: int, margin: float = 0.0) -> np.ndarray:
    """Lattice indices inside a cap block, keeping ``margin * width`` off each side."""
    width = cap.hi - cap.lo
    lo = cap.lo + margin * width
    hi = cap.hi - margin * width
    j1 = np.arange(math.ceil(lo * R - 1e-9), math.floor(hi * R + 1e-9) + 1)
    if j1.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    centre = cap.height + cap.slope * (j1 / R - cap.center)
    rows = []
    for a, c in zip(j1, centre):
        low = math.ceil((c - cap.thickness) * R - 1e-9)
        high = math.floor((c + cap.thickness) * R + 1e-9)
        for b in range(low, high + 1):
            rows.append((a, b))
    pts = np.array(rows, dtype=np.int64).reshape(-1, 2)
    keep = cap.contains(pts / R)
    if margin == 0.0:
        keep &= (pts[:, 0] / R < cap.hi - 1e-12) | (cap.hi >= 1.0)
    return pts[keep]


def random_field(R: int, rng: np.random.Generator, caps_used: Sequence[int] | None = None,
                 atoms_per_cap: int = 4, margin: float = 0.125,
                 curve: CurveSpec | None = None, grid: GridSpec | None = None) -> BandlimitedField:
    """Random complex Gaussian amplitudes on random lattice points of the chosen caps."""
    curve = curve or CurveSpec.parabola()
    caps = build_caps(curve, R)
    chosen = range(len(caps)) if caps_used is None else caps_used
    idx, amps = [], []
    for t in chosen:
        pts = lattice_points_in_cap(caps[t], R, margin)
        if len(pts) == 0:
            continue
        take = rng.choice(len(pts), size=min(atoms_per_cap, len(pts)), replace=False)
        idx.append(pts[np.sort(take)])
        amps.append(rng.normal(size=len(take)) + 1j * rng.normal(size=len(take)))
    if not idx:
        return field_from_indices(R, np.zeros((0, 2)), [], caps=caps, grid=grid)
    return field_from_indices(R, np.vstack(idx), np.concatenate(amps), caps=caps, grid=grid)


def restrict_to_cap(f: BandlimitedField, cap: CapSpec) -> BandlimitedField:
    """Atoms inside the cap block.

    The abscissa range is taken half open, ``lo <= xi_1 < hi`` (closed at
    ``xi_1 = 1``), so restricting to every cap of a tiling partitions the atoms.
    """
    xi = f.xi
    x1 = xi[:, 0]
    in_range = (x1 >= cap.lo - 1e-12) & ((x1 < cap.hi - 1e-12) | ((cap.hi >= 1.0) & (x1 <= 1.0)))
    inside = in_range & (np.abs(cap.normal_offset(xi)) <= cap.thickness * (1 + 1e-12))
    return f.select(inside)


def _normalize_p(p) -> float:
    if isinstance(p, str):
        p = math.inf if p.lower() in ("inf", "infinity", "∞") else float(p)
    p = float(p)
    if p not in SUPPORTED_P:
        raise InvalidArgument(f"p must be one of 2, 4, 6, inf; got {p}")
    return p


def minimal_exact_shape(f: BandlimitedField, p: float) -> tuple[int, int]:
    """Smallest fast-FFT grid on which the trapezoid sum of ``|f|^p`` is exact."""
    ext = f.indices.max(axis=0) - f.indices.min(axis=0)
    factor = 2 if math.isinf(p) else p / 2
    return tuple(int(sfft.next_fast_len(int(factor * e) + 1)) for e in ext)


def _baseband_samples(f: BandlimitedField, shape: tuple[int, int]) -> np.ndarray:
    """``|f|`` is unchanged by shifting all indices, so sample the shifted field."""
    shifted = BandlimitedField(f.R, f.indices - f.indices.min(axis=0), f.amplitudes,
                               f.caps, f.cap_index)
    return shifted.on_grid(shape)


def lp_norm(f: BandlimitedField, p, region=None, grid: GridSpec | None = None,
            refine_cells: int = 100, refine_factor: int = 8) -> float:
    """``||f||_{L^p(Q_R)}`` for ``p`` in {2, 4, 6, inf}.

    Without ``grid`` the minimal exact grid for the atom spread is used.  With
    ``region = ((a1, b1), (a2, b2))`` the integral over that box is a Riemann
    sum on the grid (approximate).  For ``p = inf`` the result is the grid
    maximum improved by direct evaluation on ``refine_factor``-times finer
    subgrids of the ``refine_cells`` largest cells; it is a lower bound.
    """
    p = _normalize_p(p)
    if len(f) == 0:
        return 0.0
    if grid is not None:
        vals = np.abs(synthesize(f, grid))
        shape = (grid.n, grid.n)
    else:
        shape = minimal_exact_shape(f, p)
        if region is not None:
            shape = tuple(max(s, 2 * int(math.ceil(f.R))) for s in shape)
        vals = np.abs(_baseband_samples(f, shape))
    cell = (f.R / shape[0]) * (f.R / shape[1])
    if region is not None:
        (a1, b1), (a2, b2) = region
        x1 = np.arange(shape[0]) * (f.R / shape[0])
        x2 = np.arange(shape[1]) * (f.R / shape[1])
        m1 = (x1 >= a1) & (x1 < b1)
        m2 = (x2 >= a2) & (x2 < b2)
        vals = vals[np.ix_(m1, m2)]
        if vals.size == 0:
            return 0.0
    if math.isinf(p):
        best = float(vals.max())
        if region is None and refine_cells > 0:
            best = max(best, _refine_max(f, vals, shape, refine_cells, refine_factor))
        return best
    return float((np.sum(vals ** p) * cell) ** (1.0 / p))


def _refine_max(f: BandlimitedField, vals: np.ndarray, shape, cells: int, factor: int) -> float:
    flat = vals.ravel()
    top = np.argpartition(flat, -min(cells, flat.size))[-min(cells, flat.size):]
    h1, h2 = f.R / shape[0], f.R / shape[1]
    offs = (np.arange(factor) - factor / 2 + 0.5) / factor
    o1, o2 = np.meshgrid(offs * h1, offs * h2, indexing="ij")
    i1, i2 = np.unravel_index(top, shape)
    pts = np.stack([(i1[:, None] * h1 + o1.ravel()[None, :]).ravel(),
                    (i2[:, None] * h2 + o2.ravel()[None, :]).ravel()], axis=-1)
    return float(np.abs(f.evaluate(pts)).max())


# ---------------------------------------------------------------------------
# Weights


@dataclass(frozen=True)
class WeightFunction:
    """Gaussian-smoothed indicator of the doubled box ``2S``.

    ``w(x) = prod_i P((x_i - c_i) / side_i)`` with
    ``P(t) = (erf((t + 1)/sigma) - erf((t - 1)/sigma)) / 2`` and
    ``sigma = 1 / (side * fourierRadius)`` (per axis).  The smoothing Gaussian
    has Fourier transform ``exp(-pi^2 (xi / fourierRadius)^2)``, which is below
    ``6e-5`` outside the radius.  On ``S`` each factor is at least
    ``(erf(3) + erf(1)) / 2 > 0.92``; the integral is exactly ``4 |S|``.
    """

    center: tuple[float, float]
    side: tuple[float, float]
    fourier_radius: float
    kappa: float

    @property
    def sigma(self) -> tuple[float, float]:
        return tuple(1.0 / (s * self.fourier_radius) for s in self.side)

    @property
    def decay_scale(self) -> tuple[float, float]:
        """Length scale of the Gaussian tail outside ``kappa S``."""
        return tuple(sg * s for sg, s in zip(self.sigma, self.side))

    def __call__(self, x: np.ndarray, period: float | None = None, images: int = 1) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if period is None:
            return self._profile(x)
        total = np.zeros(x.shape[:-1])
        for m1 in range(-images, images + 1):
            for m2 in range(-images, images + 1):
                total += self._profile(x + period * np.array([m1, m2]))
        return total

    def _profile(self, x: np.ndarray) -> np.ndarray:
        out = np.ones(x.shape[:-1])
        for i in range(2):
            out = out * self.axis_profile(i, x[..., i])
        return out

    def axis_profile(self, i: int, x, period: float | None = None, images: int = 1) -> np.ndarray:
        """One factor of the product weight, optionally summed over periodic images."""
        x = np.asarray(x, dtype=float)
        shifts = [0.0] if period is None else [m * period for m in range(-images, images + 1)]
        sg = self.sigma[i]
        out = np.zeros(x.shape)
        for sh in shifts:
            t = (x + sh - self.center[i]) / self.side[i]
            out += 0.5 * (erf((t + 1.0) / sg) - erf((t - 1.0) / sg))
        return out

    @property
    def integral(self) -> float:
        return 4.0 * self.side[0] * self.side[1]

    def decay_bound(self, x: np.ndarray) -> np.ndarray:
        """``exp(-dist(x, kappa S)^2 / scale^2)`` with per-axis scales."""
        x = np.asarray(x, dtype=float)
        expo = np.zeros(x.shape[:-1])
        for i in range(2):
            d = np.maximum(np.abs(x[..., i] - self.center[i]) - 0.5 * self.kappa * self.side[i], 0)
            expo += (d / self.decay_scale[i]) ** 2
        return np.exp(-expo)


def make_weight(box, fourier_radius: float, log_R: float) -> WeightFunction:
    """Weight adapted to ``box = ((a1, b1), (a2, b2))``.

    Requires ``fourier_radius >= 2 / side`` on both axes and ``log_R >= 2`` so
    that ``kappa = log R`` encloses the doubled box.
    """
    (a1, b1), (a2, b2) = box
    side = (float(b1 - a1), float(b2 - a2))
    if min(side) <= 0:
        raise InvalidArgument("weight box must have positive sides")
    if fourier_radius < 2.0 / min(side) * (1 - 1e-12):
        raise InvalidArgument("fourierRadius must be at least 2 / side(S)")
    if log_R < 2:
        raise InvalidArgument("log R must be at least 2 for the weight family")
    return WeightFunction((0.5 * (a1 + b1), 0.5 * (a2 + b2)), side, float(fourier_radius),
                          float(log_R))


# ---------------------------------------------------------------------------
# External formats


def write_atoms_csv(path, f: BandlimitedField) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["xi1", "xi2", "re", "im"])
        for (x1, x2), a in zip(f.xi, f.amplitudes):
            w.writerow([repr(float(x1)), repr(float(x2)), repr(float(a.real)), repr(float(a.imag))])


def read_atoms_csv(path, R: int, curve: CurveSpec | None = None) -> BandlimitedField:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append((float(row["xi1"]), float(row["xi2"]),
                         complex(float(row["re"]), float(row["im"]))))
    if not rows:
        return field_from_indices(R, np.zeros((0, 2)), [], curve)
    xi = np.array([[r[0], r[1]] for r in rows])
    return make_field(R, xi, [r[2] for r in rows], curve)


def write_snapshot(path, f: BandlimitedField, grid: GridSpec) -> Path:
    """Raw row-major complex128 samples plus a ``.json`` sidecar."""
    path = Path(path)
    samples = np.ascontiguousarray(synthesize(f, grid), dtype="<c16")
    samples.tofile(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps({"R": f.R, "grid": grid.to_dict(),
                                   "dtype": "float64 pairs (re, im)", "order": "row-major",
                                   "shape": list(samples.shape)}, indent=2, sort_keys=True))
    return sidecar


def read_snapshot(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    data = np.fromfile(path, dtype="<c16").reshape(meta["shape"])
    return data, meta
