"""Decoupling ratios, broad/narrow labels, extremizer search and the packet normal form."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft

from .caps import CapSpec, CurveSpec, build_caps, cap_of, rescale_map
from .errors import InvalidArgument, InvariantViolation
from .field import (BandlimitedField, field_from_indices, lattice_indices,
                    lattice_points_in_cap, lp_norm, minimal_exact_shape)
from .parallel import ordered_map
from .wavepacket import adapted_shape, decompose, tube_tiling

DECOUPLING_P = (4, 6)
EXACT_MAX_POINTS = 1 << 26
EXACT_MAX_R = 256
PAPER_BROAD_EXPONENT = 8.0
PAPER_COLUMN_EXPONENT = 9.0
ACTIVE_FLOOR = 1e-6
AMPLITUDE_EXPONENT = 1000
COUNT_EXPONENT = 22


# ---------------------------------------------------------------------------
# Decoupling ratio


@dataclass(frozen=True)
class DecouplingReport:
    R: int
    p: int
    ratio: float
    norm: float
    per_cap_norms: dict[int, float]
    mode: str
    descriptor: str = ""
    seed: int | None = None

    def to_dict(self) -> dict:
        return {"R": self.R, "p": self.p, "ratio": self.ratio, "norm": self.norm,
                "perCapNorms": {str(k): v for k, v in self.per_cap_norms.items()},
                "mode": self.mode, "input": self.descriptor, "seed": self.seed}


def _check_p(p) -> int:
    if p not in DECOUPLING_P:
        raise InvalidArgument(f"p must be 4 or 6, got {p}")
    return int(p)


def _resolve_mode(R: int, mode: str) -> str:
    if mode == "auto":
        return "exact" if R <= EXACT_MAX_R else "fast"
    if mode not in ("exact", "fast"):
        raise InvalidArgument(f"mode must be exact, fast or auto; got {mode!r}")
    return mode


def _fast_shape(f: BandlimitedField) -> tuple[int, int]:
    ext = f.indices.max(axis=0) - f.indices.min(axis=0)
    return tuple(int(sfft.next_fast_len(2 * int(e) + 2)) for e in ext)


def field_norm(f: BandlimitedField, p: int, mode: str = "exact") -> float:
    """``||f||_{L^p(Q_R)}``: exact trapezoid sum, or a Nyquist-rate Riemann sum in fast mode."""
    if len(f) == 0:
        return 0.0
    if mode == "exact":
        shape = minimal_exact_shape(f, p)
        if shape[0] * shape[1] > EXACT_MAX_POINTS:
            raise InvalidArgument(f"exact quadrature grid {shape} is too large; use fast mode")
        return lp_norm(f, p)
    shape = _fast_shape(f)
    shifted = BandlimitedField(f.R, f.indices - f.indices.min(axis=0), f.amplitudes,
                               f.caps, f.cap_index)
    vals = np.abs(shifted.on_grid(shape))
    cell = (f.R / shape[0]) * (f.R / shape[1])
    return float((np.sum(vals ** p) * cell) ** (1.0 / p))


def decoupling_ratio(f: BandlimitedField, p: int = 6, mode: str = "auto",
                     labels: np.ndarray | None = None, descriptor: str = "",
                     seed: int | None = None) -> DecouplingReport:
    """``||f||_p / (sum_theta ||f_theta||_p^2)^{1/2}``.

    ``labels`` groups the atoms into caps; the field's own final-scale cap
    labels are used by default.
    """
    p = _check_p(p)
    mode = _resolve_mode(f.R, mode)
    labels = f.cap_index if labels is None else np.asarray(labels)
    norm = field_norm(f, p, mode)
    per_cap = {}
    for theta in np.unique(labels):
        per_cap[int(theta)] = field_norm(f.select(labels == theta), p, mode)
    denom = math.sqrt(sum(v * v for v in per_cap.values()))
    ratio = norm / denom if denom > 0 else 0.0
    return DecouplingReport(int(f.R), p, ratio, norm, per_cap, mode, descriptor, seed)


def rescale_field(f: BandlimitedField, cap: CapSpec) -> BandlimitedField:
    """Image of a field supported in ``cap`` under the parabolic rescaling of ``cap``.

    The image lives on ``Q_{R'}`` with ``R' = R / nu`` and ``nu = scale^{1/2}``; the
    constant frequency shift is dropped since it does not change ``|f|``.  Atoms
    keep their cap labels, now attached to the image caps at scale
    ``R / scale``.  Only lattice-preserving configurations are accepted.
    """
    if cap.curve.kind != "parabola":
        raise InvalidArgument("lattice rescaling is implemented for the parabola only")
    nu = math.sqrt(cap.scale)
    R2 = f.R / nu
    if abs(R2 - round(R2)) > 1e-9:
        raise InvalidArgument("R / scale^{1/2} must be an integer")
    R2 = int(round(R2))
    if len(f) and not np.all(cap.contains(f.xi, tol=1e-9)):
        raise InvalidArgument("field has atoms outside the cap")
    lmap = rescale_map(cap)
    image = lmap(f.xi)
    idx = lattice_indices(R2, image)
    image_caps = tuple(build_caps(CurveSpec.parabola(), f.R / cap.scale))
    return BandlimitedField(R2, idx, f.amplitudes.copy(), image_caps, f.cap_index.copy())


# ---------------------------------------------------------------------------
# Broad / narrow


INACTIVE, BROAD, NARROW = 0, 1, 2


@dataclass(frozen=True, eq=False)
class BroadNarrowLabel:
    """Per-cell labels on a grid over ``Q_R``.

    ``kind`` is 0 (below the activity floor), 1 (broad) or 2 (narrow).
    ``alpha_level`` is the dyadic exponent of the bilinear max at broad cells.
    ``arc`` is the left cap of the certifying three-cap arc at narrow cells and
    ``certified`` records whether ``|f| <= (1 + 1/log R)|f_arc| + floor`` holds.
    """

    R1: float
    shape: tuple[int, int]
    kind: np.ndarray
    alpha_level: np.ndarray
    column_ok: np.ndarray
    arc: np.ndarray
    certified: np.ndarray
    floor: float
    broad_exponent: float
    column_exponent: float

    def counts(self) -> dict[str, int]:
        return {"inactive": int(np.sum(self.kind == INACTIVE)),
                "broad": int(np.sum(self.kind == BROAD)),
                "narrow": int(np.sum(self.kind == NARROW))}

    @property
    def uncertified(self) -> int:
        return int(np.sum((self.kind == NARROW) & ~self.certified))

    def rows(self, R: float) -> list[dict]:
        g1, g2 = self.shape
        out = []
        for i in range(g1):
            for k in range(g2):
                kind = int(self.kind[i, k])
                if kind == INACTIVE:
                    continue
                out.append({"x1": i * R / g1, "x2": k * R / g2,
                            "label": "broad" if kind == BROAD else "narrow",
                            "alphaLevel": int(self.alpha_level[i, k]) if kind == BROAD else "",
                            "columnOk": int(self.column_ok[i, k]) if kind == BROAD else "",
                            "arc": int(self.arc[i, k]) if kind == NARROW else "",
                            "certified": int(self.certified[i, k]) if kind == NARROW else ""})
        return out


def coarse_pieces(f: BandlimitedField, R1: float, shape: tuple[int, int]) -> tuple[list[CapSpec], np.ndarray]:
    """Coarse caps at scale ``R1`` and the samples of every ``f_tau`` (one row per cap)."""
    curve = f.caps[0].curve if f.caps else CurveSpec.parabola()
    coarse = build_caps(curve, R1)
    owner = cap_of(coarse, f.xi[:, 0]) if len(f) else np.zeros(0, dtype=int)
    pieces = np.zeros((len(coarse),) + tuple(shape), dtype=complex)
    for t in np.unique(owner):
        pieces[t] = f.select(owner == t).on_grid(shape)
    return coarse, pieces


def classify_broad_narrow(f: BandlimitedField, R1: float, shape: tuple[int, int] | None = None,
                          broad_exponent: float = PAPER_BROAD_EXPONENT,
                          column_exponent: float = PAPER_COLUMN_EXPONENT,
                          floor_rel: float = ACTIVE_FLOOR) -> BroadNarrowLabel:
    """Label grid cells broad or narrow relative to the coarse caps at scale ``R1``.

    A cell is broad when ``|f| <= (log R)^b max |f_tau f_tau'|^{1/2}`` over
    nonadjacent coarse pairs; otherwise the three-cap arc around the largest
    ``|f_tau|`` certifies it as narrow.
    """
    if R1 < 1 or R1 > f.R:
        raise InvalidArgument("coarse scale must satisfy 1 <= R1 <= R")
    shape = tuple(shape or (min(int(f.R), 1024),) * 2)
    log_R = math.log(f.R)
    coarse, pieces = coarse_pieces(f, R1, shape)
    F = pieces.sum(axis=0)
    absF = np.abs(F)
    mags = np.abs(pieces)
    n = len(coarse)
    top = float(absF.max()) if absF.size else 0.0
    floor = floor_rel * top
    active = absF > floor

    bil = np.zeros(shape)
    for i in range(n):
        for j in range(i + 2, n):
            np.maximum(bil, mags[i] * mags[j], out=bil)
    bil = np.sqrt(bil)
    broad = active & (absF <= log_R ** broad_exponent * bil)
    with np.errstate(divide="ignore"):
        level = np.where(bil > 0, np.round(np.log2(np.where(bil > 0, bil, 1.0))), 0).astype(np.int64)
    alpha = np.exp2(level.astype(float))
    column = np.sum(mags ** 6, axis=0) ** (1 / 6)
    column_ok = column <= log_R ** column_exponent * alpha

    centre = np.argmax(mags, axis=0) if n else np.zeros(shape, dtype=np.int64)
    left = np.clip(centre - 1, 0, max(n - 3, 0))
    arc_sum = np.zeros(shape, dtype=complex)
    for off in range(min(3, n)):
        arc_sum += np.take_along_axis(pieces, (left + off)[None], axis=0)[0]
    certified = absF <= (1 + 1 / log_R) * np.abs(arc_sum) + floor

    kind = np.where(active, np.where(broad, BROAD, NARROW), INACTIVE).astype(np.int8)
    return BroadNarrowLabel(float(R1), shape, kind, level, column_ok & broad, left,
                            certified, floor, float(broad_exponent), float(column_exponent))


# ---------------------------------------------------------------------------
# Extremizer search


def centre_atoms(R: int, curve: CurveSpec | None = None) -> np.ndarray:
    """One lattice point per final-scale cap.

    Each cap contributes its lattice point closest to the curve, ties broken by
    distance to the cap centre.  Points on the curve itself give the most
    additive structure.
    """
    curve = curve or CurveSpec.parabola()
    rows = []
    for cap in build_caps(curve, R):
        pts = lattice_points_in_cap(cap, R)
        if len(pts) == 0:
            raise InvalidArgument(f"cap {cap.index} contains no lattice point at R={R}")
        off = np.abs(pts[:, 1] / R - curve.h(pts[:, 0] / R))
        off = np.round(off * R, 9)
        dist = np.abs(pts[:, 0] / R - cap.center)
        rows.append(pts[np.lexsort((dist, off))[0]])
    return np.array(rows, dtype=np.int64)


def flat_field(R: int, seed: int | None = None, curve: CurveSpec | None = None) -> BandlimitedField:
    """One unit atom per cap; random phases when ``seed`` is given."""
    idx = centre_atoms(R, curve)
    if seed is None:
        amps = np.ones(len(idx), dtype=complex)
    else:
        amps = np.exp(2j * np.pi * np.random.default_rng(seed).random(len(idx)))
    return field_from_indices(R, idx, amps, curve)


def _gradient(f: BandlimitedField, p: int, mode: str) -> np.ndarray:
    """``<|f|^{p-2} f, e_j>`` for every atom.

    Exact on the ``|f|^p`` grid; in fast mode the Nyquist grid of ``f`` is used
    and the projection is aliased (heuristic ascent direction only).
    """
    shape = minimal_exact_shape(f, p) if mode == "exact" else _fast_shape(f)
    base = f.indices.min(axis=0)
    shifted = BandlimitedField(f.R, f.indices - base, f.amplitudes, f.caps, f.cap_index)
    vals = shifted.on_grid(shape)
    g = np.abs(vals) ** (p - 2) * vals
    spec = sfft.fft2(g, norm="forward")
    j = f.indices - base
    return spec[j[:, 0] % shape[0], j[:, 1] % shape[1]]


@dataclass(frozen=True, eq=False)
class SearchResult:
    report: DecouplingReport
    coefficients: np.ndarray
    indices: np.ndarray
    history: tuple[float, ...]
    start_ratio: float

    def to_dict(self) -> dict:
        out = self.report.to_dict()
        out.update({"startRatio": self.start_ratio, "history": list(self.history),
                    "coefficients": [[float(c.real), float(c.imag)] for c in self.coefficients]})
        return out


def _ascent(R: int, p: int, iterations: int, start: np.ndarray, idx: np.ndarray,
            curve: CurveSpec | None = None) -> tuple[np.ndarray, list[float]]:
    """Normalized gradient steps ``c <- grad / |grad|``; returns the best iterate.

    With one atom per cap the denominator is ``R^{2/p} ||c||_2`` and
    ``||f||_p^p`` is convex in ``c``, so in exact mode every step is an ascent step.
    """
    mode = "exact" if R <= EXACT_MAX_R else "fast"
    c = start / np.linalg.norm(start)
    f = field_from_indices(R, idx, c, curve)
    history = [decoupling_ratio(f, p, mode).ratio]
    best, best_val = c, history[0]
    for _ in range(iterations):
        grad = _gradient(f, p, mode)
        size = np.linalg.norm(grad)
        if size == 0:
            break
        c = grad / size
        f = field_from_indices(R, idx, c, curve)
        history.append(decoupling_ratio(f, p, mode).ratio)
        if history[-1] > best_val:
            best, best_val = c, history[-1]
    return best, history


def _ascent_job(args) -> tuple[np.ndarray, list[float]]:
    return _ascent(*args)


def extremizer_search(R: int, p: int = 6, iterations: int = 20, seed: int = 0,
                      restarts: int = 1, start: str = "flat", curve: CurveSpec | None = None,
                      workers: int = 1, mode: str = "auto") -> SearchResult:
    """Best ratio found by ascent from a flat (or single-cap) start plus random restarts.

    Restart 0 starts from ``start``; restart ``i > 0`` from random phases drawn
    with seed ``(seed, i)``.  The best iterate of any restart is returned, so
    the result is never below the start ratio.  ``mode`` applies to the final
    certified evaluation.
    """
    p = _check_p(p)
    if R > 4096:
        raise InvalidArgument("extremizer search supports R <= 4096")
    idx = centre_atoms(R, curve)
    n = len(idx)
    if start == "flat":
        first = np.ones(n, dtype=complex)
    elif start == "single":
        first = np.zeros(n, dtype=complex)
        first[n // 2] = 1.0
    else:
        raise InvalidArgument(f"start must be flat or single, got {start!r}")
    starts = [first]
    for i in range(1, restarts):
        rng = np.random.default_rng([seed, i])
        starts.append(np.exp(2j * np.pi * rng.random(n)))
    jobs = [(R, p, iterations, s, idx) for s in starts]
    if curve is None:
        results = ordered_map(_ascent_job, jobs, workers)
    else:
        results = [_ascent(*job, curve) for job in jobs]
    best_c, best_hist, best_val = results[0][0], results[0][1], -1.0
    for c_fin, hist in results:
        if max(hist) > best_val:
            best_val, best_c, best_hist = max(hist), c_fin, hist
    f = field_from_indices(R, idx, best_c, curve)
    report = decoupling_ratio(f, p, mode, descriptor=f"extremizer start={start} restarts={restarts}",
                              seed=seed)
    return SearchResult(report, best_c, idx, tuple(best_hist), results[0][1][0])


# ---------------------------------------------------------------------------
# Pigeonholed normal form


@dataclass(frozen=True)
class Packet:
    cap: int
    tube: tuple[int, int]
    amplitude: float


@dataclass(frozen=True, eq=False)
class NormalForm:
    """Selected dyadic class: amplitude level ``C = 2^{-level}``, count class ``j``."""

    caps: tuple[int, ...]
    tubes: dict[int, tuple[tuple[int, int], ...]]
    level: int
    j: int
    top: float
    classes: int
    selected_norm: float
    total_norm: float
    dropped: int
    far: int
    c_pig: float

    @property
    def C(self) -> float:
        return 2.0 ** -self.level

    @property
    def empty(self) -> bool:
        return not self.caps

    def to_dict(self) -> dict:
        return {"caps": list(self.caps), "counts": {str(k): len(v) for k, v in self.tubes.items()},
                "level": self.level, "C": self.C, "j": self.j, "top": self.top,
                "classes": self.classes, "selectedNorm": self.selected_norm,
                "totalNorm": self.total_norm, "dropped": self.dropped, "far": self.far,
                "C_pig": self.c_pig}


def amplitude_level(amplitude: float, top: float) -> int:
    """``i`` with ``2^{-i-1} < amplitude / top <= 2^{-i}``."""
    return max(0, int(math.floor(-math.log2(amplitude / top))))


def count_class(n: int) -> int:
    """``j`` with ``2^{j-1} < n <= 2^j``."""
    return int(math.ceil(math.log2(n))) if n > 1 else 0


def pigeonhole_classes(packets: Sequence[Packet], log2_R: float) -> tuple[dict[tuple[int, int], list[Packet]], int, float]:
    """Group packets by (amplitude level, count class of their cap within that level).

    Packets at or below ``(1/2) R^{-1000} M`` are dropped (compared in log space).
    Returns the classes, the number dropped and ``M``.
    """
    if not packets:
        return {}, 0, 0.0
    top = max(p.amplitude for p in packets)
    cut = -1.0 - AMPLITUDE_EXPONENT * log2_R
    kept, dropped = [], 0
    for p in packets:
        if p.amplitude <= 0 or math.log2(p.amplitude / top) <= cut:
            dropped += 1
        else:
            kept.append(p)
    by_level: dict[int, dict[int, list[Packet]]] = {}
    for p in kept:
        by_level.setdefault(amplitude_level(p.amplitude, top), {}).setdefault(p.cap, []).append(p)
    classes: dict[tuple[int, int], list[Packet]] = {}
    for level, caps in by_level.items():
        for cap, members in caps.items():
            classes.setdefault((level, count_class(len(members))), []).extend(members)
    return classes, dropped, top


def select_class(classes: dict[tuple[int, int], list[Packet]],
                 norm: Callable[[list[Packet]], float]) -> tuple[tuple[int, int], float]:
    """Class of largest ``L^6`` norm; ties go to larger amplitude, then larger ``j``."""
    best_key, best_val = None, -1.0
    for key in sorted(classes, key=lambda t: (t[0], -t[1])):
        val = norm(classes[key])
        if val > best_val * (1 + 1e-12):
            best_key, best_val = key, val
    return best_key, best_val


def normal_form_from_packets(packets: Sequence[Packet], norm: Callable[[list[Packet]], float],
                             total_norm: float, log_R: float, far: int = 0) -> NormalForm:
    classes, dropped, top = pigeonhole_classes(packets, log_R / math.log(2))
    if not classes:
        return NormalForm((), {}, 0, 0, 0.0, 0, 0.0, total_norm, dropped, far, math.nan)
    key, val = select_class(classes, norm)
    members = classes[key]
    tubes: dict[int, list] = {}
    for p in members:
        tubes.setdefault(p.cap, []).append(p.tube)
    c_pig = total_norm / (log_R ** 2 * val) if val > 0 else math.inf
    nf = NormalForm(tuple(sorted(tubes)), {k: tuple(v) for k, v in sorted(tubes.items())},
                    key[0], key[1], top, len(classes), val, total_norm, dropped, far, c_pig)
    check_normal_form(nf, members)
    return nf


def check_normal_form(nf: NormalForm, members: Sequence[Packet]) -> None:
    counts = [len(v) for v in nf.tubes.values()]
    if counts and max(counts) > 2 * min(counts):
        raise InvariantViolation("tube counts differ by more than a factor 2", {"counts": counts})
    lo, hi = nf.C * nf.top / 2, 2 * nf.C * nf.top
    bad = [p.amplitude for p in members if not lo <= p.amplitude <= hi]
    if bad:
        raise InvariantViolation("kept amplitude outside [C M / 2, 2 C M]", {"amplitudes": bad[:5]})


def pigeonhole_normal_form(f: BandlimitedField, width: float = 8.0,
                           shape: tuple[int, int] | None = None) -> NormalForm:
    """Wave packets of every ``f_theta`` at the final scale, pigeonholed by amplitude and count.

    On the torus every tube meets ``Q_R``, so the far part is empty.  Norms of
    classes are Riemann sums of ``|sum psi_T f_theta|^6`` on the adapted grid.
    """
    log_R = math.log(f.R)
    if len(f) == 0:
        return NormalForm((), {}, 0, 0, 0.0, 0, 0.0, 0.0, 0, 0, math.nan)
    thetas = [int(t) for t in np.unique(f.cap_index)]
    tilings = {t: tube_tiling(f.caps[t], f.R, width) for t in thetas}
    shape = shape or adapted_shape(f.R, list(tilings.values()), minimum=(64, 64))
    cell = (f.R / shape[0]) * (f.R / shape[1])
    decomps = {t: decompose(f.cap_field(t), tilings[t], shape) for t in thetas}
    packets = [Packet(t, tube, float(a)) for t, d in decomps.items()
               for tube, a in zip(d.tubes, d.amplitudes)]

    def norm(members: list[Packet]) -> float:
        total = np.zeros(shape, dtype=complex)
        by_cap: dict[int, list] = {}
        for p in members:
            by_cap.setdefault(p.cap, []).append(p.tube)
        for t, tubes in by_cap.items():
            til = tilings[t]
            K = np.zeros((til.n1, til.n2))
            for t1, t2 in tubes:
                K[t1, t2] = 1.0
            total += til.mask_coefficients(K).on_grid(shape) * decomps[t].samples
        return float((np.sum(np.abs(total) ** 6) * cell) ** (1 / 6))

    whole = float((np.sum(np.abs(f.on_grid(shape)) ** 6) * cell) ** (1 / 6))
    return normal_form_from_packets(packets, norm, whole, log_R)
