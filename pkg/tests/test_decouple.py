import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from decoupling_lab.caps import CurveSpec, build_caps
from decoupling_lab.decouple import (
    BROAD, INACTIVE, NARROW, Packet, amplitude_level, centre_atoms, check_normal_form,
    classify_broad_narrow, count_class, decoupling_ratio, extremizer_search, flat_field,
    normal_form_from_packets, pigeonhole_classes, pigeonhole_normal_form, rescale_field,
)
from decoupling_lab.errors import InvalidArgument, InvariantViolation
from decoupling_lab.field import field_from_indices, random_field

PARABOLA = CurveSpec.parabola()


# --- decoupling ratio -------------------------------------------------------------

@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([4, 6]), st.sampled_from([16, 64, 256]))
def test_single_cap_ratio_is_one(seed, p, R):
    rng = np.random.default_rng(seed)
    n = len(build_caps(PARABOLA, R))
    f = random_field(R, rng, caps_used=[int(rng.integers(n))], atoms_per_cap=int(rng.integers(1, 6)))
    rep = decoupling_ratio(f, p)
    assert abs(rep.ratio - 1) <= 1e-9


def test_two_equal_waves_closed_form():
    # |e(u) + e(v)|^6 averages to E(2 + 2 cos)^3 = 8 (1 + 3/2) = 20 over a period
    R = 256
    idx = centre_atoms(R)[[3, 25]]
    f = field_from_indices(R, idx, [1.0, 1.0])
    for mode in ("exact", "fast"):
        rep = decoupling_ratio(f, 6, mode)
        assert math.isclose(rep.ratio, 20 ** (1 / 6) / math.sqrt(2), rel_tol=1e-9)
        assert 2 ** -0.5 <= rep.ratio <= 2 ** 0.5


def test_flat_field_ratio_at_least_one():
    rep = decoupling_ratio(flat_field(256, seed=0), 6)
    print(f"flat random-phase ratio at R=256: {rep.ratio:.5f}")
    assert rep.ratio >= 1
    assert rep.mode == "exact" and len(rep.per_cap_norms) == 32


def test_ratio_rejects_bad_arguments():
    f = flat_field(16)
    with pytest.raises(InvalidArgument):
        decoupling_ratio(f, 2)
    with pytest.raises(InvalidArgument):
        decoupling_ratio(f, 6, mode="turbo")


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_rescaling_invariance(seed):
    R = 256
    cap = build_caps(PARABOLA, 16)[seed + 2]
    children = [c.index for c in build_caps(PARABOLA, R) if cap.lo <= c.center < cap.hi]
    f = random_field(R, np.random.default_rng(seed), caps_used=children, atoms_per_cap=3)
    g = rescale_field(f, cap)
    assert g.R == 64
    a = decoupling_ratio(f, 6, labels=f.cap_index).ratio
    b = decoupling_ratio(g, 6, labels=g.cap_index).ratio
    assert math.isclose(a, b, rel_tol=1e-6)


def test_rescale_field_rejects_outside_atoms():
    R = 256
    cap = build_caps(PARABOLA, 16)[2]
    f = random_field(R, np.random.default_rng(0), caps_used=[0])
    with pytest.raises(InvalidArgument):
        rescale_field(f, cap)


# --- broad / narrow ---------------------------------------------------------------

def test_one_coarse_cap_is_all_narrow():
    R = 256
    coarse = build_caps(PARABOLA, 16)[3]
    children = [c.index for c in build_caps(PARABOLA, R) if coarse.lo <= c.center < coarse.hi]
    f = random_field(R, np.random.default_rng(1), caps_used=children, atoms_per_cap=3)
    lab = classify_broad_narrow(f, 16, shape=(128, 128), broad_exponent=1.0)
    active = lab.kind != INACTIVE
    assert np.all(lab.kind[active] == NARROW)
    assert lab.uncertified == 0


def test_two_nonadjacent_waves_broad_at_constructive_cells():
    R = 256
    centre = centre_atoms(R)
    idx = centre[[1, 30]]
    f = field_from_indices(R, idx, [1.0, 1.0])
    shape = (256, 256)
    lab = classify_broad_narrow(f, 16, shape=shape, broad_exponent=1.0)
    absF = np.abs(f.on_grid(shape))
    # bilinear max is |1 * 1|^{1/2} = 1 and |f| <= 2 <= log R, so every active cell is broad
    near_peak = absF >= 1.9
    assert near_peak.any()
    assert np.all(lab.kind[near_peak] == BROAD)
    assert np.all(lab.alpha_level[near_peak] == 0)
    # with exponent zero the broad set is exactly |f| <= 1
    lab0 = classify_broad_narrow(f, 16, shape=shape, broad_exponent=0.0)
    active = lab0.kind != INACTIVE
    assert np.array_equal(lab0.kind[active] == BROAD, absF[active] <= 1 + 1e-12)


@given(st.integers(0, 2 ** 32 - 1), st.floats(0, 2))
def test_labels_are_exhaustive(seed, b):
    R = 64
    f = random_field(R, np.random.default_rng(seed), atoms_per_cap=2)
    lab = classify_broad_narrow(f, 4, shape=(64, 64), broad_exponent=b)
    absF = np.abs(f.on_grid((64, 64)))
    active = absF > 1e-6 * absF.max()
    assert np.array_equal(lab.kind != INACTIVE, active)
    assert set(np.unique(lab.kind[active])) <= {BROAD, NARROW}
    assert sum(lab.counts().values()) == 64 * 64


def test_narrow_certificate_on_adjacent_caps():
    R = 256
    f = random_field(R, np.random.default_rng(0), caps_used=range(12, 20), atoms_per_cap=3)
    lab = classify_broad_narrow(f, 16, shape=(128, 128), broad_exponent=0.0)
    assert lab.counts()["narrow"] == 128 * 128
    assert lab.uncertified == 0


def test_classify_rejects_bad_scale():
    f = flat_field(64)
    with pytest.raises(InvalidArgument):
        classify_broad_narrow(f, 128)


# --- extremizer search ------------------------------------------------------------

def test_single_start_stays_at_one():
    res = extremizer_search(64, 6, iterations=1, start="single")
    assert abs(res.report.ratio - 1) <= 1e-9
    assert abs(res.start_ratio - 1) <= 1e-9


def test_flat_start_best_ratio_grows_with_R():
    best = []
    for R in (64, 128, 256):
        res = extremizer_search(R, 6, iterations=20)
        assert res.report.ratio >= res.start_ratio - 1e-12
        assert res.report.ratio >= decoupling_ratio(flat_field(R), 6).ratio - 1e-12
        best.append(res.report.ratio)
    print("best ratios", best)
    assert best[0] <= best[1] <= best[2]


def test_search_is_deterministic_across_workers():
    a = extremizer_search(64, 6, iterations=3, restarts=3, seed=5, workers=1)
    b = extremizer_search(64, 6, iterations=3, restarts=3, seed=5, workers=2)
    assert a.report.ratio == b.report.ratio
    assert np.array_equal(a.coefficients, b.coefficients)


def test_search_rejects_bad_arguments():
    with pytest.raises(InvalidArgument):
        extremizer_search(8192)
    with pytest.raises(InvalidArgument):
        extremizer_search(64, start="random")
    with pytest.raises(InvalidArgument):
        extremizer_search(64, p=5)


# --- normal form --------------------------------------------------------------------

def test_levels_and_count_classes():
    assert amplitude_level(1.0, 1.0) == 0
    assert amplitude_level(0.5, 1.0) == 1
    assert amplitude_level(0.3, 1.0) == 1
    assert [count_class(n) for n in (1, 2, 3, 4, 5, 8, 9)] == [0, 1, 2, 2, 3, 3, 4]


def _l6_norm_of(members):
    return sum(p.amplitude ** 6 for p in members) ** (1 / 6)


def test_equal_packets_form_one_class():
    packets = [Packet(c, (t, 0), 1.0) for c in range(3) for t in range(4)]
    nf = normal_form_from_packets(packets, _l6_norm_of, _l6_norm_of(packets), math.log(256))
    assert nf.classes == 1 and nf.C == 1.0 and nf.j == 2
    assert nf.caps == (0, 1, 2)
    assert all(len(v) == 4 for v in nf.tubes.values())


def test_two_classes_with_equal_contribution():
    # one packet at amplitude 1 and four at 2^{-20}; the norm callback forces
    # both classes to the same L^6 value, so the tie goes to the larger amplitude
    packets = [Packet(0, (0, 0), 1.0)] + [Packet(1, (t, 0), 2.0 ** -20) for t in range(4)]

    def norm(members):
        return 1.0 if members else 0.0

    total = 2 ** (1 / 6)
    log_R = math.log(256)
    nf = normal_form_from_packets(packets, norm, total, log_R)
    assert nf.classes == 2
    assert nf.level == 0 and nf.caps == (0,)
    assert nf.selected_norm >= total / (log_R ** 2 * nf.classes)
    assert math.isfinite(nf.c_pig)


def test_dyadic_amplitude_span():
    # R = 2 makes R^{-1000} = 2^{-1000} representable in double precision
    log2_R = 1.0
    packets = []
    for i in range(0, 1001):
        cap = i % 7
        for t in range(1 + i % 5):
            packets.append(Packet(cap, (i, t), 2.0 ** -i))
    packets.append(Packet(0, (5000, 0), 2.0 ** -1001.5))
    classes, dropped, top = pigeonhole_classes(packets, log2_R)
    assert dropped == 1 and top == 1.0
    assert len(classes) <= (1000 * log2_R) * (22 * log2_R)
    nf = normal_form_from_packets(packets, _l6_norm_of, _l6_norm_of(packets), math.log(2))
    members = [p for p in packets if p.cap in nf.tubes and p.tube in nf.tubes[p.cap]]
    check_normal_form(nf, members)
    counts = [len(v) for v in nf.tubes.values()]
    assert max(counts) <= 2 * min(counts)


def test_normal_form_check_detects_bad_counts():
    packets = [Packet(0, (0, 0), 1.0)] + [Packet(1, (t, 0), 1.0) for t in range(3)]
    nf = normal_form_from_packets(packets[:1], _l6_norm_of, 1.0, math.log(256))
    from dataclasses import replace
    bad = replace(nf, tubes={0: ((0, 0),), 1: ((0, 0), (1, 0), (2, 0))})
    with pytest.raises(InvariantViolation):
        check_normal_form(bad, packets)


def test_pigeonhole_on_zero_field():
    f = field_from_indices(64, np.zeros((0, 2)), [])
    assert pigeonhole_normal_form(f).empty


@pytest.mark.parametrize("seed", [0, 1])
def test_pigeonhole_on_random_field(seed):
    R = 64
    f = random_field(R, np.random.default_rng(seed), atoms_per_cap=3)
    nf = pigeonhole_normal_form(f)
    assert not nf.empty and nf.far == 0
    assert 0 < nf.selected_norm <= nf.total_norm * (1 + 1e-9)
    print(f"C_pig = {nf.c_pig:.4f} over {nf.classes} classes")
    assert math.isfinite(nf.c_pig)
