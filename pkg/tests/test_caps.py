import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from decoupling_lab.caps import (
    AffineMap, CapSpec, CurveSpec, ScaleLadder, build_caps, cap_of, cluster_tree, dual_body,
    image_curve, random_well_spaced, rescale_map, spacing_check, standard_tree,
    well_spaced_subsample,
)
from decoupling_lab.errors import InvalidArgument
from decoupling_lab.field import field_from_indices, lp_norm, random_field

PARABOLA = CurveSpec.parabola()


def quartic_curve():
    # h'' = 1 + x^2 / 2 stays in [1, 3/2] on [-1, 1]
    return CurveSpec.explicit(lambda x: x ** 2 / 2 + x ** 4 / 24,
                              lambda x: x + x ** 3 / 6,
                              lambda x: 1 + x ** 2 / 2)


def centred_cap(R, curve=PARABOLA):
    w = R ** -0.5
    return CapSpec(float(R), 0, 0.0, -w / 2, w / 2, curve)


# --- curves and ladders ------------------------------------------------------

def test_curve_validation_rejects_bad_curvature():
    with pytest.raises(InvalidArgument):
        CurveSpec.explicit(lambda x: 3 * x ** 2, lambda x: 6 * x, lambda x: 6 + 0 * x)
    with pytest.raises(InvalidArgument):
        CurveSpec.explicit(lambda x: x ** 2 + 0.1, lambda x: 2 * x, lambda x: 2 + 0 * x)


def test_ladder_structure():
    lad = ScaleLadder(4096, 16)
    assert lad.N == 3
    assert lad.scales == (16.0, 256.0, 4096.0)
    assert all(b / a == 16 for a, b in zip(lad.scales, lad.scales[1:]))
    assert lad.scale(lad.N + 2) == 16.0 ** 5
    assert lad.stride == 4
    with pytest.raises(InvalidArgument):
        ScaleLadder(4096, 2)
    with pytest.raises(InvalidArgument):
        ScaleLadder(1024, 16)
    with pytest.raises(InvalidArgument):
        ScaleLadder(1000, 10)


# --- build_caps ---------------------------------------------------------------

@pytest.mark.parametrize("scale,count,width", [(1, 2, 1.0), (4, 4, 0.5), (100, 20, 0.1)])
def test_build_caps_examples(scale, count, width):
    caps = build_caps(PARABOLA, scale)
    assert len(caps) == count
    assert all(math.isclose(c.hi - c.lo, width, rel_tol=1e-12) for c in caps)
    assert caps[0].lo == -1.0 and caps[-1].hi == 1.0
    assert [c.index for c in caps] == list(range(count))


def test_build_caps_rejects_small_scale():
    with pytest.raises(InvalidArgument):
        build_caps(PARABOLA, 0.5)


@given(st.floats(min_value=1.0, max_value=1e6))
def test_cap_count_and_contiguity(scale):
    caps = build_caps(PARABOLA, scale)
    assert len(caps) == math.ceil(2 * math.sqrt(scale) - 1e-9)
    for a, b in zip(caps, caps[1:]):
        assert a.hi == b.lo
        assert a.center < b.center


@given(st.sampled_from([16, 64, 256, 4096]), st.floats(-1, 1), st.floats(-0.75, 0.75))
def test_tiling_covers_and_interiors_are_disjoint(R, x1, frac):
    # Covering holds for |t| <= (3/4) R^{-1}: the tangent block sags by up to R^{-1}/4.
    caps = build_caps(PARABOLA, R)
    limit = 1 - R ** -0.5
    x1 = x1 * limit
    pt = np.array([x1, x1 ** 2 + frac / R])
    hits = sum(bool(c.contains(pt)) for c in caps)
    interior = sum(bool(c.lo < x1 < c.hi and abs(c.normal_offset(pt)) < c.thickness) for c in caps)
    assert hits >= 1
    assert interior <= 1
    assert cap_of(caps, np.array([x1]))[0] in [c.index for c in caps if c.contains(pt)]


def test_tangent_sag_leaves_gap_at_full_thickness():
    # documents the covering conflict recorded in the ledger
    R = 64
    caps = build_caps(PARABOLA, R)
    x1 = caps[3].lo + 1e-9
    pt = np.array([x1, x1 ** 2 + 0.99 / R])
    assert not any(bool(c.contains(pt)) for c in caps)


@pytest.mark.parametrize("ratio,R", [(4, 1024), (16, 4096)])
def test_nesting_of_scales(ratio, R):
    lad = ScaleLadder(R, ratio)
    for k in range(1, lad.N):
        parents = build_caps(PARABOLA, lad.scale(k))
        for child in build_caps(PARABOLA, lad.scale(k + 1)):
            owners = [p for p in parents if p.lo <= child.center < p.hi]
            assert len(owners) == 1
            assert owners[0].contains(child.base_point)
            assert owners[0].lo <= child.lo and child.hi <= owners[0].hi


# --- dual bodies --------------------------------------------------------------

def _block_samples(cap, n=100):
    u = np.linspace(cap.lo, cap.hi, n)
    v = np.linspace(-cap.thickness, cap.thickness, n)
    U, V = np.meshgrid(u, v, indexing="ij")
    x2 = cap.height + cap.slope * (U - cap.center) + V
    return np.stack([U.ravel(), x2.ravel()], axis=-1)


@pytest.mark.parametrize("R", [16, 256, 4096])
def test_dual_body_at_origin(R):
    cap = centred_cap(R)
    body = dual_body(cap)
    expected = np.array([[2 * R ** 0.5, 0], [0, R], [-2 * R ** 0.5, 0], [0, -R]])
    assert np.allclose(body.rhombus_vertices, expected, rtol=1e-12)
    # brute force: the support function of the sampled block equals one at the vertices
    y = _block_samples(cap) - cap.base_point
    for v in expected:
        assert abs(np.max(np.abs(y @ v)) - 1) < 1e-9
    hn, ht = body.box_half_extents
    assert math.isclose(2 * hn, 2 * R, rel_tol=1e-12)
    assert math.isclose(2 * ht, 4 * R ** 0.5, rel_tol=1e-12)
    box = body.bounding_box
    assert np.allclose(np.ptp(box, axis=0), [4 * R ** 0.5, 2 * R])


def test_dual_body_tilted_cap_axis():
    cap = build_caps(PARABOLA, 64)[13]
    assert cap.center != 0
    body = dual_body(cap)
    n = np.array([-cap.slope, 1.0]) / math.hypot(1, cap.slope)
    box = body.bounding_box
    long_side = box[1] - box[0] if np.linalg.norm(box[1] - box[0]) > np.linalg.norm(box[2] - box[1]) \
        else box[2] - box[1]
    long_side = long_side / np.linalg.norm(long_side)
    assert abs(abs(long_side @ n) - 1) < 1e-12


@given(st.sampled_from([4, 64, 1024]), st.integers(0, 10 ** 6), st.floats(0, 2 * math.pi))
def test_dual_rhombus_boundary_has_unit_support(R, which, angle):
    caps = build_caps(PARABOLA, R)
    cap = caps[which % len(caps)]
    body = dual_body(cap)
    V = body.rhombus_vertices
    # a point on the boundary: walk along an edge of the rhombus
    t = (angle / (2 * math.pi)) * 4
    i = int(t) % 4
    s = t - int(t)
    x = (1 - s) * V[i] + s * V[(i + 1) % 4]
    corners = cap.corners() - cap.base_point
    support = np.max(np.abs(corners @ x))
    assert abs(support - 1) <= 1e-9
    assert abs(float(body.support(x)) - 1) <= 1e-9


# --- rescaling ------------------------------------------------------------------

def test_rescale_centred_cap_is_pure_dilation():
    Rk = 64.0
    m = rescale_map(centred_cap(Rk))
    assert np.allclose(m.linear, np.diag([Rk ** 0.5, Rk]))
    assert np.allclose(m.translation, 0)


@given(st.sampled_from([4, 16, 256]), st.integers(0, 10 ** 6))
def test_rescale_sends_base_point_to_origin_and_inverts(R, which):
    caps = build_caps(PARABOLA, R)
    cap = caps[which % len(caps)]
    m = rescale_map(cap)
    assert np.allclose(m(cap.base_point), 0, atol=1e-12)
    pts = np.random.default_rng(which).uniform(-1, 1, size=(50, 2))
    back = m.inverse()(m(pts))
    assert np.max(np.abs(back - pts)) <= 1e-12 * max(1, np.max(np.abs(pts)))
    ident = m.compose(m.inverse())
    assert np.allclose(ident.linear, np.eye(2), atol=1e-12)
    # the block lands in [-1/2, 1/2] x [-1, 1]
    img = m(cap.corners())
    assert np.all(np.abs(img[:, 0]) <= 0.5 + 1e-12)
    assert np.all(np.abs(img[:, 1]) <= 1 + 1e-12)


def test_affine_map_rejects_singular():
    with pytest.raises(InvalidArgument):
        AffineMap(np.zeros((2, 2)), np.zeros(2))


@pytest.mark.parametrize("curve", [PARABOLA, quartic_curve()], ids=["parabola", "quartic"])
def test_image_curve_stays_in_class(curve):
    for cap in build_caps(curve, 16):
        img = image_curve(cap)
        eta = np.linspace(-0.5, 0.5, 1000)
        hpp = img.h_double_prime(eta)
        assert hpp.min() >= 0.5 and hpp.max() <= 2
        assert abs(float(img.h(np.array([0.0]))[0])) < 1e-12
        assert abs(float(img.h_prime(np.array([0.0]))[0])) < 1e-12
        # chain rule check against finite differences of h itself
        nu = math.sqrt(cap.scale)
        d = 1e-3
        fd = (img.h(eta + d) - 2 * img.h(eta) + img.h(eta - d)) / d ** 2
        direct = curve.h_double_prime(cap.center + eta / nu)
        assert np.allclose(fd, direct, atol=1e-5)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_rescaling_consistency_with_children(k):
    R = 256
    lad = ScaleLadder(R, 4)
    parent = build_caps(PARABOLA, lad.scale(k))[1]
    children = [c for c in build_caps(PARABOLA, R) if parent.lo <= c.center < parent.hi]
    m = rescale_map(parent)
    image = [c for c in build_caps(PARABOLA, R / lad.scale(k)) if -0.5 <= c.center <= 0.5]
    assert len(image) == len(children)
    inv = m.inverse()
    for child, img in zip(children, image):
        pulled = inv(img.corners())
        scale = np.max(np.abs(child.corners()))
        assert np.max(np.abs(pulled - child.corners())) <= 1e-9 * scale


# --- spacing and subsampling ----------------------------------------------------

def test_full_tiling_is_not_well_spaced():
    lad = ScaleLadder(4096, 16)
    report = spacing_check(build_caps(PARABOLA, 4096), lad)
    assert report == {1: False, 2: False}


def test_single_cap_is_well_spaced():
    lad = ScaleLadder(4096, 16)
    report = spacing_check([build_caps(PARABOLA, 4096)[40]], lad)
    assert all(report.values())


@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([(1024, 4), (4096, 16), (256, 4)]))
def test_random_well_spaced_passes_spacing(seed, cfg):
    R, ratio = cfg
    lad = ScaleLadder(R, ratio)
    chosen = random_well_spaced(lad, np.random.default_rng(seed))
    caps = build_caps(PARABOLA, R)
    assert all(spacing_check([caps[i] for i in chosen], lad).values())
    tree = cluster_tree([caps[i] for i in chosen], lad)
    assert tree.well_spaced
    for k in range(1, lad.N):
        for j, cap in enumerate(tree.caps(k)):
            assert math.isclose(cap.hi - cap.lo, lad.scale(k) ** -0.5, rel_tol=1e-9)
            for c in tree.children(k, j):
                child = tree.caps(k + 1)[c]
                assert cap.lo - 1e-12 <= child.lo and child.hi <= cap.hi + 1e-12


def test_subsample_stride_one_is_identity():
    lad = ScaleLadder(4096, 16)
    res = well_spaced_subsample(np.ones(128), lambda S: 1.0, lad, stride=1)
    assert res.selected == tuple(range(128))
    assert res.loss_factor == 1.0


def test_subsample_rejects_fractional_stride():
    lad = ScaleLadder(4096, 16)
    with pytest.raises(InvalidArgument):
        well_spaced_subsample(np.ones(128), lambda S: 1.0, lad, stride=2.5)


def test_subsample_uniform_weights_drop_one_class_per_step():
    # N = 3, stride 4, 128 final caps.  Step one drops the singletons with i % 4 == 0,
    # leaving runs of three; step two drops every fourth run.
    lad = ScaleLadder(4096, 16)
    # a residue class is at most a quarter of the current set, so its mass ratio
    # 4^{-12} sits far below t^6 and the F branch is always taken
    res = well_spaced_subsample(np.ones(128), lambda S: float(len(S)) ** 12, lad)
    expected = tuple(i for i in range(128) if i % 4 != 0 and (i // 4) % 4 != 0)
    assert res.selected == expected
    assert len(res.selected) == 72
    assert [s.branch for s in res.steps] == ["F", "F"]
    assert [s.residue for s in res.steps] == [0, 0]
    caps = build_caps(PARABOLA, 4096)
    assert all(spacing_check([caps[i] for i in res.selected], lad).values())


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_subsample_ratio_inequality(seed):
    """Output ratio ||f_S||_6^6 / sum_S ||f_theta||_2^2 beats the guaranteed loss."""
    R = 256
    lad = ScaleLadder(R, 4)
    f = random_field(R, np.random.default_rng(seed), atoms_per_cap=3)
    n = len(build_caps(PARABOLA, R))
    weights = np.zeros(n)
    for t in range(n):
        sel = f.cap_index == t
        weights[t] = float(np.sum(np.abs(f.amplitudes[sel]) ** 2)) * R ** 2

    def l6mass(S):
        g = f.select(np.isin(f.cap_index, S))
        return lp_norm(g, 6) ** 6 if len(g) else 0.0

    res = well_spaced_subsample(weights, l6mass, lad)
    q_in = l6mass(np.arange(n)) / weights.sum()
    sel = np.array(res.selected)
    q_out = l6mass(sel) / weights[sel].sum()
    assert q_out >= res.loss_factor * q_in
    if res.all_f_branches:
        assert q_out >= res.paper_factor * q_in
    caps = build_caps(PARABOLA, R)
    assert all(spacing_check([caps[i] for i in res.selected], lad).values())


def test_standard_tree_parents_match_cap_of():
    lad = ScaleLadder(1024, 4)
    tree = standard_tree(PARABOLA, lad)
    for k in range(2, lad.N + 1):
        for j, cap in enumerate(tree.caps(k)):
            parent = tree.caps(k - 1)[tree.parents[k - 1][j]]
            assert parent.lo <= cap.center < parent.hi or (parent.hi == 1.0 and cap.center <= 1.0)


def test_caps_serialize():
    cap = build_caps(PARABOLA, 16)[2]
    d = cap.to_dict()
    assert d["scale"] == 16.0 and len(d["corners"]) == 4
    assert "rhombus" in dual_body(cap).to_dict()
    assert ScaleLadder(4096, 16).to_dict()["N"] == 3
