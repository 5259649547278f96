import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from emgtrack import InvalidInputError
from emgtrack.occlusion import (
    BLOCKERS, HandGeometry, HandSkeleton, RootPose, bone_occluded, forward_kinematics,
    matrix_to_quat, occlusion_flags, occlusion_fraction, quat_to_matrix, ray_box_intersect,
    ray_capsule_intersect, ray_capsule_t,
)

SK = HandSkeleton()


# -- kinematics -----------------------------------------------------------------

def test_straight_chain():
    bones = forward_kinematics(SK, np.zeros(8))
    tips = bones.end[0, :, 2]
    knuckles = SK.knuckles()
    lengths = SK.bone_lengths().sum(axis=1)
    np.testing.assert_allclose(np.linalg.norm(tips - knuckles, axis=1), lengths, rtol=1e-12)
    np.testing.assert_allclose(tips[:, 2], 0.0, atol=1e-12)
    np.testing.assert_allclose(tips[:, 1], knuckles[:, 1], atol=1e-12)


def test_mcp_ninety_points_proximal_palmward():
    angles = np.zeros(8)
    angles[0::2] = 90.0
    bones = forward_kinematics(SK, angles)
    prox = bones.end[0, :, 0] - bones.start[0, :, 0]
    unit = prox / np.linalg.norm(prox, axis=1, keepdims=True)
    np.testing.assert_allclose(unit, np.tile([0.0, 0.0, -1.0], (4, 1)), atol=1e-12)


def test_mcp_pip_ninety_hand_trigonometry():
    bones = forward_kinematics(SK, np.full(8, 90.0))
    for f in range(4):
        l1, l2, l3 = SK.proximal[f], SK.intermediate[f], SK.distal[f]
        distal_angle = math.radians(90 + 90 + 0.6 * 90)
        expected = np.array([
            SK.palm_length + 0.0 - l2 + l3 * math.cos(distal_angle),
            SK.knuckle_y[f],
            -l1 - 0.0 - l3 * math.sin(distal_angle),
        ])
        np.testing.assert_allclose(bones.end[0, f, 2], expected, atol=1e-9)
        np.testing.assert_allclose(bones.end[0, f, 1], [SK.palm_length - l2, SK.knuckle_y[f], -l1], atol=1e-9)


def test_tracked_midpoints_order():
    angles = np.zeros(8)
    bones = forward_kinematics(SK, angles)
    mids = bones.tracked_midpoints()[0]
    assert mids.shape == (8, 3)
    np.testing.assert_allclose(mids[0], [SK.palm_length + SK.proximal[0] / 2, 3.0, 0.0])
    np.testing.assert_allclose(mids[7], [SK.palm_length + SK.proximal[3] + SK.intermediate[3] / 2, -3.0, 0.0])


def test_skeleton_rejects_non_positive():
    with pytest.raises(InvalidInputError):
        HandSkeleton(palm_width=0.0)


@given(arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1))
def test_quaternion_round_trip(q):
    m = quat_to_matrix(q)
    np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(m) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(quat_to_matrix(matrix_to_quat(m)), m, atol=1e-12)


# -- ray primitives --------------------------------------------------------------------

def test_ray_box_axis_aligned():
    t = ray_box_intersect([0, 0, 0], [0, 0, 1], (np.array([0, 0, 5.0]), np.full(3, 0.5)))
    assert t == pytest.approx(4.5, abs=1e-12)
    assert ray_box_intersect([0, 0, 0], [0, 0, -1], (np.array([0, 0, 5.0]), np.full(3, 0.5))) is None
    # origin inside
    assert ray_box_intersect([0, 0, 5], [1, 0, 0], (np.array([0, 0, 5.0]), np.full(3, 0.5))) == 0.0


def test_ray_box_rotated():
    rot = quat_to_matrix([math.cos(math.pi / 8), 0, 0, math.sin(math.pi / 8)])  # 45 deg about z
    t = ray_box_intersect([-10, 0, 0], [1, 0, 0], (np.zeros(3), np.array([1.0, 1.0, 1.0]), rot))
    assert t == pytest.approx(10 - math.sqrt(2), abs=1e-12)


def test_ray_capsule_parallel_clearance():
    cap = (np.array([0.0, 0, 0]), np.array([5.0, 0, 0]), 0.8)
    assert ray_capsule_intersect([-3, 1.6, 0], [1, 0, 0], cap) is None
    assert ray_capsule_intersect([-3, 0.5, 0], [1, 0, 0], cap) == pytest.approx(3 - math.sqrt(0.64 - 0.25))


def test_ray_capsule_side_hit():
    cap = (np.array([0.0, 0, 0]), np.array([5.0, 0, 0]), 0.8)
    assert ray_capsule_intersect([2, 0, 10], [0, 0, -1], cap) == pytest.approx(9.2, abs=1e-12)
    assert ray_capsule_intersect([2, 0, 10], [0, 0, 1], cap) is None


def test_zero_direction_rejected():
    with pytest.raises(InvalidInputError):
        ray_box_intersect([0, 0, 0], [0, 0, 0], (np.zeros(3), np.ones(3)))
    with pytest.raises(InvalidInputError):
        ray_capsule_intersect([0, 0, 0], [0, 0, 0], (np.zeros(3), np.ones(3), 1.0))


def _sphere_union_hits(origins, dirs, a, b, r, samples=400):
    """Ray vs the union of dense spheres along the capsule axis."""
    centers = a + np.linspace(0, 1, samples)[:, None] * (b - a)
    rel = centers[None] - origins[:, None]                    # R x S x 3
    t = np.maximum((rel * dirs[:, None]).sum(-1), 0.0)
    closest = origins[:, None] + t[..., None] * dirs[:, None]
    return (np.linalg.norm(closest - centers[None], axis=-1) <= r).any(axis=1)


def test_ray_capsule_vs_sphere_sampling_oracle():
    rng = np.random.default_rng(2024)
    n = 10_000
    a, b, r = np.array([0.0, 0, 0]), np.array([4.0, 1.0, -0.5]), 0.8
    origins = rng.uniform(-6, 10, size=(n, 3))
    targets = rng.uniform(-2, 6, size=(n, 3))
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    hit = np.isfinite(ray_capsule_t(origins, dirs, a, b, r))
    oracle = _sphere_union_hits(origins, dirs, a, b, r)
    agreement = (hit == oracle).mean()
    assert agreement > 0.999
    assert 0.1 < hit.mean() < 0.9  # the scene is not trivially all-hit or all-miss


def test_ray_capsule_distance_vs_marching():
    rng = np.random.default_rng(7)
    a, b, r = np.array([0.0, 0, 0]), np.array([3.0, 0, 0]), 0.8
    for _ in range(200):
        o = rng.uniform(-5, 8, size=3)
        o[2] = 3.0
        d = rng.uniform([-1, -1, -1], [4, 1, 1]) - o
        d /= np.linalg.norm(d)
        t = ray_capsule_intersect(o, d, (a, b, r))
        if t is None:
            continue
        p = o + t * d
        s = np.clip(np.dot(p - a, b - a) / np.dot(b - a, b - a), 0, 1)
        assert np.linalg.norm(p - (a + s * (b - a))) == pytest.approx(r, abs=1e-9)


# -- occlusion --------------------------------------------------------------------------

def _inside_any(points, geom, frame, bone):
    """Dense point-membership oracle: box plus allowed capsules."""
    rot, c, half = geom.box_rotation, geom.box_center, geom.box_half
    local = (points - c) @ rot
    inside = np.all(np.abs(local) <= half, axis=-1)
    start = geom.bones.start[frame].reshape(12, 3)
    end = geom.bones.end[frame].reshape(12, 3)
    for k in np.flatnonzero(BLOCKERS[bone]):
        a, b = start[k], end[k]
        s = np.clip((points - a) @ (b - a) / np.dot(b - a, b - a), 0, 1)
        inside |= np.linalg.norm(points - (a + s[:, None] * (b - a)), axis=-1) <= geom.radius
    return inside


def _oracle_flags(cam, geom, frame=0, samples=4000):
    mids = geom.bones.tracked_midpoints()[frame]
    out = np.zeros(8, dtype=bool)
    for bone in range(8):
        ts = np.linspace(0, 1, samples, endpoint=False)[1:]
        pts = cam + ts[:, None] * (mids[bone] - cam)
        out[bone] = _inside_any(pts, geom, frame, bone).any()
    return out


def test_palmar_camera_sees_extended_fingers():
    geom = HandGeometry.build(SK, np.zeros(8))
    cam = np.array([SK.palm_length + 3.0, 0.0, -50.0])
    assert not occlusion_flags(cam, geom).any()
    assert not any(bone_occluded(cam, b, geom) for b in range(8))


def test_camera_behind_back_of_hand_in_palm_plane():
    geom = HandGeometry.build(SK, np.zeros(8))
    cam = np.array([-50.0, 0.0, 0.0])
    assert occlusion_flags(cam, geom).all()


def test_fist_at_45_degrees_matches_dense_oracle():
    fist = np.tile([90.0, 100.0], 4)
    geom = HandGeometry.build(SK, fist)
    for az in (0.0, 90.0, 180.0, 270.0):
        e = math.radians(45)
        cam = SK.palm_center + 50 * np.array([math.cos(e) * math.cos(math.radians(az)),
                                              math.cos(e) * math.sin(math.radians(az)), math.sin(e)])
        flags = occlusion_flags(cam, geom)[0]
        np.testing.assert_array_equal(flags, _oracle_flags(cam, geom))


def test_random_poses_match_dense_oracle():
    rng = np.random.default_rng(31)
    agree = total = 0
    for _ in range(30):
        angles = rng.uniform(0, 100, size=8)
        geom = HandGeometry.build(SK, angles)
        cam = SK.palm_center + rng.normal(size=3) * 30
        agree += (occlusion_flags(cam, geom)[0] == _oracle_flags(cam, geom, samples=3000)).sum()
        total += 8
    assert agree / total > 0.99


def test_flags_invariant_under_rigid_transform():
    rng = np.random.default_rng(5)
    angles = rng.uniform(0, 100, size=(40, 8))
    cam = np.array([-20.0, 10.0, 35.0])
    base = occlusion_flags(cam, HandGeometry.build(SK, angles))
    for _ in range(5):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        root = RootPose(rng.uniform(-30, 30, size=3), q)
        moved = occlusion_flags(root.apply(cam), HandGeometry.build(SK, angles, root))
        assert (moved == base).mean() > 0.99


def test_own_and_neighbour_capsules_never_block():
    # mask: the index MCP bone ignores index proximal and intermediate, not index distal
    assert not BLOCKERS[0, 0] and not BLOCKERS[0, 1] and BLOCKERS[0, 2]
    assert not BLOCKERS[1, 0] and not BLOCKERS[1, 1] and not BLOCKERS[1, 2]
    assert BLOCKERS[0, 3:].all()


# -- fractions ----------------------------------------------------------------------------

def test_fraction_extremes():
    assert occlusion_fraction(np.zeros((10, 8), bool))["overall"] == 0.0
    full = occlusion_fraction(np.ones((10, 8), bool))
    assert all(v == 100.0 for v in full.values())
    assert set(full) == {"index", "middle", "ring", "pinky", "overall"}


def test_fraction_per_finger_pools_two_bones():
    flags = np.zeros((4, 8), bool)
    flags[:, 0] = True
    flags[:2, 1] = True
    frac = occlusion_fraction(flags)
    assert frac["index"] == 75.0 and frac["middle"] == 0.0
    assert frac["overall"] == pytest.approx(100 * 6 / 32)


@given(arrays(bool, st.tuples(st.integers(1, 30), st.just(8))), st.integers(0, 2 ** 31))
def test_fraction_bounded_and_monotone(flags, seed):
    extra = np.random.default_rng(seed).random(flags.shape) < 0.3
    a = occlusion_fraction(flags)
    b = occlusion_fraction(flags | extra)
    for k in a:
        assert 0.0 <= a[k] <= 100.0
        assert b[k] >= a[k]


def test_fraction_shape_check():
    with pytest.raises(InvalidInputError):
        occlusion_fraction(np.zeros((3, 7), bool))
