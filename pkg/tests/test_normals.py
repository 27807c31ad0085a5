import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occdepth.errors import InvalidArgumentError
from occdepth.geometry import DepthMap, Pose, camera_rays
from occdepth.losses import angular_errors
from occdepth.normals import NormalMap, PlaneMaskSet, build_cnm, normals_from_depth
from occdepth.synth import Scene, Sphere, render


def slanted_plane_depth(K, z0=2.0, slope=0.2):
    """Depth of the plane Z = z0 + slope * X seen from the origin."""
    xs, _ = K.pixel_grid()
    return DepthMap(z0 / (1.0 - slope * (xs - K.cx) / K.fx))


def interior(mask, m=3):
    out = mask.copy()
    out[:m] = out[-m:] = False
    out[:, :m] = out[:, -m:] = False
    return out


def mean_angle(a: NormalMap, b: NormalMap, mask=None):
    q = a.valid & b.valid if mask is None else mask & a.valid & b.valid
    ang, _ = angular_errors(NormalMap(a.normals, q), NormalMap(b.normals, q))
    return ang.mean()


def test_fronto_parallel_plane(K):
    n = normals_from_depth(DepthMap(np.full(K.shape, 2.0)), K)
    q = interior(np.ones(K.shape, bool), 2)
    assert n.valid[q].all()
    np.testing.assert_allclose(n.normals[q], np.broadcast_to([0.0, 0.0, -1.0], n.normals[q].shape), atol=1e-6)


@pytest.mark.parametrize("scale", [0.01, 1.0, 37.0])
def test_fronto_parallel_scale_invariant(K, scale):
    n = normals_from_depth(DepthMap(np.full(K.shape, 2.0 * scale)), K)
    np.testing.assert_allclose(n.normals[n.valid][:, 2], -1.0, atol=1e-6)


def test_slanted_plane_normal(K):
    n = normals_from_depth(slanted_plane_depth(K), K)
    truth = np.array([0.2, 0.0, -1.0]) / np.hypot(0.2, 1.0)
    q = interior(n.valid)
    cos = np.clip(n.normals[q] @ truth, -1, 1)
    assert np.degrees(np.arccos(cos)).mean() < 0.5


def test_sphere_normals(K):
    r = render(Scene((Sphere((0, 0, 3.0), 1.0),)), K, Pose.identity())
    n = normals_from_depth(r.depth, K, radius=2)
    assert n.valid.sum() > 1000
    assert mean_angle(n, r.normals) < 2.0


def test_normals_face_camera_and_are_unit(K):
    r = render(Scene((Sphere((0.3, -0.2, 2.5), 0.8),)), K, Pose.identity())
    n = normals_from_depth(r.depth, K)
    rays = camera_rays(K)
    assert np.all(np.einsum("hwi,hwi->hw", n.normals, rays)[n.valid] <= 0)
    np.testing.assert_allclose(np.linalg.norm(n.normals[n.valid], axis=1), 1.0, atol=1e-6)


def test_depth_discontinuity_invalidates(K):
    d = np.full(K.shape, 2.0)
    d[:, 80:] = 3.0
    n = normals_from_depth(DepthMap(d), K, max_relative_jump=0.05)
    assert not n.valid[:, 78:82].any()
    assert n.valid[10:-10, 10:70].all()


def test_too_few_neighbours_invalid(K):
    valid = np.zeros(K.shape, bool)
    valid[50, 50] = valid[50, 51] = True
    n = normals_from_depth(DepthMap(np.full(K.shape, 2.0), valid), K)
    assert not n.valid.any()


def test_collinear_window_is_degenerate(K):
    valid = np.zeros(K.shape, bool)
    valid[50, 40:60] = True
    n = normals_from_depth(DepthMap(np.full(K.shape, 2.0), valid), K)
    assert not n.valid.any()


def test_radius_must_be_positive(K):
    with pytest.raises(InvalidArgumentError):
        normals_from_depth(DepthMap(np.full(K.shape, 2.0)), K, radius=0)


# -------------------------------------------------------------------- CNM


def two_pixel_map(n1, n2):
    return NormalMap(np.array([[n1, n2]], dtype=np.float64), np.ones((1, 2), bool))


def test_cnm_without_planes_is_identity(rng):
    v = rng.normal(size=(4, 5, 3))
    local = NormalMap(v / np.linalg.norm(v, axis=-1, keepdims=True), rng.uniform(size=(4, 5)) > 0.3)
    assert build_cnm(local, PlaneMaskSet(np.zeros((4, 5), int))) is local


def test_cnm_two_normal_mean():
    theta = np.radians(10.0)
    local = two_pixel_map([0, 0, -1], [0, np.sin(theta), -np.cos(theta)])
    cnm = build_cnm(local, PlaneMaskSet(np.ones((1, 2), int)))
    expected = np.array([0.0, np.sin(theta / 2), -np.cos(theta / 2)])
    np.testing.assert_allclose(cnm.normals[0, 0], expected, atol=1e-15)
    np.testing.assert_allclose(cnm.normals[0, 1], expected, atol=1e-15)


def test_cnm_cancellation_marks_region_invalid():
    local = two_pixel_map([1, 0, 0], [-1, 0, 0])
    cnm = build_cnm(local, PlaneMaskSet(np.ones((1, 2), int)))
    assert not cnm.valid.any()


def test_cnm_region_without_valid_locals(rng):
    local = NormalMap(np.zeros((2, 3, 3)), np.zeros((2, 3), bool))
    cnm = build_cnm(local, PlaneMaskSet(np.ones((2, 3), int)))
    assert not cnm.valid.any()


def test_cnm_keeps_non_planar_pixels():
    local = NormalMap(np.array([[[0, 0, -1.0], [0, 1.0, 0], [1.0, 0, 0]]]), np.ones((1, 3), bool))
    cnm = build_cnm(local, PlaneMaskSet(np.array([[0, 2, 2]])))
    assert np.array_equal(cnm.normals[0, 0], [0, 0, -1.0])
    np.testing.assert_allclose(cnm.normals[0, 1], [np.sqrt(0.5), np.sqrt(0.5), 0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_cnm_idempotent(seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(6, 7, 3)) + np.array([0, 0, -2.0])
    local = NormalMap(v / np.linalg.norm(v, axis=-1, keepdims=True), rng.uniform(size=(6, 7)) > 0.2)
    masks = PlaneMaskSet(rng.integers(0, 4, size=(6, 7)))
    once = build_cnm(local, masks)
    twice = build_cnm(once, masks)
    assert np.array_equal(once.normals, twice.normals)
    assert np.array_equal(once.valid, twice.valid)


def test_cnm_beats_local_on_noisy_plane(K):
    rng = np.random.default_rng(7)
    clean = slanted_plane_depth(K, 2.0, 0.3)
    noisy = DepthMap(clean.depth * (1.0 + 0.01 * rng.normal(size=K.shape)))
    local = normals_from_depth(noisy, K, max_relative_jump=1.0)
    truth = normals_from_depth(clean, K)
    mask = np.ones(K.shape, bool)
    cnm = build_cnm(local, PlaneMaskSet(mask.astype(int)))
    assert mean_angle(cnm, truth, mask) < mean_angle(local, truth, mask)


def test_mask_labels_validated():
    with pytest.raises(InvalidArgumentError):
        PlaneMaskSet(np.array([[-1, 0]]))
    with pytest.raises(InvalidArgumentError):
        build_cnm(two_pixel_map([0, 0, -1], [0, 0, -1]), PlaneMaskSet(np.zeros((2, 2), int)))
