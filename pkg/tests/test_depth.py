import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occdepth.cost_volume import CostVolume, aggregate_cost_volume, build_cost_volume
from occdepth.depth import ARGMIN, SOFT_ARGMIN, DepthExtractionConfig, extract_depth
from occdepth.errors import InvalidArgumentError
from occdepth.geometry import PlaneSampling, Pose
from occdepth.synth import Plane, Scene, render

S16 = PlaneSampling(1.0, 4.0, 16)


def profile_volume(profile, valid=None, sampling=S16):
    costs = np.asarray(profile, dtype=np.float64).reshape(-1, 1, 1)
    v = None if valid is None else np.asarray(valid, dtype=bool).reshape(-1, 1, 1)
    return CostVolume(costs, np.ones(costs.shape, bool) if v is None else v, sampling)


def test_unique_minimum_argmin():
    vol = profile_volume(np.abs(np.arange(16) - 7.0))
    d = extract_depth(vol, DepthExtractionConfig(subplane=False))
    assert d.depth[0, 0] == S16.depths[7]
    # a symmetric profile keeps the sub-plane offset at zero
    assert extract_depth(vol).depth[0, 0] == S16.depths[7]


def test_flat_volume_ties_to_lowest_index():
    d = extract_depth(profile_volume(np.full(16, 0.3)))
    assert d.valid[0, 0] and d.depth[0, 0] == S16.d_min


def test_invalid_planes_ignored():
    prof = np.abs(np.arange(16) - 3.0)
    valid = np.ones(16, bool)
    valid[3] = False
    d = extract_depth(profile_volume(prof, valid), DepthExtractionConfig(subplane=False))
    assert d.depth[0, 0] == S16.depths[2]


def test_all_invalid_gives_invalid_map():
    vol = CostVolume(np.zeros((16, 3, 4)), np.zeros((16, 3, 4), bool), S16)
    for mode in (ARGMIN, SOFT_ARGMIN):
        d = extract_depth(vol, DepthExtractionConfig(mode=mode))
        assert not d.valid.any()


def test_subplane_vertex_of_parabola():
    # c(n) = (n - 5.3)^2 has its vertex 0.3 planes past index 5
    n = np.arange(16.0)
    d = extract_depth(profile_volume((n - 5.3) ** 2))
    assert d.depth[0, 0] == pytest.approx(S16.depth(5.3), abs=1e-12)


def test_subplane_skipped_at_boundaries():
    n = np.arange(16.0)
    d = extract_depth(profile_volume((n + 0.4) ** 2))
    assert d.depth[0, 0] == S16.d_min
    d = extract_depth(profile_volume((n - 15.4) ** 2))
    assert d.depth[0, 0] == S16.d_max


def test_soft_argmin_hand_value():
    prof = np.full(16, 10.0)
    prof[[4, 5]] = 0.0
    d = extract_depth(profile_volume(prof), DepthExtractionConfig(SOFT_ARGMIN, softness=1e-3))
    assert d.depth[0, 0] == pytest.approx((S16.depths[4] + S16.depths[5]) / 2, abs=1e-12)


def test_soft_argmin_converges_to_argmin(rng):
    costs = rng.uniform(size=(16, 6, 7))
    vol = CostVolume(costs, np.ones(costs.shape, bool), S16)
    hard = extract_depth(vol, DepthExtractionConfig(subplane=False))
    soft = extract_depth(vol, DepthExtractionConfig(SOFT_ARGMIN, softness=1e-6))
    np.testing.assert_allclose(soft.depth, hard.depth, atol=1e-9)


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        DepthExtractionConfig(mode="median")
    with pytest.raises(InvalidArgumentError):
        DepthExtractionConfig(SOFT_ARGMIN, softness=0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.booleans())
def test_depth_within_clamped_range(seed, subplane):
    rng = np.random.default_rng(seed)
    costs = rng.uniform(size=(16, 5, 5))
    valid = rng.uniform(size=costs.shape) > 0.2
    d = extract_depth(CostVolume(costs, valid, S16), DepthExtractionConfig(subplane=subplane))
    half = S16.spacing / 2
    assert np.all(d.depth[d.valid] >= S16.d_min - half - 1e-12)
    assert np.all(d.depth[d.valid] <= S16.d_max + half + 1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["sqrt", "exp", "affine", "cube"]))
def test_argmin_invariant_to_monotone_transform(seed, kind):
    rng = np.random.default_rng(seed)
    # quantized costs create ties, which must break the same way
    costs = np.round(rng.uniform(size=(16, 4, 4)), 1)
    valid = rng.uniform(size=costs.shape) > 0.2
    f = {"sqrt": np.sqrt, "exp": np.exp, "affine": lambda c: 3.0 * c + 0.5, "cube": lambda c: c**3}[kind]
    cfg = DepthExtractionConfig(subplane=False)
    a = extract_depth(CostVolume(costs, valid, S16), cfg)
    b = extract_depth(CostVolume(f(costs), valid, S16), cfg)
    assert np.array_equal(a.depth, b.depth) and np.array_equal(a.valid, b.valid)


def test_off_grid_plane_subplane_accuracy(K):
    s = PlaneSampling(1.0, 1.0 + 63 * 0.05, 64)
    truth = 3.025  # midway between planes 40 and 41
    scene = Scene((Plane((0, 0, truth), (20, 20)),))
    src = Pose(np.eye(3), [-0.2, 0, 0])
    ref_img = render(scene, K, Pose.identity()).color
    vol = aggregate_cost_volume(build_cost_volume(ref_img, render(scene, K, src).color, K, src, s), ref_img)
    d = extract_depth(vol)
    q = d.valid.copy()
    q[:8] = q[-8:] = False
    q[:, :8] = q[:, -8:] = False
    assert np.abs(d.depth[q] - truth).mean() < 0.25 * s.spacing
