import json

import numpy as np
import pytest

from occdepth import io
from occdepth.errors import ConfigurationError
from occdepth.losses import depth_metrics
from occdepth.pipeline import LAST, Dataset, PipelineConfig, plan_volume, run_sequence, run_window

from conftest import SMALL_RUN


# ------------------------------------------------------------------ config


def test_config_defaults():
    cfg = PipelineConfig()
    assert cfg.stride == cfg.frame_interval == 10
    assert cfg.reference_slot() == 1
    assert cfg.sampling.count == 64
    assert cfg.with_overrides(reference=LAST).reference_slot() == 2
    assert cfg.with_overrides(window=4).reference_slot() == 2


def test_config_from_strings():
    cfg = PipelineConfig.from_mapping(
        {"planes": "32", "subplane": "false", "bounds-min": "-1, -1, 0", "bounds_max": "1 1 2", "kappa": "0.25"}
    )
    assert cfg.planes == 32 and cfg.subplane is False and cfg.kappa == 0.25
    assert cfg.bounds_min == (-1.0, -1.0, 0.0) and cfg.bounds_max == (1.0, 1.0, 2.0)


@pytest.mark.parametrize(
    "data",
    [
        {"no_such_key": 1},
        {"planes": "many"},
        {"planes": 2.5},
        {"subplane": "maybe"},
        {"bounds_min": "1,2"},
        {"bounds_min": [0, 0, 0]},
        {"reference": "first"},
        {"d_min": 5.0, "d_max": 1.0},
        {"kappa": 2.0},
        {"window": 0},
        {"threads": 0},
    ],
)
def test_config_rejects(data):
    with pytest.raises(ConfigurationError):
        PipelineConfig.from_mapping(data)


def test_config_from_toml(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('planes = 16\nreference = "last"\nbounds_min = [0, 0, 0]\nbounds_max = [1, 1, 1]\n')
    cfg = PipelineConfig.from_file(path, {"planes": "24"})
    assert cfg.planes == 24 and cfg.reference == LAST and cfg.bounds_max == (1.0, 1.0, 1.0)
    path.write_text("planes = = 3")
    with pytest.raises(ConfigurationError):
        PipelineConfig.from_file(path)
    with pytest.raises(ConfigurationError):
        PipelineConfig.from_file(tmp_path / "missing.toml")


def test_config_dict_round_trip():
    cfg = PipelineConfig(planes=20, bounds_min=(0, 0, 0), bounds_max=(1, 2, 3))
    assert PipelineConfig.from_mapping(cfg.to_dict()) == cfg


# ----------------------------------------------------------------- dataset


def test_dataset_windows(small_dataset):
    ds = Dataset(small_dataset)
    assert ds.frame_ids == list(range(9))
    cfg = PipelineConfig(frame_interval=2, window_stride=2)
    assert ds.windows(cfg) == [[0, 2, 4], [2, 4, 6], [4, 6, 8]]
    assert ds.windows(cfg.with_overrides(reference=LAST)) == [[0, 2, 4], [2, 4, 6], [4, 6, 8]]
    assert ds.windows(cfg.with_overrides(window=4, frame_interval=2)) == [[0, 2, 4, 6, 8]]
    assert ds.windows(cfg.with_overrides(window=3, window_stride=1, frame_interval=3)) == []


def test_dataset_frame_contents(small_dataset, K):
    frame = Dataset(small_dataset).frame(4)
    assert frame.image.shape == K.shape
    assert frame.gt_depth is not None and frame.gt_depth.valid.all()
    assert frame.plane_masks is not None and frame.plane_masks.labels.max() > 0


def test_dataset_errors(tmp_path, small_dataset):
    with pytest.raises(ConfigurationError):
        Dataset(tmp_path / "missing")
    with pytest.raises(ConfigurationError):
        Dataset(tmp_path)
    (tmp_path / "color").mkdir()
    (tmp_path / "color" / "000000.png").write_bytes((small_dataset / "color" / "000000.png").read_bytes())
    with pytest.raises(ConfigurationError, match="trajectory"):
        Dataset(tmp_path)
    lines = (small_dataset / "trajectory.txt").read_text().splitlines()
    (tmp_path / "trajectory.txt").write_text(lines[1] + "\n")
    with pytest.raises(ConfigurationError, match="frame 0"):
        Dataset(tmp_path).frame(0)


# ------------------------------------------------------------------ window


def test_window_refines_room(room_frames, K):
    res = run_window([room_frames[i] for i in (10, 20, 30)], K, PipelineConfig())
    assert res.reference_id == 20 and res.source_ids == [10, 30]
    gt = room_frames[20].gt_depth
    final = depth_metrics(res.final_depth, gt).abs_rel
    pairs = [depth_metrics(d, gt).abs_rel for d in res.pair_depths]
    assert final < 0.05
    assert final <= min(pairs)
    assert res.metrics["final"].abs_rel == final
    assert res.metrics["normals"] is not None


def test_single_source_window_skips_refinement(room_frames, K):
    res = run_window([room_frames[18], room_frames[20]], K, PipelineConfig(), reference_index=1)
    assert res.occlusion is None
    assert res.final_depth is res.pair_depths[0]


def test_window_needs_two_frames(room_frames, K):
    with pytest.raises(ConfigurationError):
        run_window([room_frames[0]], K, PipelineConfig())


# ---------------------------------------------------------------- sequence


def test_voxel_budget_checked_before_work(K, room):
    _, poses = room
    cfg = PipelineConfig(voxel_size=0.001, trunc=0.004)
    with pytest.raises(ConfigurationError, match="max_voxels"):
        plan_volume(cfg, K, poses)
    with pytest.raises(ConfigurationError):
        plan_volume(cfg.with_overrides(bounds_min=(0, 0, 0), bounds_max=(0, 1, 1)), K, poses)


def test_frustum_bounds_cover_cameras(K, room):
    _, poses = room
    vol = plan_volume(PipelineConfig(voxel_size=0.25, trunc=1.0, d_max=4.0), K, poses)
    hi = vol.origin + vol.voxel_size * (np.asarray(vol.dims) - 1)
    for p in poses:
        assert np.all(p.center >= vol.origin - 1e-9) and np.all(p.center <= hi + 1e-9)


def test_sequence_too_short(small_dataset):
    with pytest.raises(ConfigurationError, match="too short"):
        run_sequence(small_dataset, PipelineConfig(frame_interval=5))


def test_sequence_outputs(small_dataset, tmp_path):
    cfg = PipelineConfig(**SMALL_RUN)
    res = run_sequence(small_dataset, cfg, tmp_path)
    assert [w.reference_id for w in res.windows] == [2, 4, 6]
    assert len(res.mesh.faces) > 0
    summary = json.loads((tmp_path / "metrics.json").read_text())
    assert len(summary["windows"]) == 3 and summary["mesh"]["faces"] == len(res.mesh.faces)
    assert summary["mean_final"]["abs_rel"] < 0.1
    assert "abs.rel" in (tmp_path / "metrics.txt").read_text()
    back = io.read_ply(tmp_path / "mesh.ply")
    np.testing.assert_allclose(back.vertices, res.mesh.vertices, atol=1e-5)
    win = tmp_path / "windows" / "000004"
    final = io.load_depth(win / "depth_final.pfm")
    assert np.array_equal(final.valid, res.windows[1].final_depth.valid)
    assert io.load_occlusion(win / "occlusion.pfm").shape == final.shape
    assert (win / "depth_pair_000002.pfm").exists() and (win / "depth_pair_000006.pfm").exists()


def test_unweighted_fusion_differs(small_dataset):
    cfg = PipelineConfig(**SMALL_RUN)
    a = run_sequence(small_dataset, cfg)
    b = run_sequence(small_dataset, cfg.with_overrides(occlusion_weighting=False))
    assert b.volume.weight.sum() > a.volume.weight.sum()
