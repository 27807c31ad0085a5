"""Shared cameras and synthetic scenes.

Scene geometry constants live here so the acceptance module and the unit
tests exercise the same fixtures.
"""

from __future__ import annotations

import numpy as np
import pytest

from occdepth.geometry import CameraIntrinsics, Pose
from occdepth.synth import scene_from_dict, trajectory_from_dict

CAMERA = {"fx": 120.0, "fy": 120.0, "cx": 79.5, "cy": 59.5, "width": 160, "height": 120}

# Two thin slabs at SLAB_Z leave a vertical slit of SLIT_WIDTH over a far
# textured wall. The sources sit at +-SLIT_BASELINE, pulled back by
# SLIT_PULLBACK and aimed at the slit so the slabs stay inside both source
# images; the wall seen through the slit is hidden from both.
SLAB_Z = 2.0
WALL_Z = 4.0
SLIT_WIDTH = 0.12
SLIT_BASELINE = 0.3
SLIT_PULLBACK = 0.1


def camera() -> CameraIntrinsics:
    return CameraIntrinsics(**CAMERA)


def slit_scene_dict(frames: int = 41) -> dict:
    half = SLIT_WIDTH / 2
    return {
        "seed": 11,
        "camera": dict(CAMERA),
        "primitives": [
            {"type": "box", "center": [-half - 2.0, 0, SLAB_Z], "half_extents": [2.0, 2.0, 0.01], "texture": {"seed": 1}},
            {
                "type": "box",
                "center": [half + 2.0, 0, SLAB_Z],
                "half_extents": [2.0, 2.0, 0.01],
                "texture": {"seed": 2, "tint": [1.0, 0.8, 0.7]},
            },
            {
                "type": "plane",
                "center": [0, 0, WALL_Z],
                "half_extents": [10, 10],
                "texture": {"seed": 3, "scale": 0.05, "tint": [0.7, 0.9, 1.0]},
            },
        ],
        "trajectory": {
            "type": "line",
            "start": [-2 * SLIT_BASELINE, 0, -SLIT_PULLBACK],
            "end": [2 * SLIT_BASELINE, 0, -SLIT_PULLBACK],
            "target": [0, 0, SLAB_Z],
            "frames": frames,
        },
    }


def slit_views():
    """(reference pose, [left source, right source]) for the two-slab scene."""
    ref = Pose.identity()
    srcs = [
        Pose.look_at([-SLIT_BASELINE, 0, -SLIT_PULLBACK], [0, 0, SLAB_Z]),
        Pose.look_at([SLIT_BASELINE, 0, -SLIT_PULLBACK], [0, 0, SLAB_Z]),
    ]
    return ref, srcs


ROOM_BOUNDS = ((-2.1, -1.3, -2.1), (2.1, 1.3, 2.1))


def room_scene_dict(frames: int = 41) -> dict:
    """Textured box room with a crate and a ball, camera sliding sideways."""
    return {
        "seed": 5,
        "camera": dict(CAMERA),
        "primitives": [
            {"type": "box", "center": [0, 0, 0], "half_extents": [2.0, 1.2, 2.0], "texture": {"scale": 0.08}},
            {"type": "box", "center": [-0.5, 0.7, 0.8], "half_extents": [0.45, 0.5, 0.35], "texture": {"tint": [1, 0.8, 0.6]}},
            {"type": "sphere", "center": [0.6, 0.3, 0.6], "radius": 0.35, "texture": {"tint": [0.7, 0.9, 1.0]}},
        ],
        "trajectory": {
            "type": "line",
            "start": [-0.6, -0.1, -1.2],
            "end": [0.6, -0.1, -1.2],
            "target": [0, 0.2, 2.0],
            "frames": frames,
            "follow": True,
        },
    }


@pytest.fixture(scope="session")
def K() -> CameraIntrinsics:
    return camera()


@pytest.fixture(scope="session")
def room():
    data = room_scene_dict()
    return scene_from_dict(data), trajectory_from_dict(data["trajectory"])


@pytest.fixture(scope="session")
def room_frames(room, K):
    """Rendered room frames with ground truth, indexed by trajectory position."""
    from occdepth.pipeline import Frame
    from occdepth.synth import render

    scene, poses = room
    out = []
    for i, pose in enumerate(poses):
        r = render(scene, K, pose)
        out.append(Frame(i, r.color, pose, r.depth, r.plane_masks))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Settings that keep a full `run` over the small room dataset to a few seconds.
SMALL_RUN = {
    "frame_interval": 2,
    "window_stride": 2,
    "planes": 48,
    "voxel_size": 0.05,
    "trunc": 0.2,
    "bounds_min": ROOM_BOUNDS[0],
    "bounds_max": ROOM_BOUNDS[1],
}


def small_run_args() -> list[str]:
    args = []
    for key, value in SMALL_RUN.items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        args += ["--set", f"{key}={value}"]
    return args


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, K):
    """Nine rendered room frames in the on-disk dataset layout."""
    from occdepth.synth import write_dataset

    data = room_scene_dict(frames=9)
    root = tmp_path_factory.mktemp("room9")
    write_dataset(scene_from_dict(data), K, trajectory_from_dict(data["trajectory"]), root)
    return root


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance lines collected by ``test_acceptance.py``."""
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
