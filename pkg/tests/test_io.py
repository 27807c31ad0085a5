import numpy as np
import pytest

from occdepth import io
from occdepth.errors import DataError
from occdepth.geometry import DepthMap, Image, Pose
from occdepth.normals import NormalMap, PlaneMaskSet
from occdepth.occlusion import OcclusionMap
from occdepth.tsdf import TriangleMesh


@pytest.mark.parametrize("shape", [(5, 7), (4, 6, 3)])
def test_pfm_round_trip(tmp_path, rng, shape):
    data = rng.normal(size=shape).astype(np.float32)
    io.write_pfm(tmp_path / "a.pfm", data)
    assert np.array_equal(io.read_pfm(tmp_path / "a.pfm"), data)


def test_pfm_stores_bottom_row_first(tmp_path):
    data = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    io.write_pfm(tmp_path / "a.pfm", data)
    raw = (tmp_path / "a.pfm").read_bytes()
    assert raw.startswith(b"Pf\n2 2\n-1.0\n")
    assert np.frombuffer(raw[-16:], "<f4").tolist() == [3.0, 4.0, 1.0, 2.0]


def test_big_endian_pfm_is_read(tmp_path):
    body = np.array([[1.5, -2.0]], dtype=">f4").tobytes()
    (tmp_path / "b.pfm").write_bytes(b"Pf\n2 1\n1.0\n" + body)
    assert io.read_pfm(tmp_path / "b.pfm").tolist() == [[1.5, -2.0]]


def test_bad_pfm_rejected(tmp_path):
    (tmp_path / "x.pfm").write_bytes(b"P6\n1 1\n255\n\0\0\0")
    with pytest.raises(DataError):
        io.read_pfm(tmp_path / "x.pfm")
    (tmp_path / "t.pfm").write_bytes(b"Pf\n4 4\n-1.0\n" + b"\0" * 8)
    with pytest.raises(DataError):
        io.read_pfm(tmp_path / "t.pfm")


def test_depth_round_trip(tmp_path, rng):
    valid = rng.uniform(size=(6, 8)) > 0.3
    d = DepthMap(np.where(valid, rng.uniform(0.5, 5.0, (6, 8)).astype(np.float32), 0.0), valid)
    io.save_depth(tmp_path / "d", d)
    back = io.load_depth(tmp_path / "d.pfm")
    assert np.array_equal(back.valid, d.valid)
    assert np.array_equal(back.depth, d.depth)


def test_normals_round_trip(tmp_path, rng):
    v = rng.normal(size=(4, 5, 3))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    valid = rng.uniform(size=(4, 5)) > 0.3
    n = NormalMap(v, valid)
    io.save_normals(tmp_path / "n", n)
    back = io.load_normals(tmp_path / "n.pfm")
    assert np.array_equal(back.valid, valid)
    np.testing.assert_allclose(back.normals[valid], v[valid], atol=1e-6)
    assert (tmp_path / "n.png").exists()


def test_occlusion_round_trip(tmp_path, rng):
    occ = OcclusionMap(rng.uniform(size=(4, 5)).astype(np.float32), rng.uniform(size=(4, 5)) > 0.5)
    io.save_occlusion(tmp_path / "p", occ)
    back = io.load_occlusion(tmp_path / "p.pfm")
    assert np.array_equal(back.valid, occ.valid)
    assert np.array_equal(back.p, occ.p)


@pytest.mark.parametrize("channels", [1, 3])
def test_image_round_trip_8bit(tmp_path, rng, channels):
    data = np.rint(rng.uniform(size=(6, 7, channels)) * 255) / 255
    io.write_image(tmp_path / "i.png", Image(data))
    np.testing.assert_allclose(io.read_image(tmp_path / "i.png").data, data, atol=1e-12)


def test_image_round_trip_16bit(tmp_path, rng):
    data = np.rint(rng.uniform(size=(6, 7, 1)) * 65535) / 65535
    io.write_image(tmp_path / "i.png", Image(data), bits=16)
    np.testing.assert_allclose(io.read_image(tmp_path / "i.png").data, data, atol=1e-12)


def test_unreadable_image(tmp_path):
    (tmp_path / "x.png").write_bytes(b"nope")
    with pytest.raises(DataError):
        io.read_image(tmp_path / "x.png")


def test_labels_round_trip(tmp_path, rng):
    labels = rng.integers(0, 3000, size=(5, 6))
    io.write_labels(tmp_path / "l.png", PlaneMaskSet(labels))
    assert np.array_equal(io.read_labels(tmp_path / "l.png").labels, labels)


def test_ply_round_trip(tmp_path, rng):
    mesh = TriangleMesh(
        rng.normal(size=(10, 3)).astype(np.float32).astype(np.float64),
        rng.integers(0, 10, size=(7, 3)),
        np.rint(rng.uniform(size=(10, 3)) * 255) / 255,
    )
    io.write_ply(tmp_path / "m.ply", mesh)
    back = io.read_ply(tmp_path / "m.ply")
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.faces, mesh.faces)
    np.testing.assert_allclose(back.colors, mesh.colors, atol=1e-12)


def test_empty_ply(tmp_path):
    io.write_ply(tmp_path / "e.ply", TriangleMesh.empty())
    back = io.read_ply(tmp_path / "e.ply")
    assert back.vertices.shape == (0, 3) and back.faces.shape == (0, 3)


def test_trajectory_round_trip(tmp_path, K):
    poses = [Pose.look_at([0.1 * i, 0, -1], [0, 0, 2]) for i in range(3)]
    io.write_trajectory(tmp_path / "t.txt", [(i * 10, K, p) for i, p in enumerate(poses)])
    traj = io.read_trajectory(tmp_path / "t.txt")
    assert sorted(traj) == [0, 10, 20]
    fx, fy, cx, cy, pose = traj[10]
    assert (fx, fy, cx, cy) == (K.fx, K.fy, K.cx, K.cy)
    assert np.array_equal(pose.matrix, poses[1].matrix)


def test_trajectory_snaps_rounded_rotation(tmp_path):
    R = Pose.look_at([0.3, 0.1, -1], [0, 0, 2]).rotation
    vals = [100, 100, 50, 40, *np.round(R, 5).ravel(), 0, 0, 0]
    (tmp_path / "t.txt").write_text("# id fx fy cx cy R t\n\n7 " + " ".join(map(str, vals)) + "\n")
    pose = io.read_trajectory(tmp_path / "t.txt")[7][4]
    np.testing.assert_allclose(pose.rotation.T @ pose.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(pose.rotation, R, atol=1e-5)


@pytest.mark.parametrize(
    "line",
    ["1 2 3", "0 1 1 0 0 1 0 0 0 1 0 0 0 1 0 0 x", "0 1 1 0 0 2 0 0 0 1 0 0 0 1 0 0 0"],
)
def test_bad_trajectory_lines(tmp_path, line):
    (tmp_path / "t.txt").write_text(line + "\n")
    with pytest.raises(DataError):
        io.read_trajectory(tmp_path / "t.txt")


def test_intrinsics_round_trip(tmp_path, K):
    io.write_intrinsics(tmp_path / "k.txt", K)
    assert io.read_intrinsics(tmp_path / "k.txt") == K
    (tmp_path / "bad.txt").write_text("1 2 3\n")
    with pytest.raises(DataError):
        io.read_intrinsics(tmp_path / "bad.txt")
