"""Projective TSDF fusion with per-sample occlusion weights, and mesh extraction."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage import measure

from .errors import DataError, InvalidArgumentError
from .geometry import CameraIntrinsics, DepthMap, Image, Pose

DEFAULT_VOXEL_SIZE = 0.02
DEFAULT_TRUNC = 0.08
DEFAULT_MIN_WEIGHT = 1.0


class TsdfVolume:
    """Voxel grid of truncated signed distances, weights and colors.

    Voxel ``(i, j, k)`` is centred at ``origin + voxel_size * (i, j, k)``
    (x, y, z order). ``tsdf`` starts at +1 and is meaningful only where
    ``weight > 0``. This is the one mutable object in the package;
    ``integrate`` calls on a volume must not overlap.
    """

    def __init__(self, origin, voxel_size: float, dims):
        origin = np.asarray(origin, dtype=np.float64).reshape(3)
        dims = tuple(int(d) for d in dims)
        if not np.all(np.isfinite(origin)):
            raise InvalidArgumentError("volume origin must be finite")
        if not (np.isfinite(voxel_size) and voxel_size > 0):
            raise InvalidArgumentError("voxel size must be positive")
        if len(dims) != 3 or min(dims) < 2:
            raise InvalidArgumentError("volume needs at least 2 voxels per axis")
        self.origin = origin
        self.voxel_size = float(voxel_size)
        self.dims = dims
        self.tsdf = np.ones(dims, dtype=np.float32)
        self.weight = np.zeros(dims, dtype=np.float32)
        self.color = np.zeros(dims + (3,), dtype=np.float32)

    @classmethod
    def from_bounds(cls, bounds_min, bounds_max, voxel_size: float) -> "TsdfVolume":
        lo = np.asarray(bounds_min, dtype=np.float64)
        hi = np.asarray(bounds_max, dtype=np.float64)
        dims = np.ceil((hi - lo) / voxel_size).astype(int) + 1
        return cls(lo, voxel_size, dims)

    def copy(self) -> "TsdfVolume":
        out = TsdfVolume(self.origin, self.voxel_size, self.dims)
        out.tsdf[...] = self.tsdf
        out.weight[...] = self.weight
        out.color[...] = self.color
        return out

    def voxel_centers(self, xs: slice = slice(None)) -> np.ndarray:
        nx, ny, nz = self.dims
        ii = np.arange(nx)[xs]
        i, j, k = np.meshgrid(ii, np.arange(ny), np.arange(nz), indexing="ij")
        idx = np.stack([i, j, k], axis=-1).astype(np.float64)
        return self.origin + self.voxel_size * idx

    def integrate(
        self,
        depth: DepthMap,
        color: Image | None,
        K: CameraIntrinsics,
        world_pose: Pose,
        trunc: float = DEFAULT_TRUNC,
        occ=None,
        threads: int = 1,
    ) -> "TsdfVolume":
        """Fuse one depth map; ``world_pose`` maps world points into the camera.

        Each voxel that projects (nearest pixel) onto a valid depth with
        ``sdf = depth - z > -trunc`` receives ``clamp(sdf / trunc, -1, 1)``
        with sample weight ``1 - P`` (or 1 without an occlusion map) in a
        weighted running mean. Zero-weight samples leave the voxel untouched.
        """
        if not (np.isfinite(trunc) and trunc > 0):
            raise InvalidArgumentError("truncation distance must be positive")
        if trunc < 2 * self.voxel_size:
            raise InvalidArgumentError("truncation must be at least two voxels")
        if depth.shape != K.shape:
            raise InvalidArgumentError("depth map does not match the intrinsics")
        if color is not None and color.shape != depth.shape:
            raise InvalidArgumentError("color image does not match the depth map")
        if occ is not None:
            if occ.shape != depth.shape:
                raise InvalidArgumentError("occlusion map does not match the depth map")
            sample_w = np.where(occ.valid, 1.0 - occ.p, 0.0)
        else:
            sample_w = np.ones(depth.shape)
        if color is not None:
            rgb = color.data if color.channels == 3 else np.repeat(color.data, 3, axis=2)
        else:
            rgb = np.zeros(depth.shape + (3,))
        h, w = depth.shape

        def work(xs: range):
            sl = slice(xs.start, xs.stop)
            pts = self.voxel_centers(sl)
            cam = world_pose.apply(pts)
            z = cam[..., 2]
            front = z > 0
            zs = np.where(front, z, 1.0)
            u = np.rint(K.fx * cam[..., 0] / zs + K.cx)
            v = np.rint(K.fy * cam[..., 1] / zs + K.cy)
            inside = front & (u >= 0) & (u < w) & (v >= 0) & (v < h)
            ui = np.where(inside, u, 0).astype(np.intp)
            vi = np.where(inside, v, 0).astype(np.intp)
            ok = inside & depth.valid[vi, ui]
            sdf = depth.depth[vi, ui] - z
            ok &= sdf > -trunc
            ws = sample_w[vi, ui]
            ok &= ws > 0
            if not ok.any():
                return
            d = np.clip(sdf[ok] / trunc, -1.0, 1.0)
            ws = ws[ok]
            t_old = self.tsdf[sl][ok].astype(np.float64)
            w_old = self.weight[sl][ok].astype(np.float64)
            c_old = self.color[sl][ok].astype(np.float64)
            w_new = w_old + ws
            t_blk = self.tsdf[sl]
            w_blk = self.weight[sl]
            c_blk = self.color[sl]
            t_blk[ok] = (t_old * w_old + d * ws) / w_new
            c_blk[ok] = (c_old * w_old[:, None] + rgb[vi[ok], ui[ok]] * ws[:, None]) / w_new[:, None]
            w_blk[ok] = w_new

        nx = self.dims[0]
        if threads <= 1:
            work(range(nx))
        else:
            bounds = np.linspace(0, nx, min(threads, nx) + 1).astype(int)
            slabs = [range(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(work, slabs))
        return self

    def save(self, path) -> None:
        """Checkpoint: JSON header line, then float32 tsdf, weight, color (C order)."""
        header = {
            "origin": self.origin.tolist(),
            "voxel_size": self.voxel_size,
            "dims": list(self.dims),
            "dtype": "<f4",
            "fields": ["tsdf", "weight", "color"],
        }
        with open(path, "wb") as fh:
            fh.write((json.dumps(header, sort_keys=True) + "\n").encode("ascii"))
            for arr in (self.tsdf, self.weight, self.color):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "TsdfVolume":
        raw = Path(path).read_bytes()
        nl = raw.find(b"\n")
        try:
            header = json.loads(raw[:nl].decode("ascii"))
            vol = cls(header["origin"], header["voxel_size"], header["dims"])
        except (ValueError, KeyError) as exc:
            raise DataError(f"{path}: bad volume header ({exc})") from exc
        n = int(np.prod(vol.dims))
        body = np.frombuffer(raw[nl + 1 :], dtype="<f4")
        if body.size != 5 * n:
            raise DataError(f"{path}: payload size does not match header")
        vol.tsdf[...] = body[:n].reshape(vol.dims)
        vol.weight[...] = body[n : 2 * n].reshape(vol.dims)
        vol.color[...] = body[2 * n :].reshape(vol.dims + (3,))
        return vol


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64, world coordinates
    faces: np.ndarray  # (F, 3) int64
    colors: np.ndarray  # (V, 3) float64 in [0, 1]

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))

    def edge_stats(self) -> dict:
        """Counts of edges shared by exactly two faces (manifold) and otherwise."""
        if len(self.faces) == 0:
            return {"edges": 0, "manifold_edges": 0, "boundary_edges": 0, "nonmanifold_edges": 0}
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return {
            "edges": int(counts.size),
            "manifold_edges": int(np.sum(counts == 2)),
            "boundary_edges": int(np.sum(counts == 1)),
            "nonmanifold_edges": int(np.sum(counts > 2)),
        }


def extract_mesh(volume: TsdfVolume, min_weight: float = DEFAULT_MIN_WEIGHT) -> TriangleMesh:
    """Marching cubes on the zero level set, restricted to cubes whose eight
    corners all carry ``weight >= min_weight``. Vertex colors are trilinearly
    interpolated from the color accumulator."""
    if not min_weight >= 0:
        raise InvalidArgumentError("min_weight must be non-negative")
    observed = (volume.weight >= min_weight) & (volume.weight > 0)
    # a cube is usable only if all eight of its corners are observed
    full = observed.copy()
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                shifted = np.zeros_like(observed)
                nx, ny, nz = observed.shape
                shifted[: nx - dx, : ny - dy, : nz - dz] = observed[dx:, dy:, dz:]
                full &= shifted
    full[-1, :, :] = False
    full[:, -1, :] = False
    full[:, :, -1] = False
    if not full.any():
        return TriangleMesh.empty()
    field = np.where(observed, volume.tsdf, 1.0).astype(np.float64)
    corners = np.zeros_like(observed)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                nx, ny, nz = observed.shape
                corners[dx:, dy:, dz:] |= full[: nx - dx, : ny - dy, : nz - dz]
    vals = field[corners]
    if not (vals.min() < 0 < vals.max()):
        return TriangleMesh.empty()
    try:
        # skimage keys each cube by its upper corner
        mask = np.zeros_like(full)
        mask[1:, 1:, 1:] = full[:-1, :-1, :-1]
        verts, faces, _, _ = measure.marching_cubes(field, level=0.0, mask=mask, allow_degenerate=False)
    except (RuntimeError, ValueError):
        return TriangleMesh.empty()
    if len(verts) == 0:
        return TriangleMesh.empty()
    cols = np.stack(
        [ndimage.map_coordinates(volume.color[..., c], verts.T, order=1, mode="nearest") for c in range(3)],
        axis=1,
    )
    world = volume.origin + verts.astype(np.float64) * volume.voxel_size
    return TriangleMesh(world, faces.astype(np.int64), np.clip(cols.astype(np.float64), 0.0, 1.0))


def integrate(
    volume: TsdfVolume,
    depth: DepthMap,
    color: Image | None,
    occ,
    K: CameraIntrinsics,
    world_pose: Pose,
    trunc: float = DEFAULT_TRUNC,
    threads: int = 1,
) -> TsdfVolume:
    """Functional spelling of :meth:`TsdfVolume.integrate` (updates in place)."""
    return volume.integrate(depth, color, K, world_pose, trunc=trunc, occ=occ, threads=threads)
