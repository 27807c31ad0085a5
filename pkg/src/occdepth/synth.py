"""Analytic test scenes rendered by exact ray casting.

Scenes are lists of textured planes (finite rectangles), boxes and spheres.
Surfaces are Lambertian with solid procedural textures evaluated at the 3-D
hit point, so a surface point has the same color from every viewpoint and the
renders are exact photometric fixtures for plane sweeping.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, InvalidArgumentError
from .geometry import CameraIntrinsics, DepthMap, Image, Pose
from .normals import NormalMap, PlaneMaskSet

_HIDDEN_MARGIN = 1e-6
_T_EPS = 1e-9
# slack on the image-bounds test so a view's own edge pixels count as inside
_BOUNDS_SLACK = 1e-6


@dataclass(frozen=True)
class Texture:
    """Solid texture: value noise plus a soft sinusoidal checker, tinted."""

    seed: int = 0
    scale: float = 0.1
    checker_period: float = 0.3
    tint: tuple = (1.0, 1.0, 1.0)
    base: float = 0.5
    contrast: float = 0.45

    def __call__(self, points: np.ndarray, textureless: bool = False) -> np.ndarray:
        shape = points.shape[:-1]
        tint = np.asarray(self.tint, dtype=np.float64)
        if textureless:
            return np.broadcast_to(self.base * tint, shape + (3,)).copy()
        p = points / self.scale
        noise = 0.6 * _value_noise(p, self.seed) + 0.4 * _value_noise(2.0 * p + 17.3, self.seed + 1)
        k = 2 * np.pi / self.checker_period
        rng = np.random.default_rng(self.seed + 7)
        ph = rng.uniform(0, 2 * np.pi, 3)
        checker = (
            np.sin(k * points[..., 0] + ph[0])
            + np.sin(k * points[..., 1] + ph[1])
            + np.sin(k * points[..., 2] + ph[2])
        ) / 3.0
        val = self.base + self.contrast * (0.7 * (2 * noise - 1) + 0.3 * checker)
        val = np.clip(val, 0.0, 1.0)
        return np.clip(val[..., None] * tint, 0.0, 1.0)


def _hash_lattice(ix, iy, iz, seed: int) -> np.ndarray:
    h = (ix.astype(np.int64) * 73856093) ^ (iy.astype(np.int64) * 19349663) ^ (iz.astype(np.int64) * 83492791)
    h = (h ^ (seed * 2654435761)) & 0xFFFFFFFF
    h = (h ^ (h >> 13)) * 1274126177 & 0xFFFFFFFF
    h = h ^ (h >> 16)
    return (h & 0xFFFFFF) / float(0xFFFFFF)


def _value_noise(p: np.ndarray, seed: int) -> np.ndarray:
    """Trilinear value noise with smoothstep fade, values in [0, 1]."""
    f = np.floor(p)
    t = p - f
    t = t * t * (3 - 2 * t)
    i = f.astype(np.int64)
    out = np.zeros(p.shape[:-1])
    for dx in (0, 1):
        wx = t[..., 0] if dx else 1 - t[..., 0]
        for dy in (0, 1):
            wy = t[..., 1] if dy else 1 - t[..., 1]
            for dz in (0, 1):
                wz = t[..., 2] if dz else 1 - t[..., 2]
                out += wx * wy * wz * _hash_lattice(i[..., 0] + dx, i[..., 1] + dy, i[..., 2] + dz, seed)
    return out


def _rotation(spec) -> np.ndarray:
    if spec is None:
        return np.eye(3)
    R = np.asarray(spec, dtype=np.float64)
    if R.shape != (3, 3):
        raise InvalidArgumentError("primitive rotation must be 3x3")
    return R


@dataclass(frozen=True)
class Plane:
    """Finite rectangle; local axes are the rotation's columns (u, v, normal)."""

    center: tuple
    half_extents: tuple
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    texture: Texture = field(default_factory=Texture)
    planar: bool = True

    def __post_init__(self):
        if min(self.half_extents) <= 0:
            raise InvalidArgumentError("plane extents must be positive")

    @property
    def labels_used(self) -> int:
        return 1 if self.planar else 0

    def intersect(self, o, d):
        R = np.asarray(self.rotation)
        c = np.asarray(self.center, dtype=np.float64)
        n = R[:, 2]
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - o) @ n) / denom
        t = np.where(np.abs(denom) > 1e-15, t, np.inf)
        hit = o + t[..., None] * d
        rel = hit - c
        inside = (np.abs(rel @ R[:, 0]) <= self.half_extents[0]) & (np.abs(rel @ R[:, 1]) <= self.half_extents[1])
        t = np.where(inside & (t > _T_EPS), t, np.inf)
        normal = np.broadcast_to(n, d.shape).copy()
        flip = (d @ n) > 0
        normal[flip] *= -1
        face = np.zeros(t.shape, dtype=np.int64)
        return t, normal, face


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    texture: Texture = field(default_factory=Texture)
    planar: bool = True

    def __post_init__(self):
        if min(self.half_extents) <= 0:
            raise InvalidArgumentError("box extents must be positive")

    @property
    def labels_used(self) -> int:
        return 6 if self.planar else 0

    def intersect(self, o, d):
        R = np.asarray(self.rotation)
        c = np.asarray(self.center, dtype=np.float64)
        h = np.asarray(self.half_extents, dtype=np.float64)
        ol = (o - c) @ R
        dl = d @ R
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dl
            t1 = (-h - ol) * inv
            t2 = (h - ol) * inv
        # rays parallel to a slab: inside gives (-inf, inf), outside gives empty
        par = dl == 0
        inside_par = np.abs(ol) <= h
        t1 = np.where(par, np.where(inside_par, -np.inf, np.inf), t1)
        t2 = np.where(par, np.where(inside_par, np.inf, -np.inf), t2)
        tnear = np.minimum(t1, t2)
        tfar = np.maximum(t1, t2)
        t_enter = tnear.max(axis=-1)
        t_exit = tfar.min(axis=-1)
        axis_enter = tnear.argmax(axis=-1)
        axis_exit = tfar.argmin(axis=-1)
        hit = t_exit >= np.maximum(t_enter, _T_EPS)
        use_exit = t_enter <= _T_EPS
        t = np.where(hit, np.where(use_exit, t_exit, t_enter), np.inf)
        axis = np.where(use_exit, axis_exit, axis_enter)
        dl_axis = np.take_along_axis(dl, axis[..., None], -1)[..., 0]
        sign = np.where(dl_axis > 0, -1.0, 1.0)
        n_local = np.zeros(d.shape)
        np.put_along_axis(n_local, axis[..., None], sign[..., None], -1)
        normal = n_local @ R.T
        face = axis * 2 + (sign > 0)
        return t, normal, face


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    texture: Texture = field(default_factory=Texture)
    planar: bool = False

    def __post_init__(self):
        if self.radius <= 0:
            raise InvalidArgumentError("sphere radius must be positive")

    @property
    def labels_used(self) -> int:
        return 0

    def intersect(self, o, d):
        c = np.asarray(self.center, dtype=np.float64)
        oc = o - c
        a = np.sum(d * d, axis=-1)
        b = np.sum(oc * d, axis=-1)
        cc = np.sum(oc * oc, axis=-1) - self.radius**2
        disc = b * b - a * cc
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = (-b - sq) / a
        t1 = (-b + sq) / a
        t = np.where(t0 > _T_EPS, t0, t1)
        t = np.where(ok & (t > _T_EPS), t, np.inf)
        hit = o + t[..., None] * d
        normal = (hit - c) / self.radius
        flip = np.sum(normal * d, axis=-1) > 0
        normal[flip] *= -1
        return t, normal, np.zeros(t.shape, dtype=np.int64)


@dataclass(frozen=True)
class Scene:
    primitives: tuple
    seed: int = 0
    textureless: bool = False

    def label_offsets(self) -> list[int]:
        offs, nxt = [], 1
        for prim in self.primitives:
            offs.append(nxt)
            nxt += prim.labels_used
        return offs

    def cast(self, origins: np.ndarray, dirs: np.ndarray):
        """Nearest hit along each ray ``o + t d`` with ``t > 0``.

        Returns ``(t, normal, primitive_index, label)``; misses have t = inf,
        index -1 and label 0. Normals face the incoming ray.
        """
        shape = dirs.shape[:-1]
        best = np.full(shape, np.inf)
        normal = np.zeros(shape + (3,))
        index = np.full(shape, -1, dtype=np.int64)
        label = np.zeros(shape, dtype=np.int64)
        o = np.broadcast_to(origins, dirs.shape)
        for i, (prim, off) in enumerate(zip(self.primitives, self.label_offsets())):
            t, n, face = prim.intersect(o, dirs)
            closer = t < best
            best = np.where(closer, t, best)
            normal = np.where(closer[..., None], n, normal)
            index = np.where(closer, i, index)
            lab = off + face if prim.labels_used else np.zeros_like(face)
            label = np.where(closer, lab, label)
        return best, normal, index, label

    def shade(self, points: np.ndarray, index: np.ndarray) -> np.ndarray:
        out = np.zeros(points.shape[:-1] + (3,))
        for i, prim in enumerate(self.primitives):
            sel = index == i
            if sel.any():
                out[sel] = prim.texture(points[sel], self.textureless)
        return out


@dataclass
class Render:
    color: Image
    depth: DepthMap
    normals: NormalMap
    plane_masks: PlaneMaskSet


def _world_rays(K: CameraIntrinsics, pose: Pose, xs, ys):
    d_cam = np.stack([(xs - K.cx) / K.fx, (ys - K.cy) / K.fy, np.ones_like(xs)], axis=-1)
    d_world = d_cam @ pose.rotation  # R^T d for row vectors
    return pose.center, d_world


def raycast_depth(scene: Scene, K: CameraIntrinsics, pose: Pose, xs, ys):
    """Camera-frame depth of the nearest surface at arbitrary pixel positions."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    o, d = _world_rays(K, pose, xs, ys)
    t, _, idx, _ = scene.cast(o, d)
    return np.where(idx >= 0, t, np.inf)


def render(scene: Scene, K: CameraIntrinsics, pose: Pose) -> Render:
    """Exact per-pixel render; ``pose`` is world-to-camera.

    Because the camera rays have unit z in the camera frame, the hit parameter
    is the depth itself. Background pixels are invalid in depth and normals
    and black in color.
    """
    xs, ys = K.pixel_grid()
    o, d = _world_rays(K, pose, xs, ys)
    t, n_world, idx, label = scene.cast(o, d)
    hit = idx >= 0
    pts = o + np.where(hit, t, 0.0)[..., None] * d
    color = np.where(hit[..., None], scene.shade(pts, idx), 0.0)
    depth = DepthMap(np.where(hit, t, 0.0), hit)
    n_cam = n_world @ pose.rotation.T
    n_cam = np.where(hit[..., None], n_cam / np.linalg.norm(np.where(hit[..., None], n_cam, 1.0), axis=-1, keepdims=True), 0.0)
    return Render(
        color=Image(color),
        depth=depth,
        normals=NormalMap(n_cam, hit),
        plane_masks=PlaneMaskSet(np.where(hit, label, 0)),
    )


def visibility_ground_truth(scene: Scene, K: CameraIntrinsics, ref_pose: Pose, src_poses) -> np.ndarray:
    """Reference pixels whose surface point no source view can see.

    A point is unseen by a source when it projects outside ``[0, W-1] x
    [0, H-1]`` there (with 1e-6 px slack), or when the ray from that source camera meets another
    surface more than 1e-6 m before it. Background pixels are never occluded.
    """
    src_poses = list(src_poses)
    if not src_poses:
        raise InvalidArgumentError("need at least one source pose")
    ref = render(scene, K, ref_pose)
    valid = ref.depth.valid
    xs, ys = K.pixel_grid()
    o, d = _world_rays(K, ref_pose, xs, ys)
    X = o + ref.depth.depth[..., None] * d
    occluded = valid.copy()
    for pose in src_poses:
        cam = pose.apply(X)
        z = cam[..., 2]
        front = z > 0
        zs = np.where(front, z, 1.0)
        u = K.fx * cam[..., 0] / zs + K.cx
        v = K.fy * cam[..., 1] / zs + K.cy
        lo, hi_u, hi_v = -_BOUNDS_SLACK, K.width - 1 + _BOUNDS_SLACK, K.height - 1 + _BOUNDS_SLACK
        inside = front & (u >= lo) & (u <= hi_u) & (v >= lo) & (v <= hi_v)
        C = pose.center
        seg = X - C
        length = np.linalg.norm(seg, axis=-1)
        t, _, _, _ = scene.cast(C, seg)
        hidden = (1.0 - t) * length > _HIDDEN_MARGIN
        seen = valid & inside & ~hidden
        occluded &= ~seen
    return occluded


# ---------------------------------------------------------------- scene files


def _texture_from(spec, default_seed: int) -> Texture:
    if spec is None:
        return Texture(seed=default_seed)
    if isinstance(spec, int):
        return Texture(seed=spec)
    spec = dict(spec)
    spec.setdefault("seed", default_seed)
    if "tint" in spec:
        spec["tint"] = tuple(spec["tint"])
    return Texture(**spec)


def primitive_from_dict(spec: dict, default_seed: int):
    kind = spec.get("type")
    tex = _texture_from(spec.get("texture"), default_seed)
    planar = spec.get("planar", kind in ("plane", "box"))
    if kind == "plane":
        return Plane(tuple(spec["center"]), tuple(spec["half_extents"]), _rotation(spec.get("rotation")), tex, planar)
    if kind == "box":
        return Box(tuple(spec["center"]), tuple(spec["half_extents"]), _rotation(spec.get("rotation")), tex, planar)
    if kind == "sphere":
        return Sphere(tuple(spec["center"]), float(spec["radius"]), tex)
    raise DataError(f"unknown primitive type {kind!r}")


def scene_from_dict(data: dict) -> Scene:
    seed = int(data.get("seed", 0))
    prims = [primitive_from_dict(p, seed * 1000 + i) for i, p in enumerate(data.get("primitives", []))]
    bg = data.get("background")
    if bg:
        prims.append(primitive_from_dict({**bg, "planar": bg.get("planar", False)}, seed * 1000 + 999))
    return Scene(tuple(prims), seed, bool(data.get("textureless", False)))


def load_scene(path):
    """Read a scene JSON file; returns ``(scene, camera_or_None, trajectory)``."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read scene file {path}: {exc}") from exc
    scene = scene_from_dict(data)
    cam = data.get("camera")
    K = CameraIntrinsics(**cam) if cam else None
    poses = trajectory_from_dict(data.get("trajectory")) if data.get("trajectory") else []
    return scene, K, poses


def trajectory_from_dict(spec) -> list[Pose]:
    """World-to-camera poses from an explicit list or a parametric path.

    ``{"type": "line", "start": [...], "end": [...], "target": [...], "frames": n}``
    moves the eye linearly while looking at ``target``;
    ``{"type": "orbit", "center": [...], "radius": r, "height": h, "frames": n,
    "arc_degrees": a}`` circles ``center`` in the x-z plane.
    Explicit entries are ``{"eye": [...], "target": [...]}`` or
    ``{"rotation": [[...]], "translation": [...]}``.
    """
    if isinstance(spec, list):
        out = []
        for item in spec:
            if "rotation" in item:
                out.append(Pose(item["rotation"], item["translation"]))
            else:
                out.append(Pose.look_at(item["eye"], item["target"], item.get("up", (0, -1, 0))))
        return out
    kind = spec.get("type")
    n = int(spec["frames"])
    up = spec.get("up", (0.0, -1.0, 0.0))
    if kind == "line":
        a = np.asarray(spec["start"], dtype=np.float64)
        b = np.asarray(spec["end"], dtype=np.float64)
        tgt = np.asarray(spec["target"], dtype=np.float64)
        follow = bool(spec.get("follow", False))
        poses = []
        for s in np.linspace(0.0, 1.0, n):
            eye = a + s * (b - a)
            poses.append(Pose.look_at(eye, tgt + (eye - a) if follow else tgt, up))
        return poses
    if kind == "orbit":
        c = np.asarray(spec["center"], dtype=np.float64)
        r = float(spec["radius"])
        hgt = float(spec.get("height", 0.0))
        arc = np.radians(float(spec.get("arc_degrees", 360.0)))
        start = np.radians(float(spec.get("start_degrees", 0.0)))
        end = start + arc if arc < 2 * np.pi else start + arc * (n - 1) / n
        poses = []
        for a in np.linspace(start, end, n):
            eye = c + np.array([r * np.sin(a), hgt, -r * np.cos(a)])
            poses.append(Pose.look_at(eye, c, up))
        return poses
    raise DataError(f"unknown trajectory type {kind!r}")


def write_dataset(scene: Scene, K: CameraIntrinsics, poses, out_dir, noise: float = 0.0, seed: int = 0) -> list[int]:
    """Render every pose into the pipeline's dataset layout.

    ``noise`` adds zero-mean Gaussian intensity noise (clipped to [0, 1]) from
    a generator seeded with ``seed``. Returns the frame ids written.
    """
    from . import io

    out = Path(out_dir)
    for sub in ("color", "depth", "planes"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ids = list(range(len(poses)))
    for fid, pose in zip(ids, poses):
        r = render(scene, K, pose)
        color = r.color
        if noise > 0:
            color = Image(np.clip(color.data + rng.normal(0.0, noise, color.data.shape), 0.0, 1.0))
        io.write_image(out / "color" / f"{fid:06d}.png", color)
        io.write_pfm(out / "depth" / f"{fid:06d}.pfm", r.depth.depth)
        io.write_labels(out / "planes" / f"{fid:06d}.png", r.plane_masks)
    io.write_trajectory(out / "trajectory.txt", [(fid, K, p) for fid, p in zip(ids, poses)])
    io.write_intrinsics(out / "intrinsics.txt", K)
    return ids


def surface_distance(scene: Scene, points: np.ndarray) -> np.ndarray:
    """Euclidean distance from each point to the nearest primitive surface."""
    p = np.asarray(points, dtype=np.float64)
    best = np.full(p.shape[:-1], np.inf)
    for prim in scene.primitives:
        c = np.asarray(prim.center, dtype=np.float64)
        if isinstance(prim, Sphere):
            d = np.abs(np.linalg.norm(p - c, axis=-1) - prim.radius)
        else:
            R = np.asarray(prim.rotation)
            loc = (p - c) @ R
            if isinstance(prim, Box):
                q = np.abs(loc) - np.asarray(prim.half_extents, dtype=np.float64)
                outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
                d = np.abs(outside + np.minimum(q.max(axis=-1), 0.0))
            else:
                h = np.asarray(prim.half_extents, dtype=np.float64)
                dx = np.maximum(np.abs(loc[..., :2]) - h, 0.0)
                d = np.sqrt(np.sum(dx * dx, axis=-1) + loc[..., 2] ** 2)
        best = np.minimum(best, d)
    return best
