"""Pinhole cameras, rigid poses, plane-induced homographies and image warping.

Conventions used throughout the package:

* Pixel centers sit at integer coordinates; ``u = (x, y, 1)`` with ``x`` the
  column and ``y`` the row.
* Camera frame is x right, y down, z forward. Depth means camera-frame z.
* A :class:`Pose` maps points from one frame into another,
  ``X_dst = R @ X_src + t``. Poses handed to the plane sweep are
  source-relative-to-reference (reference-camera points into the source
  camera); trajectory files store world-to-camera poses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

_ORTHO_TOL = 1e-9


def _readonly(arr, dtype=np.float64) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidArgumentError("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgumentError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 1 or self.height < 1:
            raise InvalidArgumentError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidArgumentError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def inverse_matrix(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(xs, ys)`` arrays of shape (H, W) with pixel-center coordinates."""
        ys, xs = np.mgrid[0 : self.height, 0 : self.width]
        return xs.astype(np.float64), ys.astype(np.float64)


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise InvalidArgumentError("pose needs a 3x3 rotation and a 3-vector translation")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidArgumentError("pose must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL:
            raise InvalidArgumentError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise InvalidArgumentError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", _readonly(R))
        object.__setattr__(self, "translation", _readonly(t))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0)) -> "Pose":
        """World-to-camera pose for a camera at ``eye`` looking at ``target``.

        ``up`` is the world direction that should appear toward the top of the
        image; with a y-down camera frame the default (0, -1, 0) keeps world +y
        pointing down the image.
        """
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        down = -np.asarray(up, dtype=np.float64)
        x = np.cross(down, z)
        n = np.linalg.norm(x)
        if n < 1e-12:
            raise InvalidArgumentError("up vector is parallel to the viewing direction")
        x /= n
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(R, -R @ eye)

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def center(self) -> np.ndarray:
        """Origin of the destination frame expressed in the source frame."""
        return -self.rotation.T @ self.translation

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    @staticmethod
    def relative(reference_world: "Pose", source_world: "Pose") -> "Pose":
        """Source-relative-to-reference pose from two world-to-camera poses."""
        return source_world.compose(reference_world.inverse())


@dataclass(frozen=True)
class PlaneSampling:
    d_min: float
    d_max: float
    count: int

    def __post_init__(self):
        if not (np.isfinite(self.d_min) and np.isfinite(self.d_max)):
            raise InvalidArgumentError("depth range must be finite")
        if not 0 < self.d_min < self.d_max:
            raise InvalidArgumentError(f"need 0 < d_min < d_max, got [{self.d_min}, {self.d_max}]")
        if int(self.count) != self.count or self.count < 2:
            raise InvalidArgumentError("at least two depth planes are required")

    @property
    def spacing(self) -> float:
        return (self.d_max - self.d_min) / (self.count - 1)

    @property
    def depths(self) -> np.ndarray:
        n = np.arange(self.count, dtype=np.float64)
        return self.d_min + n * (self.d_max - self.d_min) / (self.count - 1)

    def depth(self, n: int) -> float:
        return self.d_min + n * (self.d_max - self.d_min) / (self.count - 1)


@dataclass(frozen=True)
class Image:
    """Intensities in [0, 1], stored as an (H, W, C) array with C in {1, 3}."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim == 2:
            d = d[:, :, None]
        if d.ndim != 3 or d.shape[2] not in (1, 3):
            raise InvalidArgumentError(f"image must be HxW, HxWx1 or HxWx3, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise InvalidArgumentError("image contains non-finite values")
        if d.size and (d.min() < 0.0 or d.max() > 1.0):
            raise InvalidArgumentError("image intensities must lie in [0, 1]")
        object.__setattr__(self, "data", _readonly(d))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    def gray(self) -> np.ndarray:
        return self.data.mean(axis=2)


@dataclass(frozen=True)
class DepthMap:
    depth: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        if d.ndim != 2:
            raise InvalidArgumentError("depth map must be 2-D")
        if self.valid is None:
            v = np.isfinite(d) & (d > 0)
        else:
            v = np.asarray(self.valid, dtype=bool)
            if v.shape != d.shape:
                raise InvalidArgumentError("validity mask shape differs from depth")
        bad = v & ~(np.isfinite(d) & (d > 0))
        if np.any(bad):
            raise InvalidArgumentError("valid pixels must carry finite positive depth")
        d = np.where(v, d, 0.0)
        object.__setattr__(self, "depth", _readonly(d))
        object.__setattr__(self, "valid", _readonly(v, dtype=bool))

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @classmethod
    def invalid(cls, shape) -> "DepthMap":
        return cls(np.zeros(shape), np.zeros(shape, dtype=bool))


def homography_for_plane(K: CameraIntrinsics, pose: Pose, d_n: float) -> np.ndarray:
    """Homography taking reference pixels to source pixels via the plane z = d_n.

    ``pose`` maps reference-camera coordinates into the source camera. The
    returned matrix is ``K (R + t [0, 0, 1/d_n]) K^-1``.
    """
    if not np.isfinite(d_n) or d_n <= 0:
        raise InvalidArgumentError(f"plane depth must be finite and positive, got {d_n}")
    plane = np.outer(pose.translation, np.array([0.0, 0.0, 1.0 / d_n]))
    H = K.matrix @ (pose.rotation + plane) @ K.inverse_matrix
    if not np.all(np.isfinite(H)):
        raise InvalidArgumentError("homography is not finite")
    return H


def sample_bilinear(data: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Bilinearly sample an (H, W, C) array at continuous pixel positions.

    Returns ``(values, inside)`` where ``values`` has shape ``xs.shape + (C,)``
    and ``inside`` flags positions within ``[0, W-1] x [0, H-1]``. Samples
    outside are returned as zero.
    """
    h, w = data.shape[:2]
    inside = np.isfinite(xs) & np.isfinite(ys)
    inside &= (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    x = np.where(inside, xs, 0.0)
    y = np.where(inside, ys, 0.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    ax = (x - x0)[..., None]
    ay = (y - y0)[..., None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    out = (
        (1 - ax) * (1 - ay) * data[y0, x0]
        + ax * (1 - ay) * data[y0, x1]
        + (1 - ax) * ay * data[y1, x0]
        + ax * ay * data[y1, x1]
    )
    out = np.where(inside[..., None], out, 0.0)
    return out, inside


def apply_homography(H: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Map pixel coordinates through ``H`` and dehomogenize."""
    u = H[0, 0] * xs + H[0, 1] * ys + H[0, 2]
    v = H[1, 0] * xs + H[1, 1] * ys + H[1, 2]
    w = H[2, 0] * xs + H[2, 1] * ys + H[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = w > 0
        u = np.where(ok, u / np.where(ok, w, 1.0), np.nan)
        v = np.where(ok, v / np.where(ok, w, 1.0), np.nan)
    return u, v


def _check_homography(H) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.shape != (3, 3) or not np.all(np.isfinite(H)):
        raise InvalidArgumentError("homography must be a finite 3x3 matrix")
    if np.linalg.cond(H) > 1e12:
        raise InvalidArgumentError("homography is singular")
    return H


def warp_to_reference_plane(source: Image, H: np.ndarray, shape=None):
    """Resample ``source`` into the reference frame through homography ``H``.

    Output pixel ``u`` takes the bilinear sample of ``source`` at ``H u``.
    ``shape`` is the reference (H, W); defaults to the source size.
    Returns ``(warped, coverage)``; uncovered pixels hold zero and are flagged
    false in ``coverage``.
    """
    H = _check_homography(H)
    h, w = shape if shape is not None else source.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    u, v = apply_homography(H, xs, ys)
    values, coverage = sample_bilinear(source.data, u, v)
    return Image(values), coverage


def backproject(pixels, depth, K: CameraIntrinsics) -> np.ndarray:
    """Lift pixels (..., 2) with depths (...) to camera-frame points (..., 3)."""
    q = np.asarray(pixels, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    x = (q[..., 0] - K.cx) / K.fx * d
    y = (q[..., 1] - K.cy) / K.fy * d
    return np.stack([x, y, d * np.ones_like(x)], axis=-1)


def project(points, K: CameraIntrinsics, pose: Pose | None = None):
    """Project points (..., 3) into the camera.

    ``pose`` maps the points' frame into the camera frame (identity when
    omitted). Returns ``(pixels, depth, in_front)``; points with depth <= 0
    get NaN pixel coordinates and ``in_front`` false.
    """
    p = np.asarray(points, dtype=np.float64)
    if pose is not None:
        p = pose.apply(p)
    z = p[..., 2]
    in_front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(in_front, z, 1.0)
        x = np.where(in_front, K.fx * p[..., 0] / safe + K.cx, np.nan)
        y = np.where(in_front, K.fy * p[..., 1] / safe + K.cy, np.nan)
    return np.stack([x, y], axis=-1), z, in_front


def camera_rays(K: CameraIntrinsics) -> np.ndarray:
    """Per-pixel rays ``K^-1 u`` (unit z component), shape (H, W, 3)."""
    xs, ys = K.pixel_grid()
    return np.stack(
        [(xs - K.cx) / K.fx, (ys - K.cy) / K.fy, np.ones_like(xs)], axis=-1
    )


def depth_to_points(depth: DepthMap, K: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points (H, W, 3) for every pixel (invalid pixels give z = 0)."""
    return camera_rays(K) * depth.depth[..., None]
