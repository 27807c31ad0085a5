"""Surface normals from depth by windowed total least squares, and the
combined normal map (local normals off-plane, region-mean normals on planes)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .geometry import CameraIntrinsics, DepthMap, _readonly, camera_rays

DEFAULT_RADIUS = 2
DEFAULT_MAX_RELATIVE_JUMP = 0.05
_DEGENERATE_EIG_GAP = 1e-12
_CANCELLATION_NORM = 1e-8


@dataclass(frozen=True)
class NormalMap:
    normals: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.normals, dtype=np.float64)
        v = np.asarray(self.valid, dtype=bool)
        if n.ndim != 3 or n.shape[2] != 3 or v.shape != n.shape[:2]:
            raise InvalidArgumentError("normal map must be (H, W, 3) with an (H, W) mask")
        nv = n[v]
        if not np.all(np.isfinite(nv)):
            raise InvalidArgumentError("valid normals must be finite")
        if nv.size and np.max(np.abs(np.linalg.norm(nv, axis=1) - 1.0)) > 1e-6:
            raise InvalidArgumentError("valid normals must have unit length")
        n = np.where(v[..., None], n, 0.0)
        object.__setattr__(self, "normals", _readonly(n))
        object.__setattr__(self, "valid", _readonly(v, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape


@dataclass(frozen=True)
class PlaneMaskSet:
    """Integer labels per pixel: 0 is non-planar, k >= 1 is planar region k."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise InvalidArgumentError("plane labels must be 2-D")
        if not np.issubdtype(lab.dtype, np.integer):
            if not np.all(np.mod(lab, 1) == 0):
                raise InvalidArgumentError("plane labels must be integers")
        if lab.size and lab.min() < 0:
            raise InvalidArgumentError("plane labels must be non-negative")
        object.__setattr__(self, "labels", _readonly(lab, dtype=np.int64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass
class _Fit:
    points: np.ndarray  # (H, W, 3)
    rays: np.ndarray  # (H, W, 3)
    valid_in: np.ndarray  # (H, W)
    mean: np.ndarray  # (H, W, 3)
    eigvals: np.ndarray  # (H, W, 3), ascending, of the unnormalized scatter
    eigvecs: np.ndarray  # (H, W, 3, 3), columns
    sign: np.ndarray  # (H, W), orientation applied to the smallest eigenvector
    valid_out: np.ndarray  # (H, W)
    radius: int


def _windows(radius: int):
    size = 2 * radius + 1
    return [(dy, dx) for dy in range(size) for dx in range(size)]


def _fit_planes(depth: DepthMap, K: CameraIntrinsics, radius: int, max_relative_jump: float) -> _Fit:
    if radius < 1 or int(radius) != radius:
        raise InvalidArgumentError("normal window radius must be an integer >= 1")
    if depth.shape != K.shape:
        raise InvalidArgumentError("depth map does not match the intrinsics size")
    r = int(radius)
    h, w = depth.shape
    rays = camera_rays(K)
    pts = rays * depth.depth[..., None]
    valid = depth.valid
    p_pad = np.pad(pts, ((r, r), (r, r), (0, 0)))
    v_pad = np.pad(valid, r, constant_values=False)
    z_pad = np.pad(depth.depth, r)
    offsets = _windows(r)

    count = np.zeros((h, w))
    total = np.zeros((h, w, 3))
    zmax = np.full((h, w), -np.inf)
    zmin = np.full((h, w), np.inf)
    for dy, dx in offsets:
        vv = v_pad[dy : dy + h, dx : dx + w]
        count += vv
        total += np.where(vv[..., None], p_pad[dy : dy + h, dx : dx + w], 0.0)
        zz = z_pad[dy : dy + h, dx : dx + w]
        zmax = np.where(vv, np.maximum(zmax, zz), zmax)
        zmin = np.where(vv, np.minimum(zmin, zz), zmin)
    mean = total / np.maximum(count, 1.0)[..., None]

    scatter = np.zeros((h, w, 3, 3))
    for dy, dx in offsets:
        vv = v_pad[dy : dy + h, dx : dx + w]
        e = np.where(vv[..., None], p_pad[dy : dy + h, dx : dx + w] - mean, 0.0)
        scatter += e[..., :, None] * e[..., None, :]

    ok = valid & (count >= 3)
    ok &= (zmax - zmin) <= max_relative_jump * depth.depth
    safe = np.where(ok[..., None, None], scatter, np.eye(3))
    evals, evecs = np.linalg.eigh(safe)
    gap = (evals[..., 1] - evals[..., 0]) / np.maximum(count, 1.0)
    ok &= gap > _DEGENERATE_EIG_GAP

    v0 = evecs[..., :, 0]
    facing = np.einsum("hwi,hwi->hw", v0, pts)
    sign = np.where(facing > 0, -1.0, 1.0)
    return _Fit(pts, rays, valid, mean, evals, evecs, sign, ok, r)


def normals_from_depth(
    depth: DepthMap,
    K: CameraIntrinsics,
    radius: int = DEFAULT_RADIUS,
    max_relative_jump: float = DEFAULT_MAX_RELATIVE_JUMP,
) -> NormalMap:
    """Camera-facing unit normals from a plane fit over each pixel's window.

    Valid window pixels are back-projected and the normal is the scatter
    matrix eigenvector of smallest eigenvalue. A pixel is invalid with fewer
    than 3 valid neighbours, a degenerate fit, or a window depth range above
    ``max_relative_jump`` times its own depth.
    """
    fit = _fit_planes(depth, K, radius, max_relative_jump)
    n = fit.eigvecs[..., :, 0] * fit.sign[..., None]
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    return NormalMap(np.where(fit.valid_out[..., None], n, 0.0), fit.valid_out)


def normals_vjp(
    depth: DepthMap,
    K: CameraIntrinsics,
    cotangent: np.ndarray,
    radius: int = DEFAULT_RADIUS,
    max_relative_jump: float = DEFAULT_MAX_RELATIVE_JUMP,
) -> np.ndarray:
    """Pull a per-pixel cotangent ``dL/dn`` (H, W, 3) back to ``dL/ddepth`` (H, W).

    Differentiates the smallest eigenvector of each window's scatter matrix,
    ``dv0 = sum_k v_k (v_k^T dS v0) / (l0 - lk)``, holding the validity masks
    and orientation signs fixed.
    """
    fit = _fit_planes(depth, K, radius, max_relative_jump)
    h, w = depth.shape
    r = fit.radius
    g = np.where(fit.valid_out[..., None], np.asarray(cotangent, dtype=np.float64), 0.0)
    g = g * fit.sign[..., None]
    ev = fit.eigvecs
    lam = fit.eigvals
    v0 = ev[..., :, 0]
    b = np.zeros((h, w, 3))
    for k in (1, 2):
        vk = ev[..., :, k]
        denom = np.where(fit.valid_out, lam[..., 0] - lam[..., k], -1.0)
        ck = np.einsum("hwi,hwi->hw", g, vk) / denom
        b += ck[..., None] * vk

    p_pad = np.pad(fit.points, ((r, r), (r, r), (0, 0)))
    r_pad = np.pad(fit.rays, ((r, r), (r, r), (0, 0)))
    v_pad = np.pad(fit.valid_in, r, constant_values=False)
    grad = np.zeros((h + 2 * r, w + 2 * r))
    for dy, dx in _windows(r):
        vv = v_pad[dy : dy + h, dx : dx + w] & fit.valid_out
        e = p_pad[dy : dy + h, dx : dx + w] - fit.mean
        ray = r_pad[dy : dy + h, dx : dx + w]
        term = np.einsum("hwi,hwi->hw", b, ray) * np.einsum("hwi,hwi->hw", e, v0)
        term += np.einsum("hwi,hwi->hw", b, e) * np.einsum("hwi,hwi->hw", ray, v0)
        grad[dy : dy + h, dx : dx + w] += np.where(vv, term, 0.0)
    return grad[r : r + h, r : r + w]


def build_cnm(local: NormalMap, masks: PlaneMaskSet) -> NormalMap:
    """Combined normal map.

    Non-planar pixels keep their local normal. Each planar region takes the
    normalized mean of its valid local normals at every valid pixel; a region
    with no valid normals, or whose mean nearly cancels, becomes invalid.
    """
    if local.shape != masks.shape:
        raise InvalidArgumentError("normal map and plane masks differ in size")
    labels = masks.labels
    if not np.any(labels):
        return local
    nl = int(labels.max()) + 1
    flat_lab = labels.ravel()
    flat_n = local.normals.reshape(-1, 3)
    flat_v = local.valid.ravel()
    sel = flat_v & (flat_lab > 0)
    lab_sel = flat_lab[sel]
    n_sel = flat_n[sel]

    counts = np.bincount(lab_sel, minlength=nl)
    sums = np.stack([np.bincount(lab_sel, weights=n_sel[:, i], minlength=nl) for i in range(3)], axis=1)
    lo = np.full((nl, 3), np.inf)
    hi = np.full((nl, 3), -np.inf)
    np.minimum.at(lo, lab_sel, n_sel)
    np.maximum.at(hi, lab_sel, n_sel)

    means = sums / np.maximum(counts, 1)[:, None]
    norms = np.linalg.norm(means, axis=1)
    region_ok = (counts > 0) & (norms >= _CANCELLATION_NORM)
    region_n = means / np.where(region_ok, norms, 1.0)[:, None]
    # a region of identical normals keeps that exact vector, so the map is a fixed point
    uniform = region_ok & np.all(lo == hi, axis=1)
    region_n[uniform] = lo[uniform]
    region_ok[0] = True

    planar = labels > 0
    out = np.where(planar[..., None], region_n[labels], local.normals)
    valid = local.valid & region_ok[labels]
    return NormalMap(np.where(valid[..., None], out, 0.0), valid)
