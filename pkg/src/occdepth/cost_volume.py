"""Plane-sweep cost volumes: construction, edge-aware aggregation, averaging.

Volumes are stored plane-major, ``costs[n, y, x]``, so that each depth plane
is a contiguous (H, W) slice. Invalid cells hold 0 in ``costs`` and false in
``valid``; they never enter a mean or an argmin.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, InvalidArgumentError
from .geometry import (
    CameraIntrinsics,
    Image,
    PlaneSampling,
    Pose,
    _readonly,
    homography_for_plane,
    warp_to_reference_plane,
)

DEFAULT_RADIUS = 4
DEFAULT_SIGMA_COLOR = 0.1


@dataclass(frozen=True)
class CostVolume:
    costs: np.ndarray
    valid: np.ndarray
    sampling: PlaneSampling

    def __post_init__(self):
        c = np.asarray(self.costs, dtype=np.float64)
        v = np.asarray(self.valid, dtype=bool)
        if c.ndim != 3 or c.shape != v.shape:
            raise InvalidArgumentError("costs and validity must share a (D, H, W) shape")
        if c.shape[0] != self.sampling.count:
            raise InvalidArgumentError(
                f"volume has {c.shape[0]} planes but sampling declares {self.sampling.count}"
            )
        cv = c[v]
        if not np.all(np.isfinite(cv)) or np.any(cv < 0):
            raise InvalidArgumentError("valid costs must be finite and non-negative")
        c = np.where(v, c, 0.0)
        object.__setattr__(self, "costs", _readonly(c))
        object.__setattr__(self, "valid", _readonly(v, dtype=bool))

    @property
    def planes(self) -> int:
        return self.costs.shape[0]

    @property
    def height(self) -> int:
        return self.costs.shape[1]

    @property
    def width(self) -> int:
        return self.costs.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.costs.shape[1:]


def _chunks(n: int, parts: int) -> list[range]:
    parts = max(1, min(parts, n))
    bounds = np.linspace(0, n, parts + 1).astype(int)
    return [range(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _run_chunked(fn, n: int, threads: int) -> None:
    if threads <= 1:
        fn(range(n))
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(fn, _chunks(n, threads)))


def _box3(arr: np.ndarray, ok: np.ndarray):
    """3x3 mean of ``arr`` and the all-valid flag of the 3x3 support."""
    h, w = arr.shape
    a = np.pad(arr, 1)
    m = np.pad(ok, 1, constant_values=False)
    total = np.zeros((h, w))
    good = np.ones((h, w), dtype=bool)
    for dy in range(3):
        for dx in range(3):
            total += a[dy : dy + h, dx : dx + w]
            good &= m[dy : dy + h, dx : dx + w]
    return total / 9.0, good


def build_cost_volume(
    reference: Image,
    source: Image,
    K: CameraIntrinsics,
    pose: Pose,
    sampling: PlaneSampling,
    threads: int = 1,
) -> CostVolume:
    """Photometric cost of every reference pixel against every depth plane.

    ``cost(q, n)`` is the 3x3-patch mean, over pixels and channels, of
    ``|reference - warp(source, H(d_n))|``. A cell is invalid when any sample of
    its patch falls outside the warped coverage or the reference image.
    """
    if reference.shape != source.shape or reference.channels != source.channels:
        raise InvalidArgumentError(
            f"image sizes differ: {reference.data.shape} vs {source.data.shape}"
        )
    if reference.shape != K.shape:
        raise InvalidArgumentError("intrinsics do not match the image size")
    D = sampling.count
    h, w = reference.shape
    costs = np.zeros((D, h, w))
    valid = np.zeros((D, h, w), dtype=bool)
    depths = sampling.depths
    ref = reference.data

    def work(planes):
        for n in planes:
            H = homography_for_plane(K, pose, depths[n])
            warped, cover = warp_to_reference_plane(source, H)
            diff = np.abs(ref - warped.data).mean(axis=2)
            diff = np.where(cover, diff, 0.0)
            costs[n], valid[n] = _box3(diff, cover)

    _run_chunked(work, D, threads)
    return CostVolume(costs, valid, sampling)


def aggregate_cost_volume(
    raw: CostVolume,
    guide: Image,
    radius: int = DEFAULT_RADIUS,
    sigma_color: float = DEFAULT_SIGMA_COLOR,
    threads: int = 1,
) -> CostVolume:
    """Cross-bilateral filtering of each cost slice, guided by ``guide``.

    Weights are ``exp(-|g(q) - g(p)|^2 / (2 sigma^2))`` over the
    ``(2r+1)^2`` window, renormalized over valid cells only.
    """
    if guide.shape != raw.shape:
        raise InvalidArgumentError("guide image must match the volume slice size")
    if radius < 0 or int(radius) != radius:
        raise InvalidArgumentError("radius must be a non-negative integer")
    if not sigma_color > 0:
        raise InvalidArgumentError("sigma_color must be positive")
    r = int(radius)
    if r == 0:
        return raw
    h, w = raw.shape
    g = np.pad(guide.data, ((r, r), (r, r), (0, 0)), mode="edge")
    center = guide.data
    offsets = [(dy, dx) for dy in range(2 * r + 1) for dx in range(2 * r + 1)]
    weights = []
    for dy, dx in offsets:
        diff = g[dy : dy + h, dx : dx + w] - center
        weights.append(np.exp(-np.sum(diff * diff, axis=2) / (2.0 * sigma_color**2)))

    c_pad = np.pad(raw.costs, ((0, 0), (r, r), (r, r)))
    v_pad = np.pad(raw.valid, ((0, 0), (r, r), (r, r)), constant_values=False)
    out = np.zeros(raw.costs.shape)
    ok = np.zeros(raw.costs.shape, dtype=bool)

    def work(planes):
        sl = slice(planes.start, planes.stop)
        num = np.zeros((len(planes), h, w))
        den = np.zeros((len(planes), h, w))
        for (dy, dx), wt in zip(offsets, weights):
            vv = v_pad[sl, dy : dy + h, dx : dx + w]
            wv = np.where(vv, wt, 0.0)
            num += wv * c_pad[sl, dy : dy + h, dx : dx + w]
            den += wv
        good = den > 0
        out[sl] = np.where(good, num / np.where(good, den, 1.0), 0.0)
        ok[sl] = good

    _run_chunked(work, raw.planes, threads)
    return CostVolume(out, ok, raw.sampling)


def average_cost_volumes(volumes) -> CostVolume:
    """Per-cell mean over the volumes in which the cell is valid."""
    volumes = list(volumes)
    if not volumes:
        raise InvalidArgumentError("need at least one cost volume")
    first = volumes[0]
    if len(volumes) == 1:
        return first
    for v in volumes[1:]:
        if v.costs.shape != first.costs.shape or v.sampling != first.sampling:
            raise InvalidArgumentError("cost volumes differ in dimensions or sampling")
    total = np.zeros(first.costs.shape)
    count = np.zeros(first.costs.shape)
    for v in volumes:
        total += np.where(v.valid, v.costs, 0.0)
        count += v.valid
    ok = count > 0
    return CostVolume(np.where(ok, total / np.where(ok, count, 1.0), 0.0), ok, first.sampling)


def save_volume(path, volume: CostVolume) -> None:
    """Write a JSON header line followed by little-endian float32 costs.

    Cells are laid out x-fastest, then y, then plane. Invalid cells are NaN.
    """
    header = {
        "width": volume.width,
        "height": volume.height,
        "planes": volume.planes,
        "d_min": volume.sampling.d_min,
        "d_max": volume.sampling.d_max,
        "dtype": "<f4",
        "order": "plane,row,col",
    }
    data = np.where(volume.valid, volume.costs, np.nan).astype("<f4")
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def load_volume(path) -> CostVolume:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataError(f"{path}: missing volume header")
    try:
        header = json.loads(raw[:nl].decode("ascii"))
        shape = (header["planes"], header["height"], header["width"])
        sampling = PlaneSampling(header["d_min"], header["d_max"], header["planes"])
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}: bad volume header ({exc})") from exc
    body = raw[nl + 1 :]
    if len(body) != 4 * int(np.prod(shape)):
        raise DataError(f"{path}: payload size does not match header")
    data = np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float64)
    ok = np.isfinite(data)
    return CostVolume(np.where(ok, data, 0.0), ok, sampling)
