"""Readers and writers for the on-disk formats: PFM, PNG, PLY, trajectories."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import DataError
from .geometry import CameraIntrinsics, DepthMap, Image, Pose
from .normals import NormalMap, PlaneMaskSet
from .tsdf import TriangleMesh

# ------------------------------------------------------------------------ PFM


def write_pfm(path, data: np.ndarray) -> None:
    """Little-endian PFM (scale -1.0). ``data`` is (H, W) or (H, W, 3); rows
    are written bottom-to-top as the format requires."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim == 2:
        tag = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM holds 1 or 3 channels, got shape {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(tag + b"\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", raw)
    if not m:
        raise DataError(f"{path}: not a PFM file")
    tag, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    ch = 3 if tag == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    body = raw[m.end() :]
    n = w * h * ch
    if len(body) < 4 * n:
        raise DataError(f"{path}: truncated PFM payload")
    arr = np.frombuffer(body[: 4 * n], dtype=dtype).reshape((h, w, ch) if ch == 3 else (h, w))
    return arr[::-1].astype(np.float32)


# ------------------------------------------------------------------------ PNG


def read_image(path) -> Image:
    """8- or 16-bit PNG normalized to [0, 1]; palettes and alpha are dropped."""
    try:
        pil = PILImage.open(path)
        pil.load()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if pil.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(pil, dtype=np.float64) / 65535.0
    else:
        if pil.mode not in ("L", "RGB"):
            pil = pil.convert("RGB")
        arr = np.asarray(pil, dtype=np.float64) / 255.0
    return Image(np.clip(arr, 0.0, 1.0))


def write_image(path, image: Image, bits: int = 8) -> None:
    data = image.data
    if bits == 16:
        if image.channels != 1:
            raise ValueError("16-bit output supports single-channel images only")
        arr = np.rint(data[..., 0] * 65535.0).astype(np.uint16)
        PILImage.fromarray(arr).save(path)
        return
    arr = np.rint(data * 255.0).astype(np.uint8)
    PILImage.fromarray(arr[..., 0] if image.channels == 1 else arr).save(path)


def write_mask(path, mask: np.ndarray) -> None:
    PILImage.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def read_mask(path) -> np.ndarray:
    try:
        return np.asarray(PILImage.open(path).convert("L")) > 127
    except OSError as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc


def write_labels(path, masks: PlaneMaskSet) -> None:
    if masks.labels.size and masks.labels.max() > 65535:
        raise ValueError("more plane labels than a 16-bit PNG can hold")
    PILImage.fromarray(masks.labels.astype(np.uint16)).save(path)


def read_labels(path) -> PlaneMaskSet:
    try:
        pil = PILImage.open(path)
        pil.load()
    except OSError as exc:
        raise DataError(f"cannot read plane mask {path}: {exc}") from exc
    arr = np.asarray(pil)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return PlaneMaskSet(arr.astype(np.int64))


def write_normals_png(path, normals: NormalMap) -> None:
    """Normals mapped from [-1, 1]^3 to [0, 255]^3; invalid pixels are black."""
    rgb = np.rint((normals.normals + 1.0) * 127.5)
    rgb = np.where(normals.valid[..., None], rgb, 0).astype(np.uint8)
    PILImage.fromarray(rgb).save(path)


def write_occlusion_png(path, p: np.ndarray) -> None:
    PILImage.fromarray(np.rint(np.clip(p, 0, 1) * 255).astype(np.uint8)).save(path)


# ---------------------------------------------------------- typed map helpers


def save_depth(stem, depth: DepthMap) -> None:
    """``<stem>.pfm`` (meters, invalid = 0) plus ``<stem>_mask.png``."""
    stem = str(stem)
    write_pfm(stem + ".pfm", depth.depth)
    write_mask(stem + "_mask.png", depth.valid)


def load_depth(path, mask_path=None) -> DepthMap:
    d = read_pfm(path).astype(np.float64)
    if d.ndim != 2:
        raise DataError(f"{path}: depth PFM must have one channel")
    if mask_path is None:
        cand = Path(str(path)[: -len(".pfm")] + "_mask.png") if str(path).endswith(".pfm") else None
        mask_path = cand if cand is not None and cand.exists() else None
    valid = np.isfinite(d) & (d > 0)
    if mask_path is not None:
        valid &= read_mask(mask_path)
    return DepthMap(np.where(valid, d, 0.0), valid)


def save_normals(stem, normals: NormalMap) -> None:
    stem = str(stem)
    write_pfm(stem + ".pfm", normals.normals)
    write_normals_png(stem + ".png", normals)


def load_normals(path) -> NormalMap:
    n = read_pfm(path).astype(np.float64)
    if n.ndim != 3:
        raise DataError(f"{path}: normal PFM must have three channels")
    norm = np.linalg.norm(n, axis=-1)
    valid = norm > 0.5
    n = np.where(valid[..., None], n / np.where(valid, norm, 1.0)[..., None], 0.0)
    return NormalMap(n, valid)


def save_occlusion(stem, occ) -> None:
    """PFM with P on valid pixels and -1 elsewhere, plus an 8-bit preview."""
    stem = str(stem)
    write_pfm(stem + ".pfm", np.where(occ.valid, occ.p, -1.0))
    write_occlusion_png(stem + ".png", occ.p)


def load_occlusion(path):
    from .occlusion import OcclusionMap

    p = read_pfm(path).astype(np.float64)
    valid = p >= 0
    return OcclusionMap(np.where(valid, p, 0.0), valid)


# ------------------------------------------------------------------------ PLY


def write_ply(path, mesh: TriangleMesh) -> None:
    """Binary little-endian PLY with float xyz, uchar rgb vertices and
    uchar-count int32 index faces."""
    nv, nf = len(mesh.vertices), len(mesh.faces)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {nv}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        f"element face {nf}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    vdt = np.dtype([("xyz", "<f4", 3), ("rgb", "u1", 3)])
    verts = np.empty(nv, dtype=vdt)
    verts["xyz"] = mesh.vertices
    verts["rgb"] = np.rint(np.clip(mesh.colors, 0, 1) * 255)
    fdt = np.dtype([("n", "u1"), ("idx", "<i4", 3)])
    faces = np.empty(nf, dtype=fdt)
    faces["n"] = 3
    faces["idx"] = mesh.faces
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(verts.tobytes())
        fh.write(faces.tobytes())


def read_ply(path) -> TriangleMesh:
    """Reader for the layout produced by :func:`write_ply`."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise DataError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii")
    if "binary_little_endian" not in header:
        raise DataError(f"{path}: only binary little-endian PLY is supported")
    nv = int(re.search(r"element vertex (\d+)", header).group(1))
    nf = int(re.search(r"element face (\d+)", header).group(1))
    body = raw[end + len("end_header\n") :]
    vdt = np.dtype([("xyz", "<f4", 3), ("rgb", "u1", 3)])
    fdt = np.dtype([("n", "u1"), ("idx", "<i4", 3)])
    if len(body) != nv * vdt.itemsize + nf * fdt.itemsize:
        raise DataError(f"{path}: unexpected PLY payload size")
    verts = np.frombuffer(body[: nv * vdt.itemsize], dtype=vdt)
    faces = np.frombuffer(body[nv * vdt.itemsize :], dtype=fdt)
    if nf and np.any(faces["n"] != 3):
        raise DataError(f"{path}: only triangle faces are supported")
    return TriangleMesh(
        verts["xyz"].astype(np.float64),
        faces["idx"].astype(np.int64),
        verts["rgb"].astype(np.float64) / 255.0,
    )


# ---------------------------------------------------- trajectory / intrinsics


def _snap_rotation(R: np.ndarray) -> np.ndarray:
    """Nearest rotation to a matrix that was stored with limited precision."""
    u, _, vt = np.linalg.svd(R)
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))])
    return u @ S @ vt


def read_trajectory(path) -> dict:
    """Parse ``frame_id fx fy cx cy r00..r22 tx ty tz`` lines (world-to-camera).

    Returns ``{frame_id: (fx, fy, cx, cy, Pose)}``. Blank lines and ``#``
    comments are skipped.
    """
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read trajectory {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 17:
            raise DataError(f"{path}:{lineno}: expected 17 fields, got {len(parts)}")
        try:
            fid = int(parts[0])
            vals = np.array([float(p) for p in parts[1:]])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        R = vals[4:13].reshape(3, 3)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-3:
            raise DataError(f"{path}:{lineno}: rotation is not orthonormal")
        R = _snap_rotation(R) if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-12 else R
        out[fid] = (vals[0], vals[1], vals[2], vals[3], Pose(R, vals[13:16]))
    return out


def write_trajectory(path, entries) -> None:
    """``entries``: iterable of ``(frame_id, K, world_pose)``."""
    lines = []
    for fid, K, pose in entries:
        vals = [K.fx, K.fy, K.cx, K.cy, *pose.rotation.ravel(), *pose.translation]
        lines.append(f"{fid:d} " + " ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_intrinsics(path) -> CameraIntrinsics:
    """``fx fy cx cy width height`` on one line."""
    try:
        parts = Path(path).read_text().split()
        fx, fy, cx, cy = (float(p) for p in parts[:4])
        w, h = int(parts[4]), int(parts[5])
    except (OSError, ValueError, IndexError) as exc:
        raise DataError(f"cannot read intrinsics {path}: {exc}") from exc
    return CameraIntrinsics(fx, fy, cx, cy, w, h)


def write_intrinsics(path, K: CameraIntrinsics) -> None:
    Path(path).write_text(f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r} {K.width} {K.height}\n")
