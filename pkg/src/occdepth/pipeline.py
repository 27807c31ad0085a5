"""End-to-end driver: frame windowing, per-pair sweeps, refinement,
evaluation and occlusion-weighted fusion over a dataset directory.

Dataset layout::

    color/%06d.png      reference and source images
    depth/%06d.pfm      optional ground-truth depth (0 or non-finite = invalid)
    planes/%06d.png     optional 16-bit plane labels
    trajectory.txt      frame_id fx fy cx cy r00..r22 tx ty tz (world-to-camera)
    intrinsics.txt      fx fy cx cy width height (optional if the trajectory
                        and the images agree)
"""

from __future__ import annotations

import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .cost_volume import aggregate_cost_volume, average_cost_volumes, build_cost_volume
from .depth import ARGMIN, SOFT_ARGMIN, DepthExtractionConfig, extract_depth
from .errors import ConfigurationError, DataError, EmptyDomainError, InvalidArgumentError
from .geometry import CameraIntrinsics, DepthMap, Image, PlaneSampling, Pose, backproject
from .losses import (
    DepthMetrics,
    LossConfig,
    NormalMetrics,
    depth_metrics,
    metrics_table,
    normal_metrics,
    occlusion_aware_loss,
    total_initial_loss,
)
from .normals import NormalMap, PlaneMaskSet, build_cnm, normals_from_depth
from .occlusion import OcclusionMap, RefineConfig, occlusion_probability, refine_depth
from .tsdf import TriangleMesh, TsdfVolume, extract_mesh

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

MIDDLE = "middle"
LAST = "last"


@dataclass(frozen=True)
class PipelineConfig:
    """Flat run configuration; every field can be set from a TOML file or
    overridden on the command line by name."""

    frame_interval: int = 10
    window: int = 2  # number of source views N
    reference: str = MIDDLE
    window_stride: int | None = None  # frames between references; None = frame_interval
    d_min: float = 0.5
    d_max: float = 10.0
    planes: int = 64
    aggregation_radius: int = 4
    sigma_color: float = 0.1
    extraction_mode: str = ARGMIN
    softness: float = 0.01
    subplane: bool = True
    tau_rel: float = 0.05
    kappa: float = 0.5
    p_threshold: float = 0.5
    lam: float = 1.0
    alpha: float = 0.2
    beta: float = 1.0
    normal_radius: int = 2
    max_relative_jump: float = 0.05
    voxel_size: float = 0.02
    trunc: float = 0.08
    min_weight: float = 1.0
    bounds_min: tuple | None = None
    bounds_max: tuple | None = None
    max_voxels: int = 256**3
    occlusion_weighting: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.frame_interval < 1:
            raise ConfigurationError("frame_interval must be at least 1")
        if self.window < 1:
            raise ConfigurationError("window (number of source views) must be at least 1")
        if self.reference not in (MIDDLE, LAST):
            raise ConfigurationError(f"reference must be {MIDDLE!r} or {LAST!r}, got {self.reference!r}")
        if self.window_stride is not None and self.window_stride < 1:
            raise ConfigurationError("window_stride must be at least 1")
        if self.threads < 1:
            raise ConfigurationError("threads must be at least 1")
        if (self.bounds_min is None) != (self.bounds_max is None):
            raise ConfigurationError("bounds_min and bounds_max must be given together")
        try:
            self.sampling, self.loss, self.refine, self.extraction  # noqa: B018  (validates)
        except InvalidArgumentError as exc:
            raise ConfigurationError(str(exc)) from exc

    @property
    def sampling(self) -> PlaneSampling:
        return PlaneSampling(self.d_min, self.d_max, self.planes)

    @property
    def extraction(self) -> DepthExtractionConfig:
        return DepthExtractionConfig(self.extraction_mode, self.softness, self.subplane)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.lam, self.alpha, self.beta)

    @property
    def refine(self) -> RefineConfig:
        return RefineConfig(self.tau_rel, self.kappa, self.p_threshold, self.extraction)

    @property
    def stride(self) -> int:
        return self.window_stride or self.frame_interval

    def reference_slot(self) -> int:
        """Position of the reference inside a window of ``window + 1`` frames."""
        return self.window // 2 if self.reference == MIDDLE else self.window

    def with_overrides(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_mapping(cls, data: dict) -> "PipelineConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for key, value in data.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigurationError(f"unknown configuration key {key!r}")
            kw[key] = _coerce(key, value)
        return cls(**kw)

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "PipelineConfig":
        try:
            data = tomllib.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
        data.update(overrides or {})
        return cls.from_mapping(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_INT_KEYS = {"frame_interval", "window", "window_stride", "planes", "aggregation_radius", "normal_radius", "max_voxels", "threads"}
_BOOL_KEYS = {"subplane", "occlusion_weighting"}
_STR_KEYS = {"reference", "extraction_mode"}
_VEC_KEYS = {"bounds_min", "bounds_max"}


def _coerce(key: str, value):
    """Parse values arriving as TOML scalars or as ``key=value`` strings."""
    try:
        if value is None:
            return None
        if key in _VEC_KEYS:
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            vec = tuple(float(v) for v in value)
            if len(vec) != 3:
                raise ValueError("expected three numbers")
            return vec
        if key in _BOOL_KEYS:
            if isinstance(value, str):
                low = value.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(f"not a boolean: {value!r}")
                return low in ("true", "1", "yes")
            return bool(value)
        if key in _STR_KEYS:
            return str(value)
        if key in _INT_KEYS:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"not an integer: {value!r}")
            return int(value)
        return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad value for {key}: {exc}") from exc


# -------------------------------------------------------------------- dataset


@dataclass
class Frame:
    frame_id: int
    image: Image
    pose: Pose  # world-to-camera
    gt_depth: DepthMap | None = None
    plane_masks: PlaneMaskSet | None = None


class Dataset:
    """Lazy view of a dataset directory; frames load on first access."""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise ConfigurationError(f"dataset directory {self.root} does not exist")
        color_dir = self.root / "color"
        ids = sorted(int(p.stem) for p in color_dir.glob("*.png") if p.stem.isdigit()) if color_dir.is_dir() else []
        if not ids:
            raise ConfigurationError(f"dataset {self.root} contains no color/NNNNNN.png frames")
        self.frame_ids = ids
        traj_path = self.root / "trajectory.txt"
        if not traj_path.exists():
            raise ConfigurationError(f"dataset {self.root} has no trajectory.txt")
        self.trajectory = io.read_trajectory(traj_path)
        self.K = self._intrinsics()

    def _intrinsics(self) -> CameraIntrinsics:
        path = self.root / "intrinsics.txt"
        if path.exists():
            return io.read_intrinsics(path)
        first = self.frame_ids[0]
        if first not in self.trajectory:
            raise ConfigurationError(f"no pose for frame {first} and no intrinsics.txt")
        fx, fy, cx, cy, _ = self.trajectory[first]
        img = io.read_image(self.color_path(first))
        return CameraIntrinsics(fx, fy, cx, cy, img.width, img.height)

    def color_path(self, fid: int) -> Path:
        return self.root / "color" / f"{fid:06d}.png"

    def pose(self, fid: int) -> Pose:
        if fid not in self.trajectory:
            raise ConfigurationError(f"frame {fid} has no pose in trajectory.txt")
        return self.trajectory[fid][4]

    def frame(self, fid: int) -> Frame:
        pose = self.pose(fid)
        image = io.read_image(self.color_path(fid))
        if image.shape != self.K.shape:
            raise DataError(f"frame {fid}: image size {image.shape} differs from intrinsics {self.K.shape}")
        depth_path = self.root / "depth" / f"{fid:06d}.pfm"
        gt = io.load_depth(depth_path) if depth_path.exists() else None
        plane_path = self.root / "planes" / f"{fid:06d}.png"
        masks = io.read_labels(plane_path) if plane_path.exists() else None
        return Frame(fid, image, pose, gt, masks)

    def windows(self, config: PipelineConfig) -> list[list[int]]:
        """Frame ids per window (reference at ``config.reference_slot()``).

        Windows that would reach past either end of the sequence are skipped.
        """
        n = len(self.frame_ids)
        slot = config.reference_slot()
        out = []
        for i in range(0, n, config.stride):
            pos = [i + (j - slot) * config.frame_interval for j in range(config.window + 1)]
            if pos[0] < 0 or pos[-1] >= n:
                log.info("skipping incomplete window at frame %d", self.frame_ids[i])
                continue
            out.append([self.frame_ids[p] for p in pos])
        return out


# --------------------------------------------------------------------- window


@dataclass
class WindowResult:
    reference_id: int
    source_ids: list
    final_depth: DepthMap
    occlusion: OcclusionMap | None
    pair_depths: list
    metrics: dict = field(default_factory=dict)


def sweep_pair(reference: Frame, source: Frame, K: CameraIntrinsics, config: PipelineConfig):
    """Aggregated cost volume and initial depth for one reference/source pair."""
    rel = Pose.relative(reference.pose, source.pose)
    raw = build_cost_volume(reference.image, source.image, K, rel, config.sampling, threads=config.threads)
    agg = aggregate_cost_volume(
        raw, reference.image, config.aggregation_radius, config.sigma_color, threads=config.threads
    )
    return agg, extract_depth(agg, config.extraction)


def run_window(frames, K: CameraIntrinsics, config: PipelineConfig, reference_index: int | None = None) -> WindowResult:
    """Sweep every source against the reference, then refine.

    ``frames`` holds the reference and its sources; by default the reference
    sits at ``config.reference_slot()`` (clamped to the list). With a single
    source no refinement happens and the per-pair depth is the result.
    Metrics are filled in when the reference carries ground-truth depth.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise ConfigurationError("a window needs a reference and at least one source frame")
    for f in frames:
        if f.pose is None:
            raise ConfigurationError(f"frame {f.frame_id} has no pose")
    if reference_index is None:
        reference_index = min(config.reference_slot(), len(frames) - 1)
    ref = frames[reference_index]
    sources = [f for i, f in enumerate(frames) if i != reference_index]
    volumes, pairs = [], []
    for src in sources:
        vol, depth = sweep_pair(ref, src, K, config)
        volumes.append(vol)
        pairs.append(depth)
    if len(pairs) >= 2:
        avg = average_cost_volumes(volumes)
        occ = occlusion_probability(pairs, avg, config.refine)
        final = refine_depth(pairs, avg, occ, config.refine)
    else:
        occ, final = None, pairs[0]
    result = WindowResult(ref.frame_id, [s.frame_id for s in sources], final, occ, pairs)
    if ref.gt_depth is not None:
        result.metrics = window_metrics(result, ref, K, config)
    return result


def _safe(fn, *args):
    try:
        return fn(*args)
    except (EmptyDomainError, InvalidArgumentError) as exc:
        log.warning("metric skipped: %s", exc)
        return None


def window_metrics(result: WindowResult, ref: Frame, K: CameraIntrinsics, config: PipelineConfig) -> dict:
    gt = ref.gt_depth
    nr, jump = config.normal_radius, config.max_relative_jump
    gt_normals = normals_from_depth(gt, K, nr, jump)
    cnm = build_cnm(gt_normals, ref.plane_masks) if ref.plane_masks is not None else gt_normals
    pred_normals = normals_from_depth(result.final_depth, K, nr, jump)
    out = {
        "reference": result.reference_id,
        "sources": result.source_ids,
        "final": _safe(depth_metrics, result.final_depth, gt),
        "pairs": {str(s): _safe(depth_metrics, d, gt) for s, d in zip(result.source_ids, result.pair_depths)},
        "normals": _safe(normal_metrics, pred_normals, cnm),
        "loss_initial": {
            str(s): _safe(total_initial_loss, d, gt, normals_from_depth(d, K, nr, jump), cnm, config.loss)
            for s, d in zip(result.source_ids, result.pair_depths)
        },
    }
    if result.occlusion is not None:
        out["loss_refine"] = _safe(occlusion_aware_loss, result.final_depth, gt, pred_normals, cnm, result.occlusion, config.loss)
    return out


def save_window(result: WindowResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.save_depth(out / "depth_final", result.final_depth)
    for sid, d in zip(result.source_ids, result.pair_depths):
        io.save_depth(out / f"depth_pair_{sid:06d}", d)
    if result.occlusion is not None:
        io.save_occlusion(out / "occlusion", result.occlusion)
    if result.metrics:
        (out / "metrics.json").write_text(_to_json(result.metrics))


def _to_json(obj) -> str:
    def conv(o):
        if isinstance(o, (DepthMetrics, NormalMetrics)):
            return o.to_dict()
        if isinstance(o, dict):
            return {k: conv(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [conv(v) for v in o]
        if isinstance(o, np.generic):
            return o.item()
        return o

    return json.dumps(conv(obj), indent=2, sort_keys=True)


# ------------------------------------------------------------------- sequence


def frustum_bounds(K: CameraIntrinsics, poses, far: float):
    """Axis-aligned box around the camera frusta cut at depth ``far``."""
    corners = np.array([[0, 0], [K.width - 1, 0], [0, K.height - 1], [K.width - 1, K.height - 1]], dtype=np.float64)
    pts = [p.inverse().apply(backproject(corners, np.full(4, far), K)) for p in poses]
    pts += [p.center[None] for p in poses]
    allp = np.concatenate(pts)
    return allp.min(axis=0), allp.max(axis=0)


def plan_volume(config: PipelineConfig, K: CameraIntrinsics, poses) -> TsdfVolume:
    """Allocate the fusion volume after checking the voxel budget."""
    if config.bounds_min is not None:
        lo, hi = np.asarray(config.bounds_min, float), np.asarray(config.bounds_max, float)
    else:
        lo, hi = frustum_bounds(K, poses, config.d_max)
    if np.any(hi <= lo):
        raise ConfigurationError("fusion bounds are empty")
    dims = np.ceil((hi - lo) / config.voxel_size).astype(np.int64) + 1
    count = int(np.prod(dims))
    if count > config.max_voxels:
        raise ConfigurationError(
            f"fusion volume of {dims.tolist()} voxels ({count}) exceeds max_voxels={config.max_voxels}; "
            "set bounds_min/bounds_max or a larger voxel_size"
        )
    if config.trunc < 2 * config.voxel_size:
        raise ConfigurationError("trunc must be at least twice voxel_size")
    return TsdfVolume(lo, config.voxel_size, dims)


@dataclass
class SequenceResult:
    mesh: TriangleMesh
    windows: list  # of WindowResult
    volume: TsdfVolume
    skipped: int = 0


def run_sequence(dataset_dir, config: PipelineConfig, out_dir=None) -> SequenceResult:
    """Slide the window over the sequence, fuse each refined depth with
    weights ``1 - P``, and extract a mesh. Writes artifacts when ``out_dir``
    is given."""
    ds = Dataset(dataset_dir)
    windows = ds.windows(config)
    if not windows:
        raise ConfigurationError(
            f"sequence of {len(ds.frame_ids)} frames is too short for window={config.window} "
            f"at frame_interval={config.frame_interval}"
        )
    slot = config.reference_slot()
    # every pose must exist before any work starts
    for ids in windows:
        for fid in ids:
            ds.pose(fid)
    volume = plan_volume(config, ds.K, [ds.pose(ids[slot]) for ids in windows])

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    cache: dict[int, Frame] = {}
    results = []
    for ids in windows:
        frames = []
        for fid in ids:
            if fid not in cache:
                cache[fid] = ds.frame(fid)
            frames.append(cache[fid])
        keep = set(ids)
        for fid in list(cache):
            if fid not in keep and fid < ids[0]:
                del cache[fid]
        res = run_window(frames, ds.K, config, slot)
        ref = frames[slot]
        occ = res.occlusion if config.occlusion_weighting else None
        volume.integrate(res.final_depth, ref.image, ds.K, ref.pose, config.trunc, occ=occ, threads=config.threads)
        if out is not None:
            save_window(res, out / "windows" / f"{ref.frame_id:06d}")
        results.append(res)
        log.info("window %d fused", ref.frame_id)

    mesh = extract_mesh(volume, config.min_weight)
    if out is not None:
        io.write_ply(out / "mesh.ply", mesh)
        summary = summarize(results, mesh)
        (out / "metrics.json").write_text(_to_json(summary))
        table = metrics_text(results)
        if table:
            (out / "metrics.txt").write_text(table + "\n")
    return SequenceResult(mesh, results, volume)


def summarize(results, mesh: TriangleMesh) -> dict:
    finals = [r.metrics["final"] for r in results if r.metrics.get("final") is not None]
    summary = {
        "windows": [r.metrics or {"reference": r.reference_id, "sources": r.source_ids} for r in results],
        "mesh": {"vertices": int(len(mesh.vertices)), "faces": int(len(mesh.faces)), **mesh.edge_stats()},
    }
    if finals:
        summary["mean_final"] = {k: float(np.mean([getattr(m, k) for m in finals])) for k, _ in DepthMetrics.COLUMNS}
    return summary


def metrics_text(results) -> str:
    rows = {f"{r.reference_id:06d}": r.metrics["final"] for r in results if r.metrics.get("final") is not None}
    return metrics_table(rows, DepthMetrics.COLUMNS) if rows else ""
