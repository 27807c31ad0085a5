"""Command-line entry point: ``occdepth <subcommand> ...``.

Exit codes: 0 success, 2 configuration/argument error, 3 data error.
Every subcommand prints a JSON document on stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .cost_volume import average_cost_volumes, save_volume
from .errors import ConfigurationError, DataError, EmptyDomainError, InvalidArgumentError
from .losses import DepthMetrics, NormalMetrics, depth_metrics, metrics_table, normal_metrics
from .normals import build_cnm, normals_from_depth
from .pipeline import (
    Dataset,
    PipelineConfig,
    _to_json,
    plan_volume,
    run_sequence,
    run_window,
    save_window,
    summarize,
    sweep_pair,
)
from .synth import load_scene, write_dataset
from .tsdf import extract_mesh

EXIT_CONFIG = 2
EXIT_DATA = 3

log = logging.getLogger("occdepth")


def _emit(obj) -> None:
    print(_to_json(obj))


def _config(args) -> PipelineConfig:
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.config:
        return PipelineConfig.from_file(args.config, overrides)
    return PipelineConfig.from_mapping(overrides)


def _window_frames(args, ds: Dataset):
    ids = [args.ref] + list(args.src)
    return [ds.frame(fid) for fid in ids]


# ----------------------------------------------------------------- commands


def cmd_sweep(args) -> int:
    cfg = _config(args)
    ds = Dataset(args.dataset)
    ref, *sources = _window_frames(args, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {"reference": ref.frame_id, "pairs": {}}
    volumes = []
    for src in sources:
        vol, depth = sweep_pair(ref, src, ds.K, cfg)
        volumes.append(vol)
        io.save_depth(out / f"depth_pair_{src.frame_id:06d}", depth)
        if args.dump_volume:
            save_volume(out / f"volume_{src.frame_id:06d}.bin", vol)
        entry = {"valid_pixels": int(depth.valid.sum())}
        if ref.gt_depth is not None:
            entry["metrics"] = depth_metrics(depth, ref.gt_depth)
        report["pairs"][str(src.frame_id)] = entry
    if args.dump_volume and len(volumes) > 1:
        save_volume(out / "volume_average.bin", average_cost_volumes(volumes))
    _emit(report)
    return 0


def cmd_refine(args) -> int:
    cfg = _config(args)
    ds = Dataset(args.dataset)
    frames = _window_frames(args, ds)
    if len(frames) < 3:
        raise ConfigurationError("refine needs at least two --src frames")
    res = run_window(frames, ds.K, cfg, reference_index=0)
    save_window(res, args.out)
    _emit({"reference": res.reference_id, "sources": res.source_ids, "metrics": res.metrics})
    return 0


def cmd_cnm(args) -> int:
    K = io.read_intrinsics(args.intrinsics)
    depth = io.load_depth(args.depth)
    if depth.shape != K.shape:
        raise DataError("depth map does not match the intrinsics")
    local = normals_from_depth(depth, K, args.radius, args.max_relative_jump)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.save_normals(str(out) + "_local", local)
    report = {"local_valid": int(local.valid.sum())}
    if args.planes:
        masks = io.read_labels(args.planes)
        cnm = build_cnm(local, masks)
        io.save_normals(str(out) + "_cnm", cnm)
        report["cnm_valid"] = int(cnm.valid.sum())
        report["regions"] = int(len(np.unique(masks.labels[masks.labels > 0])))
    _emit(report)
    return 0


def cmd_eval(args) -> int:
    report = {}
    if args.pred or args.gt:
        if not (args.pred and args.gt):
            raise ConfigurationError("depth evaluation needs both --pred and --gt")
        m = depth_metrics(io.load_depth(args.pred), io.load_depth(args.gt))
        report["depth"] = m
        print(metrics_table({"depth": m}, DepthMetrics.COLUMNS), file=sys.stderr)
    if args.pred_normals or args.gt_normals:
        if not (args.pred_normals and args.gt_normals):
            raise ConfigurationError("normal evaluation needs both --pred-normals and --gt-normals")
        m = normal_metrics(io.load_normals(args.pred_normals), io.load_normals(args.gt_normals))
        report["normals"] = m
        print(metrics_table({"normals": m}, NormalMetrics.COLUMNS), file=sys.stderr)
    if not report:
        raise ConfigurationError("nothing to evaluate")
    _emit(report)
    return 0


def cmd_fuse(args) -> int:
    """Fuse externally produced depth maps (``<depths>/%06d.pfm``), weighted by
    ``<occlusion>/%06d.pfm`` when given."""
    cfg = _config(args)
    ds = Dataset(args.dataset)
    depth_dir = Path(args.depths)
    ids = [fid for fid in ds.frame_ids if (depth_dir / f"{fid:06d}.pfm").exists()]
    if not ids:
        raise ConfigurationError(f"no depth maps found in {depth_dir}")
    volume = plan_volume(cfg, ds.K, [ds.pose(fid) for fid in ids])
    for fid in ids:
        frame = ds.frame(fid)
        depth = io.load_depth(depth_dir / f"{fid:06d}.pfm")
        occ = None
        if args.occlusion:
            occ = io.load_occlusion(Path(args.occlusion) / f"{fid:06d}.pfm")
        volume.integrate(depth, frame.image, ds.K, frame.pose, cfg.trunc, occ=occ, threads=cfg.threads)
    mesh = extract_mesh(volume, cfg.min_weight)
    io.write_ply(args.out, mesh)
    if args.checkpoint:
        volume.save(args.checkpoint)
    _emit({"frames": ids, "vertices": int(len(mesh.vertices)), "faces": int(len(mesh.faces)), **mesh.edge_stats()})
    return 0


def cmd_synth(args) -> int:
    scene, K, poses = load_scene(args.scene)
    if K is None:
        raise ConfigurationError(f"{args.scene} has no camera block")
    if not poses:
        raise ConfigurationError(f"{args.scene} has no trajectory")
    ids = write_dataset(scene, K, poses, args.out, noise=args.noise, seed=args.seed)
    _emit({"frames": len(ids), "width": K.width, "height": K.height, "out": str(args.out)})
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    res = run_sequence(args.dataset, cfg, args.out)
    summary = summarize(res.windows, res.mesh)
    summary["config"] = cfg.to_dict()
    _emit(summary)
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="occdepth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="TOML file of pipeline settings")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting (repeatable)")
        p.add_argument("--threads", type=int, help="worker threads for the heavy stages")
        return p

    p = with_config(sub.add_parser("sweep", help="per-pair plane sweep depth"))
    p.add_argument("dataset")
    p.add_argument("--ref", type=int, required=True)
    p.add_argument("--src", type=int, action="append", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-volume", action="store_true", help="also write raw aggregated volumes")
    p.set_defaults(func=cmd_sweep)

    p = with_config(sub.add_parser("refine", help="occlusion map and refined depth for one window"))
    p.add_argument("dataset")
    p.add_argument("--ref", type=int, required=True)
    p.add_argument("--src", type=int, action="append", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("cnm", help="local normals and combined normal map from a depth map")
    p.add_argument("--depth", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--planes", help="16-bit plane label PNG")
    p.add_argument("--radius", type=int, default=2)
    p.add_argument("--max-relative-jump", type=float, default=0.05)
    p.add_argument("--out", required=True, help="output stem")
    p.set_defaults(func=cmd_cnm)

    p = sub.add_parser("eval", help="depth and normal metrics")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--pred-normals")
    p.add_argument("--gt-normals")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("fuse", help="TSDF fusion of depth maps into a mesh"))
    p.add_argument("dataset")
    p.add_argument("--depths", required=True, help="directory of %%06d.pfm depth maps")
    p.add_argument("--occlusion", help="directory of %%06d.pfm occlusion maps")
    p.add_argument("--out", required=True, help="output PLY path")
    p.add_argument("--checkpoint", help="also save the volume here")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("synth", help="render a scene JSON into a dataset directory")
    p.add_argument("scene")
    p.add_argument("out")
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian intensity noise sigma")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = with_config(sub.add_parser("run", help="full pipeline over a dataset"))
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, InvalidArgumentError) as exc:
        print(json.dumps({"error": "configuration", "message": str(exc)}))
        log.error("%s", exc)
        return EXIT_CONFIG
    except (DataError, EmptyDomainError) as exc:
        print(json.dumps({"error": "data", "message": str(exc)}))
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
