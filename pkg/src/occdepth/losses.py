"""Depth/normal training losses as plain evaluation functions, and the
standard depth and normal error metrics.

Each loss term averages over its own set of jointly valid pixels: depth terms
over pixels valid in prediction and ground truth, normal terms over pixels
valid in both normal maps. The occlusion map, when present, further restricts
both sets to pixels where it is defined.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import EmptyDomainError, InvalidArgumentError
from .geometry import CameraIntrinsics, DepthMap
from .normals import DEFAULT_MAX_RELATIVE_JUMP, DEFAULT_RADIUS, NormalMap, normals_from_depth, normals_vjp

NORMAL_THRESHOLDS = (11.25, 22.5, 30.0)


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    alpha: float = 0.2
    beta: float = 1.0

    def __post_init__(self):
        for name in ("lam", "alpha", "beta"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise InvalidArgumentError(f"{name} must be a finite non-negative weight")


@dataclass(frozen=True)
class DepthMetrics:
    delta1: float
    delta2: float
    delta3: float
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    scale_inv: float

    COLUMNS = (
        ("delta1", "d<1.25"),
        ("delta2", "d<1.25^2"),
        ("delta3", "d<1.25^3"),
        ("abs_rel", "abs.rel"),
        ("sq_rel", "sq.rel"),
        ("rmse", "rmse"),
        ("rmse_log", "rmse log"),
        ("scale_inv", "scale.inv"),
    )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class NormalMetrics:
    mean: float
    median: float
    rmse: float
    pct_11_25: float
    pct_22_5: float
    pct_30: float

    COLUMNS = (
        ("mean", "mean"),
        ("median", "median"),
        ("rmse", "rmse"),
        ("pct_11_25", "11.25"),
        ("pct_22_5", "22.5"),
        ("pct_30", "30"),
    )

    def to_dict(self) -> dict:
        return asdict(self)


def _same_shape(*maps):
    shapes = {m.shape for m in maps}
    if len(shapes) != 1:
        raise InvalidArgumentError(f"inputs differ in size: {sorted(shapes)}")


def _occ_values(occ, shape):
    if occ is None:
        return np.zeros(shape), np.ones(shape, dtype=bool)
    if occ.shape != shape:
        raise InvalidArgumentError("occlusion map differs in size")
    p = occ.p
    if np.any(occ.valid & ~((p >= 0) & (p <= 1))):
        raise InvalidArgumentError("occlusion probabilities must lie in [0, 1]")
    return np.where(occ.valid, p, 0.0), occ.valid


def depth_loss_l1(pred: DepthMap, gt: DepthMap) -> float:
    """Mean absolute depth error over pixels valid in both maps."""
    _same_shape(pred, gt)
    q = pred.valid & gt.valid
    if not q.any():
        raise EmptyDomainError("no pixel is valid in both depth maps")
    return float(np.sum(np.abs(gt.depth[q] - pred.depth[q])) / q.sum())


def combined_normal_loss(pred_normals: NormalMap, cnm: NormalMap) -> float:
    """Negative mean cosine between predicted and combined normals."""
    _same_shape(pred_normals, cnm)
    q = pred_normals.valid & cnm.valid
    if not q.any():
        raise EmptyDomainError("no pixel is valid in both normal maps")
    dots = np.sum(cnm.normals[q] * pred_normals.normals[q], axis=1)
    return float(-np.sum(dots) / q.sum())


def total_initial_loss(pred_depth, gt_depth, pred_normals, cnm, cfg: LossConfig | None = None) -> float:
    cfg = cfg or LossConfig()
    return depth_loss_l1(pred_depth, gt_depth) + cfg.lam * combined_normal_loss(pred_normals, cnm)


def occlusion_aware_loss(pred_depth, gt_depth, pred_normals, cnm, occ, cfg: LossConfig | None = None) -> float:
    """Occlusion-weighted refinement loss.

    ``(l_rd + beta * l_rn) - alpha * mean(1 - P)`` where both data terms weight
    each pixel by ``1 - P``. The penalty is averaged over the depth term's
    pixel set and enters with a negative sign, as in the original formulation.
    """
    cfg = cfg or LossConfig()
    _same_shape(pred_depth, gt_depth, pred_normals, cnm)
    p, pv = _occ_values(occ, pred_depth.shape)
    qd = pred_depth.valid & gt_depth.valid & pv
    qn = pred_normals.valid & cnm.valid & pv
    if not qd.any() or not qn.any():
        raise EmptyDomainError("no jointly valid pixel for the occlusion-aware loss")
    keep = 1.0 - p
    l_rd = np.sum(keep[qd] * np.abs(gt_depth.depth[qd] - pred_depth.depth[qd])) / qd.sum()
    dots = np.sum(cnm.normals[qn] * pred_normals.normals[qn], axis=1)
    l_rn = -np.sum(keep[qn] * dots) / qn.sum()
    penalty = np.sum(keep[qd]) / qd.sum()
    return float((l_rd + cfg.beta * l_rn) - cfg.alpha * penalty)


def _depth_term_grad(pred: DepthMap, gt: DepthMap, weight: np.ndarray, q: np.ndarray) -> np.ndarray:
    g = np.zeros(pred.shape)
    g[q] = weight[q] * np.sign(pred.depth[q] - gt.depth[q]) / q.sum()
    return g


def initial_loss_depth_grad(
    pred_depth: DepthMap,
    gt_depth: DepthMap,
    cnm: NormalMap,
    K: CameraIntrinsics,
    cfg: LossConfig | None = None,
    radius: int = DEFAULT_RADIUS,
    max_relative_jump: float = DEFAULT_MAX_RELATIVE_JUMP,
) -> np.ndarray:
    """Gradient of ``total_initial_loss`` w.r.t. the predicted depth, with the
    predicted normals computed from that depth by ``normals_from_depth``.
    The l1 term contributes its subgradient ``sign(pred - gt)``."""
    cfg = cfg or LossConfig()
    pred_n = normals_from_depth(pred_depth, K, radius, max_relative_jump)
    qd = pred_depth.valid & gt_depth.valid
    qn = pred_n.valid & cnm.valid
    if not qd.any() or not qn.any():
        raise EmptyDomainError("no jointly valid pixel")
    grad = _depth_term_grad(pred_depth, gt_depth, np.ones(pred_depth.shape), qd)
    cot = np.where(qn[..., None], -cfg.lam * cnm.normals / qn.sum(), 0.0)
    return grad + normals_vjp(pred_depth, K, cot, radius, max_relative_jump)


def refine_loss_depth_grad(
    pred_depth: DepthMap,
    gt_depth: DepthMap,
    cnm: NormalMap,
    occ,
    K: CameraIntrinsics,
    cfg: LossConfig | None = None,
    radius: int = DEFAULT_RADIUS,
    max_relative_jump: float = DEFAULT_MAX_RELATIVE_JUMP,
) -> np.ndarray:
    """Gradient of ``occlusion_aware_loss`` w.r.t. the refined depth (P held fixed)."""
    cfg = cfg or LossConfig()
    pred_n = normals_from_depth(pred_depth, K, radius, max_relative_jump)
    p, pv = _occ_values(occ, pred_depth.shape)
    qd = pred_depth.valid & gt_depth.valid & pv
    qn = pred_n.valid & cnm.valid & pv
    if not qd.any() or not qn.any():
        raise EmptyDomainError("no jointly valid pixel")
    keep = 1.0 - p
    grad = _depth_term_grad(pred_depth, gt_depth, keep, qd)
    cot = np.where(qn[..., None], -cfg.beta * keep[..., None] * cnm.normals / qn.sum(), 0.0)
    return grad + normals_vjp(pred_depth, K, cot, radius, max_relative_jump)


def depth_metrics(pred: DepthMap, gt: DepthMap) -> DepthMetrics:
    """Threshold accuracies (percent, strict <) and error statistics over the
    jointly valid pixels. Log quantities use the natural logarithm."""
    _same_shape(pred, gt)
    q = pred.valid & gt.valid
    if not q.any():
        raise EmptyDomainError("no pixel is valid in both depth maps")
    p = pred.depth[q]
    g = gt.depth[q]
    if np.any(p <= 0) or np.any(g <= 0):
        raise InvalidArgumentError("depths must be positive for metric evaluation")
    n = q.sum()
    ratio = np.maximum(p / g, g / p)
    deltas = [100.0 * np.sum(ratio < 1.25**i) / n for i in (1, 2, 3)]
    diff = p - g
    d = np.log(p) - np.log(g)
    # centred second moment == mean(d^2) - mean(d)^2, without the cancellation
    centred = d - np.sum(d) / n
    return DepthMetrics(
        delta1=float(deltas[0]),
        delta2=float(deltas[1]),
        delta3=float(deltas[2]),
        abs_rel=float(np.sum(np.abs(diff) / g) / n),
        sq_rel=float(np.sum(diff * diff / g) / n),
        rmse=float(np.sqrt(np.sum(diff * diff) / n)),
        rmse_log=float(np.sqrt(np.sum(d * d) / n)),
        scale_inv=float(np.sqrt(np.sum(centred * centred) / n)),
    )


def angular_errors(pred: NormalMap, gt: NormalMap) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel angle in degrees and cosine over jointly valid pixels."""
    _same_shape(pred, gt)
    q = pred.valid & gt.valid
    cos = np.clip(np.sum(pred.normals[q] * gt.normals[q], axis=1), -1.0, 1.0)
    return np.degrees(np.arccos(cos)), cos


def normal_metrics(pred: NormalMap, gt: NormalMap) -> NormalMetrics:
    """Angular error statistics in degrees.

    The threshold percentages count pixels strictly below each angle; the
    comparison is made on cosines (``cos > cos(t)``) so that an angle of
    exactly ``t`` is not promoted below it by ``arccos`` rounding.
    """
    ang, cos = angular_errors(pred, gt)
    if ang.size == 0:
        raise EmptyDomainError("no pixel is valid in both normal maps")
    n = ang.size
    pct = [100.0 * np.sum(cos > np.cos(np.radians(t))) / n for t in NORMAL_THRESHOLDS]
    return NormalMetrics(
        mean=float(np.sum(ang) / n),
        median=float(np.median(ang)),
        rmse=float(np.sqrt(np.sum(ang * ang) / n)),
        pct_11_25=float(pct[0]),
        pct_22_5=float(pct[1]),
        pct_30=float(pct[2]),
    )


def metrics_table(rows: dict, columns) -> str:
    """Aligned text table; ``rows`` maps a row label to a metrics dataclass."""
    keys = [k for k, _ in columns]
    heads = [h for _, h in columns]
    label_w = max([len("")] + [len(str(k)) for k in rows])
    widths = [max(len(h), 9) for h in heads]
    lines = [" " * label_w + "  " + "  ".join(h.rjust(w) for h, w in zip(heads, widths))]
    for label, m in rows.items():
        vals = m.to_dict() if hasattr(m, "to_dict") else dict(m)
        cells = [f"{vals[k]:.4f}".rjust(w) for k, w in zip(keys, widths)]
        lines.append(str(label).ljust(label_w) + "  " + "  ".join(cells))
    return "\n".join(lines)


def metrics_json(record: dict) -> str:
    def conv(v):
        return v.to_dict() if hasattr(v, "to_dict") else v

    return json.dumps({k: conv(v) for k, v in record.items()}, indent=2, sort_keys=True)
