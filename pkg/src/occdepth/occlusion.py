"""Occlusion probability from cross-view disagreement and cost-profile
flatness, and occlusion-aware fusion of per-pair depth maps."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .cost_volume import CostVolume
from .depth import DepthExtractionConfig, extract_depth
from .errors import InvalidArgumentError
from .geometry import DepthMap, _readonly


@dataclass(frozen=True)
class OcclusionMap:
    p: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        v = np.asarray(self.valid, dtype=bool)
        if p.ndim != 2 or v.shape != p.shape:
            raise InvalidArgumentError("occlusion map must be (H, W) with a matching mask")
        pv = p[v]
        if not np.all(np.isfinite(pv)) or np.any(pv < 0) or np.any(pv > 1):
            raise InvalidArgumentError("occlusion probabilities must lie in [0, 1]")
        object.__setattr__(self, "p", _readonly(np.where(v, p, 0.0)))
        object.__setattr__(self, "valid", _readonly(v, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.p.shape

    @classmethod
    def constant(cls, shape, value: float) -> "OcclusionMap":
        return cls(np.full(shape, float(value)), np.ones(shape, dtype=bool))


@dataclass(frozen=True)
class RefineConfig:
    tau_rel: float = 0.05
    kappa: float = 0.5
    threshold: float = 0.5
    extraction: DepthExtractionConfig = field(default_factory=DepthExtractionConfig)

    def __post_init__(self):
        if not self.tau_rel > 0:
            raise InvalidArgumentError("tau_rel must be positive")
        if not 0 <= self.kappa <= 1:
            raise InvalidArgumentError("kappa must lie in [0, 1]")
        if not 0 <= self.threshold <= 1:
            raise InvalidArgumentError("threshold must lie in [0, 1]")


def _stack(initial_depths, shape):
    for d in initial_depths:
        if d.shape != shape:
            raise InvalidArgumentError("initial depth maps must match the volume size")
    depth = np.stack([d.depth for d in initial_depths])
    valid = np.stack([d.valid for d in initial_depths])
    return depth, valid


def _nanmedian(stack: np.ndarray) -> np.ndarray:
    # all-NaN columns are expected (no valid candidate) and masked by callers
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanmedian(stack, axis=0)


def relative_spread(initial_depths, shape) -> tuple[np.ndarray, np.ndarray]:
    """(max - min) / median over the valid initial depths, and the count of them."""
    depth, valid = _stack(initial_depths, shape)
    nvalid = valid.sum(axis=0)
    hi = np.max(np.where(valid, depth, -np.inf), axis=0)
    lo = np.min(np.where(valid, depth, np.inf), axis=0)
    med = _nanmedian(np.where(valid, depth, np.nan))
    ok = nvalid >= 2
    spread = np.where(ok, (hi - lo) / np.where(ok, med, 1.0), 0.0)
    return spread, nvalid


def profile_flatness(volume: CostVolume) -> np.ndarray:
    """``c_min / c_mean`` of each pixel's valid costs.

    1 for a flat profile, toward 0 for a sharp minimum. Pixels with no valid
    plane or an all-zero profile count as flat.
    """
    n = volume.valid.sum(axis=0)
    total = np.sum(np.where(volume.valid, volume.costs, 0.0), axis=0)
    cmin = np.min(np.where(volume.valid, volume.costs, np.inf), axis=0)
    cmean = total / np.maximum(n, 1)
    has = (n > 0) & (cmean > 0)
    f = np.where(has, cmin / np.where(has, cmean, 1.0), 1.0)
    return np.clip(f, 0.0, 1.0)


def occlusion_probability(initial_depths, avg_volume: CostVolume, cfg: RefineConfig | None = None) -> OcclusionMap:
    """``P = clamp((1 - kappa) * min(1, spread / tau_rel) + kappa * flatness, 0, 1)``.

    Undefined (invalid) where fewer than two initial depths are valid.
    """
    cfg = cfg or RefineConfig()
    initial_depths = list(initial_depths)
    if len(initial_depths) < 2:
        raise InvalidArgumentError("occlusion estimation needs at least two initial depth maps")
    with np.errstate(all="ignore"):
        spread, nvalid = relative_spread(initial_depths, avg_volume.shape)
    f = profile_flatness(avg_volume)
    p = (1.0 - cfg.kappa) * np.minimum(1.0, spread / cfg.tau_rel) + cfg.kappa * f
    p = np.clip(p, 0.0, 1.0)
    ok = nvalid >= 2
    return OcclusionMap(np.where(ok, p, 0.0), ok)


def refine_depth(initial_depths, avg_volume: CostVolume, occ: OcclusionMap, cfg: RefineConfig | None = None) -> DepthMap:
    """Fuse per-pair depths into one reference depth map.

    Where ``P >= threshold`` (or fewer than two initial depths are valid) the
    averaged-volume extraction is used; elsewhere the median of the initial
    depths together with that extraction. When the extraction is undefined
    the median of whatever initial depths exist is used instead.
    """
    cfg = cfg or RefineConfig()
    initial_depths = list(initial_depths)
    if occ.shape != avg_volume.shape:
        raise InvalidArgumentError("occlusion map must match the volume size")
    depth, valid = _stack(initial_depths, avg_volume.shape)
    avg = extract_depth(avg_volume, cfg.extraction)
    nvalid = valid.sum(axis=0)

    cand = np.concatenate([depth, avg.depth[None]])
    cand_ok = np.concatenate([valid, avg.valid[None]])
    med = _nanmedian(np.where(cand_ok, cand, np.nan))

    occluded = occ.valid & (occ.p >= cfg.threshold)
    use_avg = (occluded | (nvalid < 2)) & avg.valid
    any_cand = cand_ok.any(axis=0)
    out = np.where(use_avg, avg.depth, np.where(any_cand, med, 0.0))
    return DepthMap(np.where(any_cand, out, 0.0), any_cand)
