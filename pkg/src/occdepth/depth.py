"""Depth extraction from an (aggregated) cost volume."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cost_volume import CostVolume
from .errors import InvalidArgumentError
from .geometry import DepthMap

ARGMIN = "argmin"
SOFT_ARGMIN = "soft-argmin"


@dataclass(frozen=True)
class DepthExtractionConfig:
    mode: str = ARGMIN
    softness: float = 0.01
    subplane: bool = True

    def __post_init__(self):
        if self.mode not in (ARGMIN, SOFT_ARGMIN):
            raise InvalidArgumentError(f"unknown extraction mode {self.mode!r}")
        if self.mode == SOFT_ARGMIN and not self.softness > 0:
            raise InvalidArgumentError("soft-argmin needs a positive softness")


def _argmin_index(volume: CostVolume) -> np.ndarray:
    # np.argmin returns the first occurrence, which gives the lowest-index tie-break.
    return np.argmin(np.where(volume.valid, volume.costs, np.inf), axis=0)


def extract_depth(volume: CostVolume, config: DepthExtractionConfig | None = None) -> DepthMap:
    """Per-pixel depth from the cost profile.

    argmin mode picks the lowest-cost valid plane (lowest index on ties) and,
    with ``subplane`` on, moves it by the vertex of the parabola through the
    neighbouring costs, clamped to half a plane spacing. Refinement is skipped
    on the first and last plane and when either neighbour is invalid.
    soft-argmin returns the expectation of plane depths under
    ``softmax(-cost / softness)`` restricted to valid planes.
    """
    config = config or DepthExtractionConfig()
    sampling = volume.sampling
    depths = sampling.depths
    any_valid = volume.valid.any(axis=0)

    if config.mode == SOFT_ARGMIN:
        masked = np.where(volume.valid, volume.costs, np.inf)
        cmin = np.min(masked, axis=0)
        cmin = np.where(any_valid, cmin, 0.0)
        expo = np.where(volume.valid, np.exp(-(volume.costs - cmin) / config.softness), 0.0)
        z = expo.sum(axis=0)
        z = np.where(any_valid, z, 1.0)
        depth = np.sum(depths[:, None, None] * expo, axis=0) / z
        return DepthMap(np.where(any_valid, depth, 0.0), any_valid)

    idx = _argmin_index(volume)
    depth = depths[idx]
    if config.subplane and volume.planes >= 3:
        D = volume.planes
        lo = np.clip(idx - 1, 0, D - 1)
        hi = np.clip(idx + 1, 0, D - 1)
        c0 = np.take_along_axis(volume.costs, idx[None], 0)[0]
        cm = np.take_along_axis(volume.costs, lo[None], 0)[0]
        cp = np.take_along_axis(volume.costs, hi[None], 0)[0]
        vm = np.take_along_axis(volume.valid, lo[None], 0)[0]
        vp = np.take_along_axis(volume.valid, hi[None], 0)[0]
        curv = cm - 2.0 * c0 + cp
        fit = any_valid & (idx > 0) & (idx < D - 1) & vm & vp & (curv > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            offset = np.where(fit, (cm - cp) / (2.0 * np.where(fit, curv, 1.0)), 0.0)
        offset = np.clip(offset, -0.5, 0.5)
        depth = depth + offset * sampling.spacing
    return DepthMap(np.where(any_valid, depth, 0.0), any_valid)
