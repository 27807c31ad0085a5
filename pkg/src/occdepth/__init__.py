"""Plane-sweep multi-view depth estimation with occlusion-aware refinement
and occlusion-weighted TSDF fusion."""

from .cost_volume import CostVolume, aggregate_cost_volume, average_cost_volumes, build_cost_volume
from .depth import ARGMIN, SOFT_ARGMIN, DepthExtractionConfig, extract_depth
from .errors import ConfigurationError, DataError, EmptyDomainError, InvalidArgumentError
from .geometry import (
    CameraIntrinsics,
    DepthMap,
    Image,
    PlaneSampling,
    Pose,
    backproject,
    homography_for_plane,
    project,
    warp_to_reference_plane,
)
from .losses import (
    DepthMetrics,
    LossConfig,
    NormalMetrics,
    combined_normal_loss,
    depth_loss_l1,
    depth_metrics,
    normal_metrics,
    occlusion_aware_loss,
    total_initial_loss,
)
from .normals import NormalMap, PlaneMaskSet, build_cnm, normals_from_depth
from .occlusion import OcclusionMap, RefineConfig, occlusion_probability, refine_depth
from .tsdf import TriangleMesh, TsdfVolume, extract_mesh, integrate

__version__ = "0.1.0"
