"""Repair of disconnected 3D vessel-tree segmentations.

The library covers the full desk-scale pipeline: voxel-grid primitives
and IO, skeletonization and branch extraction, topology-aware metrics
and losses, a self-supervised vesselness oracle, candidate pairing with
a scored reconnection walk, statistical stitch validation, cross-section
contour growth, implicit tube reconstruction, and a seeded phantom
generator for verification. The ``vesselmend`` CLI drives the same
stages from the shell.
"""

from .config import PipelineConfig, load_config, save_config
from .grid import Connectivity, Volume, VolumeKind, connected_components, euclidean_dt
from .ies import TubeModel, build_tube_model, export_stl, merge, voxelize
from .lumen import ContourStation, contour_pipeline, extract_cross_section, grow_contour
from .oracle import IntensityPercentileOracle, LinearPatchOracle
from .phantom import PhantomCase, PhantomSpec, generate, load_case, save_case, standard_suite_specs
from .reconnect import (
    CandidateParams,
    NeighborLevel,
    WalkParams,
    run_reconnection,
    select_candidates,
    walk,
)
from .skeleton import CenterlineBranch, Skeleton, extract_branches, skeletonize_hard, soft_skeletonize
from .stats import AdfResult, adf_test
from .topometrics import (
    NsdtParams,
    ReconnectionCounts,
    dice,
    hd95,
    joint_loss,
    nsdt,
    nsdt_soft_cldice,
    overlap_ov,
    rec_metrics,
)
from .volume_io import load_volume, save_volume

__version__ = "0.1.0"

__all__ = [
    "PipelineConfig",
    "load_config",
    "save_config",
    "Connectivity",
    "Volume",
    "VolumeKind",
    "connected_components",
    "euclidean_dt",
    "TubeModel",
    "build_tube_model",
    "export_stl",
    "merge",
    "voxelize",
    "ContourStation",
    "contour_pipeline",
    "extract_cross_section",
    "grow_contour",
    "IntensityPercentileOracle",
    "LinearPatchOracle",
    "PhantomCase",
    "PhantomSpec",
    "generate",
    "load_case",
    "save_case",
    "standard_suite_specs",
    "CandidateParams",
    "NeighborLevel",
    "WalkParams",
    "run_reconnection",
    "select_candidates",
    "walk",
    "CenterlineBranch",
    "Skeleton",
    "extract_branches",
    "skeletonize_hard",
    "soft_skeletonize",
    "AdfResult",
    "adf_test",
    "NsdtParams",
    "ReconnectionCounts",
    "dice",
    "hd95",
    "joint_loss",
    "nsdt",
    "nsdt_soft_cldice",
    "overlap_ov",
    "rec_metrics",
    "load_volume",
    "save_volume",
    "__version__",
]
