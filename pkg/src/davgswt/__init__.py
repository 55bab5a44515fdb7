"""Data-efficient Gaussian-splat Wang tiles with active view selection."""
from .camera import Intrinsics, Pose
from .errors import (
    BudgetError,
    ConfigurationError,
    DavError,
    DimensionError,
    IntegrityError,
    LoopAborted,
    PoseError,
    RefinementError,
    TilingError,
)
from .gsfield import GaussianField, Splat, refine_bounded, render_view
from .scene import SyntheticScene, capture, generate_scene, sample_candidate_poses

__version__ = "0.1.0"

__all__ = [
    "BudgetError",
    "ConfigurationError",
    "DavError",
    "DimensionError",
    "GaussianField",
    "IntegrityError",
    "Intrinsics",
    "LoopAborted",
    "Pose",
    "PoseError",
    "RefinementError",
    "Splat",
    "SyntheticScene",
    "TilingError",
    "capture",
    "generate_scene",
    "refine_bounded",
    "render_view",
    "sample_candidate_poses",
]
