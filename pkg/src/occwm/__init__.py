"""Occupancy world model with scene-centric forecasting control.

Library layers: grid geometry and metrics (numpy), synthetic data and dataset
IO, then the torch models (occupancy VAE, scene-centric forecaster, diffusion
transformer world model, control adapter) with the DDPM machinery, training
pipeline, and CLI on top.
"""

from .grid import (
    FeatureMask,
    GridSpec,
    OccupancyGrid,
    Pose,
    RigidTransform,
    Trajectory,
    VisibilityVolume,
    accumulate_visibility,
    feature_mask,
    relative_transform,
    resample_grid,
    static_voxel_fraction,
)
from .metrics import MetricAccumulator, MetricReport, compute_metrics

__version__ = "0.1.0"

__all__ = [
    "FeatureMask",
    "GridSpec",
    "MetricAccumulator",
    "MetricReport",
    "OccupancyGrid",
    "Pose",
    "RigidTransform",
    "Trajectory",
    "VisibilityVolume",
    "accumulate_visibility",
    "compute_metrics",
    "feature_mask",
    "relative_transform",
    "resample_grid",
    "static_voxel_fraction",
    "__version__",
]
