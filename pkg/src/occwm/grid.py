"""Semantic voxel grids, ego poses, and rigid grid resampling.

Conventions used throughout the package:

- Grid axis 0 is x (forward), axis 1 is y (left), axis 2 is z (up).
- A grid with spec ``(H, W, D)`` stores one integer class label per voxel;
  the center of voxel ``(i, j, k)`` sits at ``origin + (i+1/2, j+1/2, k+1/2) * voxel_size``
  in the ego frame the grid is attached to.
- A pose maps ego-frame coordinates to world coordinates via ``x_w = R @ x_e + t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GridSpec",
    "OccupancyGrid",
    "Pose",
    "Trajectory",
    "RigidTransform",
    "VisibilityVolume",
    "FeatureMask",
    "relative_transform",
    "resample_grid",
    "resample_labels",
    "accumulate_visibility",
    "feature_mask",
    "static_voxel_fraction",
]

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class GridSpec:
    """Geometry and label-space description of an occupancy grid.

    Attributes:
        dims: voxel counts (H, W, D) along x / y / z.
        voxel_size: edge length of a voxel in meters (cubic voxels).
        origin: ego-frame metric coordinate of the corner of voxel (0, 0, 0).
        num_classes: number of semantic classes including the free class.
        free_class: label id of empty space.
    """

    dims: tuple[int, int, int]
    voxel_size: float
    origin: tuple[float, float, float]
    num_classes: int
    free_class: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise ValueError(f"dims must be three counts >= 1, got {self.dims}")
        if self.voxel_size <= 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        if not (0 <= self.free_class < self.num_classes):
            raise ValueError(
                f"free_class {self.free_class} outside [0, {self.num_classes})"
            )
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @classmethod
    def full_scale(cls) -> "GridSpec":
        """200x200x16 grid, 0.4 m voxels over [-40, 40] m, 18 classes."""
        return cls(dims=(200, 200, 16), voxel_size=0.4,
                   origin=(-40.0, -40.0, -3.2), num_classes=18)

    @classmethod
    def toy(cls) -> "GridSpec":
        """64x64x8 grid, 0.5 m voxels, 8 classes; desk-scale default."""
        return cls(dims=(64, 64, 8), voxel_size=0.5,
                   origin=(-16.0, -16.0, -1.0), num_classes=8)

    @property
    def num_voxels(self) -> int:
        h, w, d = self.dims
        return h * w * d

    def voxel_centers(self) -> np.ndarray:
        """Ego-frame centers of every voxel, shape (H, W, D, 3)."""
        h, w, d = self.dims
        xs = self.origin[0] + (np.arange(h) + 0.5) * self.voxel_size
        ys = self.origin[1] + (np.arange(w) + 0.5) * self.voxel_size
        zs = self.origin[2] + (np.arange(d) + 0.5) * self.voxel_size
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)


@dataclass(frozen=True)
class OccupancyGrid:
    """Dense semantic voxel labels attached to one ego pose. Immutable."""

    spec: GridSpec
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.shape != self.spec.dims:
            raise ValueError(
                f"labels shape {labels.shape} does not match spec dims {self.spec.dims}"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= self.spec.num_classes):
            raise ValueError("labels contain ids outside [0, num_classes)")
        labels = np.ascontiguousarray(labels, dtype=np.uint8)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    def occupancy(self) -> np.ndarray:
        """Boolean mask of non-free voxels."""
        return self.labels != self.spec.free_class


@dataclass(frozen=True, eq=False)
class Pose:
    """SE(3) ego state: ego-frame coordinates map to world via R @ x + t."""

    translation: np.ndarray
    rotation: np.ndarray
    timestamp: float = 0.0

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (self.timestamp == other.timestamp
                and np.array_equal(self.translation, other.translation)
                and np.array_equal(self.rotation, other.rotation))

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(r.T @ r, np.eye(3), atol=_ORTHO_TOL):
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation determinant differs from 1 beyond 1e-9")
        t.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "timestamp", float(self.timestamp))

    @classmethod
    def from_xyyaw(cls, x: float, y: float, yaw: float, timestamp: float = 0.0) -> "Pose":
        """Planar pose: z = 0, roll = pitch = 0."""
        c, s = math.cos(yaw), math.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(translation=np.array([x, y, 0.0]), rotation=rot, timestamp=timestamp)

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map ego-frame points (..., 3) into the world frame."""
        return points @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Trajectory:
    """Ordered ego poses at uniform 0.5 s spacing."""

    poses: tuple[Pose, ...]
    spacing: float = field(default=0.5)

    def __post_init__(self):
        poses = tuple(self.poses)
        if len(poses) < 1:
            raise ValueError("trajectory needs at least one pose")
        times = np.array([p.timestamp for p in poses])
        if len(poses) > 1:
            deltas = np.diff(times)
            if np.any(deltas <= 0):
                raise ValueError("timestamps must be strictly increasing")
            if np.any(np.abs(deltas - self.spacing) > 1e-6):
                raise ValueError(
                    f"pose spacing must be uniform {self.spacing} s within 1e-6"
                )
        object.__setattr__(self, "poses", poses)

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, idx) -> Pose:
        return self.poses[idx]


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) map ``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rot_inv = self.rotation.T
        return RigidTransform(rot_inv, -rot_inv @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying `other` first, then `self`."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class VisibilityVolume:
    """Per-voxel flag marking voxels observable in some reference data."""

    spec: GridSpec
    observed: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.observed)
        if obs.shape != self.spec.dims:
            raise ValueError(
                f"observed shape {obs.shape} does not match spec dims {self.spec.dims}"
            )
        obs = np.ascontiguousarray(obs, dtype=bool)
        obs.setflags(write=False)
        object.__setattr__(self, "observed", obs)


@dataclass(frozen=True)
class FeatureMask:
    """Pillar-level keep mask over a downsampled (H1, W1) feature map.

    ``keep[h, w]`` is True where the underlying volume was sufficiently
    observed; control features are kept where True and zeroed elsewhere.
    """

    dims: tuple[int, int]
    keep: np.ndarray

    def __post_init__(self):
        keep = np.asarray(self.keep)
        if keep.shape != tuple(self.dims):
            raise ValueError(f"keep shape {keep.shape} does not match dims {self.dims}")
        keep = np.ascontiguousarray(keep, dtype=bool)
        keep.setflags(write=False)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "keep", keep)


def relative_transform(p_src: Pose, p_dst: Pose) -> RigidTransform:
    """SE(3) map taking coordinates in p_src's ego frame to p_dst's ego frame."""
    rot = p_dst.rotation.T @ p_src.rotation
    trans = p_dst.rotation.T @ (p_src.translation - p_dst.translation)
    return RigidTransform(rot, trans)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    # np.round rounds half to even; the resampling contract rounds half away from zero
    return np.where(x >= 0, np.floor(x + 0.5), np.ceil(x - 0.5))


def _source_lookup(spec: GridSpec, p_src: Pose, p_dst: Pose):
    """Nearest source voxel for every destination voxel center.

    Returns (flat_indices, inbounds) where ``flat_indices`` indexes the
    row-major flattened source labels (zeros where out of bounds) and
    ``inbounds`` marks destination voxels whose center maps onto the source
    volume, both of shape ``spec.dims``.
    """
    centers = spec.voxel_centers().reshape(-1, 3)
    mapped = relative_transform(p_dst, p_src).apply(centers)
    cont_idx = (mapped - np.asarray(spec.origin)) / spec.voxel_size - 0.5
    idx = _round_half_away(cont_idx).astype(np.int64)
    dims = np.asarray(spec.dims)
    inbounds = np.all((idx >= 0) & (idx < dims), axis=1)
    idx_safe = np.clip(idx, 0, dims - 1)
    flat = (idx_safe[:, 0] * dims[1] + idx_safe[:, 1]) * dims[2] + idx_safe[:, 2]
    flat[~inbounds] = 0
    return flat.reshape(spec.dims), inbounds.reshape(spec.dims)


def resample_grid(grid: OccupancyGrid, p_src: Pose, p_dst: Pose):
    """Rigidly resample a grid from the p_src ego frame into the p_dst frame.

    Each destination voxel takes the label of the nearest source voxel center
    (rounding of continuous source indices, ties half away from zero) when its
    center maps inside the source volume; otherwise it is free with
    visibility 0.

    Returns:
        (OccupancyGrid in the destination frame, VisibilityVolume of in-bounds
        destination voxels).
    """
    flat, inbounds = _source_lookup(grid.spec, p_src, p_dst)
    out = grid.labels.reshape(-1)[flat.reshape(-1)].reshape(grid.spec.dims)
    out = np.where(inbounds, out, np.uint8(grid.spec.free_class))
    return OccupancyGrid(grid.spec, out), VisibilityVolume(grid.spec, inbounds)


def resample_labels(labels: np.ndarray, spec: GridSpec, p_src: Pose, p_dst: Pose):
    """Array-level resample_grid; returns (labels, inbounds) ndarrays."""
    flat, inbounds = _source_lookup(spec, p_src, p_dst)
    out = labels.reshape(-1)[flat.reshape(-1)].reshape(spec.dims)
    out = np.where(inbounds, out, np.asarray(spec.free_class, dtype=labels.dtype))
    return out, inbounds


def accumulate_visibility(history: list[OccupancyGrid],
                          history_poses: list[Pose],
                          target_pose: Pose) -> VisibilityVolume:
    """Voxels of the target frame observable in at least one history frame.

    A target voxel is observed iff its center, mapped into some history
    frame's ego coordinates, lands inside that frame's grid volume.
    """
    if not history or len(history) != len(history_poses):
        raise ValueError("history grids and poses must be non-empty and equal length")
    spec = history[0].spec
    observed = np.zeros(spec.dims, dtype=bool)
    for grid, pose in zip(history, history_poses):
        if grid.spec != spec:
            raise ValueError("all history grids must share one GridSpec")
        _, inbounds = _source_lookup(spec, pose, target_pose)
        observed |= inbounds
    return VisibilityVolume(spec, observed)


def feature_mask(vol: VisibilityVolume, h1: int, w1: int, epsilon: float) -> FeatureMask:
    """Pillar-level keep mask from per-voxel visibility.

    Cell (h, w) covers a pillar of D * (H/h1) * (W/w1) voxels; it is kept iff
    the observed fraction within the pillar is >= epsilon (inclusive).
    """
    h, w, d = vol.spec.dims
    if h % h1 != 0 or w % w1 != 0:
        raise ValueError(f"grid dims ({h}, {w}) not divisible by mask dims ({h1}, {w1})")
    if not (0.0 < epsilon <= 1.0):
        raise ValueError(f"epsilon must be in (0, 1], got {epsilon}")
    dh, dw = h // h1, w // w1
    frac = (vol.observed
            .reshape(h1, dh, w1, dw, d)
            .mean(axis=(1, 3, 4)))
    return FeatureMask((h1, w1), frac >= epsilon)


def static_voxel_fraction(frames: list[OccupancyGrid], poses: list[Pose]) -> float:
    """Fraction of occupied voxels whose label never changes while visible.

    All frames are resampled into the first pose's frame. A voxel of that
    common grid is occupied if any visible observation of it is non-free, and
    static if every visible observation carries one identical label.
    """
    if len(frames) < 2 or len(frames) != len(poses):
        raise ValueError("need >= 2 frames with matching poses")
    spec = frames[0].spec
    ref_pose = poses[0]
    seen = np.zeros(spec.dims, dtype=bool)
    first_label = np.zeros(spec.dims, dtype=np.uint8)
    static = np.ones(spec.dims, dtype=bool)
    occupied = np.zeros(spec.dims, dtype=bool)
    for grid, pose in zip(frames, poses):
        resampled, vis = resample_grid(grid, pose, ref_pose)
        v = vis.observed
        labels = resampled.labels
        new = v & ~seen
        first_label[new] = labels[new]
        static &= ~v | ~seen | (labels == first_label)
        occupied |= v & (labels != spec.free_class)
        seen |= v
    total = int(occupied.sum())
    if total == 0:
        return 1.0
    return float((static & occupied).sum()) / total
