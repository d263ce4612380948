"""On-disk dataset layout, manifest bookkeeping, windowing, and CBGS weights.

Layout under a dataset root:

    manifest.json                  grid spec, class names/palette, split,
                                   per-sequence path/length/class histogram
    <scene_id>/frame_<k>.labels    zlib-compressed uint8 voxel labels,
                                   row-major (H, W, D)
    <scene_id>/poses.json          [{x, y, z, yaw | quaternion, timestamp}]
    <scene_id>/layout_<k>.labels   optional zlib-compressed uint8 (H, W) raster
    <scene_id>/evalmask_<k>.labels optional evaluation-mask override, same
                                   encoding as frames (reserved; not generated)
"""

from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from .grid import GridSpec, OccupancyGrid, Pose
from .synth import (
    CLASS_NAMES,
    CLASS_PALETTE,
    GeneratorParams,
    generate_scene,
    render_sequence,
)

__all__ = [
    "SequenceInfo",
    "DatasetManifest",
    "SequenceSample",
    "DatasetBuildParams",
    "build_dataset",
    "load_manifest",
    "load_sequence",
    "iter_windows",
    "cbgs_weights",
]


@dataclass(frozen=True)
class SequenceInfo:
    scene_id: str
    path: str
    length: int
    class_histogram: tuple[int, ...]


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    spec: GridSpec
    class_names: tuple[str, ...]
    palette: tuple[tuple[int, int, int], ...]
    sequences: tuple[SequenceInfo, ...]
    split: dict
    has_layouts: bool = False

    def scenes(self, split: str | None = None) -> list[SequenceInfo]:
        if split is None:
            return list(self.sequences)
        return [s for s in self.sequences if self.split.get(s.scene_id) == split]


@dataclass
class SequenceSample:
    """One training/eval window: t history + tau future frames."""

    history: list[OccupancyGrid]
    history_poses: list[Pose]
    future: list[OccupancyGrid]
    future_poses: list[Pose]
    layouts: list[np.ndarray] | None
    scene_id: str
    start: int

    @property
    def t(self) -> int:
        return len(self.history)

    @property
    def tau(self) -> int:
        return len(self.future)


@dataclass(frozen=True)
class DatasetBuildParams:
    """``generators``, when given, cycles per scene (scene i uses
    generators[i % len]); otherwise every scene uses ``generator``."""

    out_dir: str
    num_scenes: int
    generator: GeneratorParams = field(default_factory=GeneratorParams)
    generators: tuple[GeneratorParams, ...] | None = None
    seed: int = 0
    val_scenes: int = 0
    layouts: bool = False

    def generator_for(self, idx: int) -> GeneratorParams:
        if self.generators:
            return self.generators[idx % len(self.generators)]
        return self.generator


def _write_labels(path: str, labels: np.ndarray) -> None:
    payload = zlib.compress(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def _read_labels(path: str, shape: tuple[int, ...]) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            raw = zlib.decompress(f.read())
    except OSError as exc:
        raise OSError(f"failed reading label file {path}: {exc}") from exc
    arr = np.frombuffer(raw, dtype=np.uint8)
    if arr.size != int(np.prod(shape)):
        raise ValueError(f"{path}: expected {np.prod(shape)} voxels, got {arr.size}")
    return arr.reshape(shape)


def _pose_to_dict(pose: Pose) -> dict:
    return {
        "x": float(pose.translation[0]),
        "y": float(pose.translation[1]),
        "z": float(pose.translation[2]),
        "yaw": pose.yaw,
        "timestamp": pose.timestamp,
    }


def _pose_from_dict(entry: dict) -> Pose:
    t = np.array([entry["x"], entry["y"], entry.get("z", 0.0)])
    if "quaternion" in entry:
        w, x, y, z = entry["quaternion"]
        rot = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])
        return Pose(translation=t, rotation=rot, timestamp=entry["timestamp"])
    yaw = entry["yaw"]
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return Pose(translation=t, rotation=rot, timestamp=entry["timestamp"])


def _spec_to_dict(spec: GridSpec) -> dict:
    return {
        "dims": list(spec.dims),
        "voxel_size": spec.voxel_size,
        "origin": list(spec.origin),
        "num_classes": spec.num_classes,
        "free_class": spec.free_class,
    }


def _spec_from_dict(d: dict) -> GridSpec:
    return GridSpec(dims=tuple(d["dims"]), voxel_size=d["voxel_size"],
                    origin=tuple(d["origin"]), num_classes=d["num_classes"],
                    free_class=d["free_class"])


def build_dataset(params: DatasetBuildParams) -> DatasetManifest:
    """Generate, render, and serialize a synthetic dataset; returns the
    manifest after writing everything to params.out_dir."""
    spec = params.generator_for(0).spec
    if params.generators and any(g.spec != spec for g in params.generators):
        raise ValueError("all scene generators must share one GridSpec")
    os.makedirs(params.out_dir, exist_ok=True)
    sequences = []
    split: dict = {}
    for idx in range(params.num_scenes):
        scene_id = f"scene_{idx:04d}"
        scene_dir = os.path.join(params.out_dir, scene_id)
        os.makedirs(scene_dir, exist_ok=True)
        script = generate_scene(params.seed + idx, params.generator_for(idx))
        rendered = render_sequence(script, spec, layouts=params.layouts)
        grids, poses = rendered[0], rendered[1]
        hist = np.zeros(spec.num_classes, dtype=np.int64)
        for k, grid in enumerate(grids):
            _write_labels(os.path.join(scene_dir, f"frame_{k}.labels"), grid.labels)
            hist += np.bincount(grid.labels.reshape(-1), minlength=spec.num_classes)
        if params.layouts:
            for k, raster in enumerate(rendered[2]):
                _write_labels(os.path.join(scene_dir, f"layout_{k}.labels"), raster)
        with open(os.path.join(scene_dir, "poses.json"), "w") as f:
            json.dump([_pose_to_dict(p) for p in poses], f, indent=1)
        sequences.append(SequenceInfo(scene_id=scene_id, path=scene_id,
                                      length=len(grids),
                                      class_histogram=tuple(int(v) for v in hist)))
        split[scene_id] = ("val" if idx >= params.num_scenes - params.val_scenes
                           else "train")

    manifest = DatasetManifest(
        root=params.out_dir, spec=spec,
        class_names=CLASS_NAMES[:spec.num_classes],
        palette=CLASS_PALETTE[:spec.num_classes],
        sequences=tuple(sequences), split=split,
        has_layouts=params.layouts,
    )
    payload = {
        "spec": _spec_to_dict(spec),
        "class_names": list(manifest.class_names),
        "palette": [list(c) for c in manifest.palette],
        "split": split,
        "has_layouts": params.layouts,
        "sequences": [
            {"scene_id": s.scene_id, "path": s.path, "length": s.length,
             "class_histogram": list(s.class_histogram)}
            for s in sequences
        ],
    }
    tmp = os.path.join(params.out_dir, "manifest.json.tmp")
    with open(tmp, "w") as f:
        json.dump(payload, f, indent=1)
    os.replace(tmp, os.path.join(params.out_dir, "manifest.json"))
    return manifest


def load_manifest(root: str) -> DatasetManifest:
    path = os.path.join(root, "manifest.json")
    with open(path) as f:
        payload = json.load(f)
    sequences = []
    for entry in payload["sequences"]:
        scene_dir = os.path.join(root, entry["path"])
        if not os.path.isdir(scene_dir):
            raise FileNotFoundError(f"manifest references missing scene dir {scene_dir}")
        sequences.append(SequenceInfo(
            scene_id=entry["scene_id"], path=entry["path"],
            length=entry["length"],
            class_histogram=tuple(entry["class_histogram"])))
    return DatasetManifest(
        root=root, spec=_spec_from_dict(payload["spec"]),
        class_names=tuple(payload["class_names"]),
        palette=tuple(tuple(c) for c in payload["palette"]),
        sequences=tuple(sequences), split=payload["split"],
        has_layouts=payload.get("has_layouts", False),
    )


def load_sequence(manifest: DatasetManifest, scene_id: str,
                  layouts: bool = False):
    """Load every frame of one scene; returns (grids, poses[, layouts])."""
    info = next((s for s in manifest.sequences if s.scene_id == scene_id), None)
    if info is None:
        raise KeyError(f"scene {scene_id} not in manifest")
    scene_dir = os.path.join(manifest.root, info.path)
    spec = manifest.spec
    grids = [OccupancyGrid(spec, _read_labels(
        os.path.join(scene_dir, f"frame_{k}.labels"), spec.dims))
        for k in range(info.length)]
    with open(os.path.join(scene_dir, "poses.json")) as f:
        poses = [_pose_from_dict(e) for e in json.load(f)]
    if len(poses) != info.length:
        raise ValueError(f"{scene_id}: {len(poses)} poses for {info.length} frames")
    if not layouts:
        return grids, poses
    h, w, _ = spec.dims
    rasters = [_read_labels(os.path.join(scene_dir, f"layout_{k}.labels"), (h, w))
               for k in range(info.length)]
    return grids, poses, rasters


def iter_windows(manifest: DatasetManifest, t: int = 4, tau: int = 6,
                 split: str | None = None, stride: int = 1,
                 layouts: bool = False) -> list[SequenceSample]:
    """Slice every scene of a split into (t history + tau future) windows."""
    samples = []
    for info in manifest.scenes(split):
        loaded = load_sequence(manifest, info.scene_id, layouts=layouts)
        grids, poses = loaded[0], loaded[1]
        rasters = loaded[2] if layouts else None
        for s in range(0, info.length - (t + tau) + 1, stride):
            samples.append(SequenceSample(
                history=grids[s:s + t],
                history_poses=poses[s:s + t],
                future=grids[s + t:s + t + tau],
                future_poses=poses[s + t:s + t + tau],
                layouts=rasters[s + t:s + t + tau] if rasters else None,
                scene_id=info.scene_id,
                start=s,
            ))
    return samples


def cbgs_weights(manifest: DatasetManifest, split: str | None = "train") -> np.ndarray:
    """Class-balanced sequence sampling weights.

    weight(seq) is proportional to the mean, over classes present in the
    sequence, of the inverse global class frequency; normalized to sum 1.
    """
    scenes = manifest.scenes(split)
    if not scenes:
        raise ValueError(f"no sequences in split {split!r}")
    hists = np.array([s.class_histogram for s in scenes], dtype=np.float64)
    global_counts = hists.sum(axis=0)
    total = global_counts.sum()
    freq = global_counts / total
    weights = np.zeros(len(scenes))
    for i, h in enumerate(hists):
        present = h > 0
        weights[i] = (1.0 / freq[present]).mean()
    return weights / weights.sum()
