"""Procedural driving-world generation and voxel/BEV rasterization.

A scene script is a deterministic, fully serializable description of a small
world: ground primitives and clutter in world coordinates, moving box agents
with per-frame waypoints, and the ego trajectory. Rendering places voxel
labels by center-point membership; later primitives win and agents override
statics.

Scenes can optionally carry an "unstructured far field": beyond a per-scene
break distance the coherent road corridor ends and content becomes
short-correlation random blocks. Regions that were never observed in the
history are then statistically unguessable, which is what separates observed
from unobserved skill in evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import GridSpec, OccupancyGrid, Pose, Trajectory, static_voxel_fraction

__all__ = [
    "CLASS_NAMES",
    "CLASS_PALETTE",
    "FRAME_DT",
    "BoxPrimitive",
    "PolylinePrimitive",
    "AgentTrack",
    "SceneScript",
    "GeneratorParams",
    "GenerationError",
    "generate_scene",
    "render_frame",
    "render_layout",
    "render_sequence",
]

FRAME_DT = 0.5  # seconds between frames (2 Hz)

# Toy palette: index = class id. Free must be id 0.
CLASS_NAMES = ("free", "road", "sidewalk", "building",
               "vegetation", "car", "barrier", "truck")
CLASS_PALETTE = ((0, 0, 0), (90, 90, 95), (170, 170, 160), (200, 120, 60),
                 (60, 160, 70), (40, 110, 220), (230, 200, 50), (200, 60, 180))

ROAD, SIDEWALK, BUILDING, VEGETATION, CAR, BARRIER, TRUCK = 1, 2, 3, 4, 5, 6, 7
_AGENT_CLASSES = (CAR, TRUCK)


class GenerationError(RuntimeError):
    """Raised when generator parameters cannot be satisfied."""


@dataclass(frozen=True)
class BoxPrimitive:
    """Axis-aligned world-frame box; membership is half-open per axis."""

    class_id: int
    min_corner: tuple[float, float, float]
    size: tuple[float, float, float]

    def contains(self, points: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.min_corner)
        hi = lo + np.asarray(self.size)
        return np.all((points >= lo) & (points < hi), axis=-1)

    def footprint(self, points_xy: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.min_corner[:2])
        hi = lo + np.asarray(self.size[:2])
        return np.all((points_xy >= lo) & (points_xy < hi), axis=-1)


@dataclass(frozen=True)
class PolylinePrimitive:
    """Widened polyline extruded over a z interval (roads, sidewalks)."""

    class_id: int
    points: tuple[tuple[float, float], ...]
    width: float
    z_range: tuple[float, float]

    def footprint(self, points_xy: np.ndarray) -> np.ndarray:
        pts = np.asarray(self.points)
        half = self.width / 2.0
        hit = np.zeros(points_xy.shape[:-1], dtype=bool)
        for a, b in zip(pts[:-1], pts[1:]):
            ab = b - a
            denom = float(ab @ ab)
            if denom == 0.0:
                dist = np.linalg.norm(points_xy - a, axis=-1)
            else:
                t = np.clip(((points_xy - a) @ ab) / denom, 0.0, 1.0)
                proj = a + t[..., None] * ab
                dist = np.linalg.norm(points_xy - proj, axis=-1)
            hit |= dist <= half
        return hit

    def contains(self, points: np.ndarray) -> np.ndarray:
        z0, z1 = self.z_range
        in_z = (points[..., 2] >= z0) & (points[..., 2] < z1)
        return in_z & self.footprint(points[..., :2])


@dataclass(frozen=True)
class AgentTrack:
    """Moving axis-aligned box; waypoints give the center xy per frame."""

    class_id: int
    extent: tuple[float, float, float]
    waypoints: tuple[tuple[float, float], ...]
    z_min: float

    def box_at(self, time: float) -> BoxPrimitive:
        f = time / FRAME_DT
        i = int(np.clip(math.floor(f), 0, len(self.waypoints) - 1))
        j = min(i + 1, len(self.waypoints) - 1)
        alpha = f - i
        wp = np.asarray(self.waypoints)
        center = (1 - alpha) * wp[i] + alpha * wp[j]
        ex, ey, ez = self.extent
        return BoxPrimitive(self.class_id,
                            (center[0] - ex / 2, center[1] - ey / 2, self.z_min),
                            (ex, ey, ez))


@dataclass(frozen=True)
class SceneScript:
    """Deterministic world description; everything rendering needs."""

    static_primitives: tuple
    agents: tuple[AgentTrack, ...]
    ego_trajectory: Trajectory
    duration: float
    seed: int


@dataclass(frozen=True)
class GeneratorParams:
    """Knobs for procedural scene generation.

    Ranges are inclusive uniform draws. ``dynamic_fraction`` asks the
    generator to size agents so that roughly that fraction of the occupied
    voxels change label over the scene (measured at a stationary reference).
    """

    spec: GridSpec = field(default_factory=GridSpec.toy)
    duration: float = 9.5
    ego_speed: tuple[float, float] = (1.5, 2.5)
    ego_yaw_rate: tuple[float, float] = (0.0, 0.0)
    road_width: tuple[float, float] = (4.0, 7.0)
    sidewalk_width: float = 1.5
    num_buildings: tuple[int, int] = (4, 7)
    num_vegetation: tuple[int, int] = (2, 4)
    num_barriers: tuple[int, int] = (1, 3)
    num_agents: tuple[int, int] = (1, 2)
    agent_speed: tuple[float, float] = (1.0, 3.0)
    far_field: bool = False
    far_break: tuple[float, float] = (12.0, 18.0)
    far_block_density: float = 0.035
    dynamic_fraction: float | None = None
    agent_scale: float = 1.0    # multiplies agent box footprints
    clutter_scale: float = 1.0  # multiplies static clutter footprints

    @property
    def num_frames(self) -> int:
        return int(round(self.duration / FRAME_DT)) + 1


def _uniform(rng, rang):
    return float(rng.uniform(rang[0], rang[1]))


def _int_uniform(rng, rang):
    return int(rng.integers(rang[0], rang[1] + 1))


def _build_ego(rng, params) -> Trajectory:
    speed = _uniform(rng, params.ego_speed)
    yaw_rate = _uniform(rng, params.ego_yaw_rate)
    poses = []
    x = y = yaw = 0.0
    for f in range(params.num_frames):
        poses.append(Pose.from_xyyaw(x, y, yaw, timestamp=f * FRAME_DT))
        yaw += yaw_rate * FRAME_DT
        x += speed * math.cos(yaw) * FRAME_DT
        y += speed * math.sin(yaw) * FRAME_DT
    return Trajectory(tuple(poses))


def _corridor_frame(ego: Trajectory, extent: float):
    """Centerline points from behind the start to `extent` m past the end,
    following the ego path, with per-point left normals."""
    pts = [np.array([p.translation[0], p.translation[1]]) for p in ego.poses]
    head0 = np.array([math.cos(ego[0].yaw), math.sin(ego[0].yaw)])
    head1 = np.array([math.cos(ego[-1].yaw), math.sin(ego[-1].yaw)])
    line = [pts[0] - extent * head0] + pts + [pts[-1] + extent * head1]
    line = np.asarray(line)
    normals = []
    for i in range(len(line)):
        a = line[max(i - 1, 0)]
        b = line[min(i + 1, len(line) - 1)]
        d = b - a
        n = np.array([-d[1], d[0]])
        norm = np.linalg.norm(n)
        normals.append(n / norm if norm > 0 else np.array([0.0, 1.0]))
    return line, np.asarray(normals)


def _clip_line(line, normals, max_arc):
    """Truncate a centerline at arc length `max_arc` from its second point
    (the scene start)."""
    arcs = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(line, axis=0), axis=1))])
    start_arc = arcs[1]
    keep = arcs - start_arc <= max_arc
    keep[0] = True
    idx = np.flatnonzero(keep)
    return line[idx], normals[idx]


def _mystery_stack(rng, x, y):
    """Short-correlation random block column: 1-4 segments of ~1 m along x,
    each with an independent class, at a random height. Content beyond any
    observation boundary is therefore unguessable from the visible side."""
    prims = []
    n_seg = _int_uniform(rng, (1, 4))
    width = _uniform(rng, (1.0, 2.0))
    for s in range(n_seg):
        cls = int(rng.choice([ROAD, SIDEWALK, BUILDING, VEGETATION, BARRIER, TRUCK, CAR]))
        height = _uniform(rng, (0.5, 2.5))
        prims.append(BoxPrimitive(cls,
                                  (x + s * 1.0, y - width / 2, -1.0),
                                  (1.0, width, 1.0 + height)))
    return prims


def generate_scene(seed: int, params: GeneratorParams) -> SceneScript:
    """Deterministic procedural scene; identical (seed, params) give an
    identical script."""
    rng = np.random.default_rng(seed)
    ego = _build_ego(rng, params)

    behind = 24.0
    ahead = 40.0
    line, normals = _corridor_frame(ego, extent=max(behind, ahead))
    road_width = _uniform(rng, params.road_width)
    sw = params.sidewalk_width

    if params.far_field:
        break_arc = behind + _uniform(rng, params.far_break)
        corridor_line, corridor_normals = _clip_line(line, normals, break_arc - behind)
    else:
        corridor_line, corridor_normals = line, normals

    statics: list = []
    statics.append(PolylinePrimitive(
        ROAD, tuple(map(tuple, corridor_line)), road_width, (-1.0, -0.5)))
    for side in (-1.0, 1.0):
        offset = corridor_line + side * (road_width / 2 + sw / 2) * corridor_normals
        statics.append(PolylinePrimitive(
            SIDEWALK, tuple(map(tuple, offset)), sw, (-1.0, -0.2)))

    # clutter along the corridor, beyond the sidewalks
    corridor_len = float(np.sum(np.linalg.norm(np.diff(corridor_line, axis=0), axis=1)))
    arcs = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(corridor_line, axis=0), axis=1))])

    def _point_at(arc, lateral):
        i = int(np.searchsorted(arcs, arc, side="right") - 1)
        i = min(max(i, 0), len(corridor_line) - 2)
        seg = corridor_line[i + 1] - corridor_line[i]
        seg_len = np.linalg.norm(seg)
        t = 0.0 if seg_len == 0 else (arc - arcs[i]) / seg_len
        base = corridor_line[i] + np.clip(t, 0, 1) * seg
        return base + lateral * corridor_normals[i]

    def _place_boxes(count, cls, size_rng, lat_rng, height_rng):
        for _ in range(count):
            arc = rng.uniform(0, corridor_len)
            side = rng.choice([-1.0, 1.0])
            lateral = side * (road_width / 2 + sw + _uniform(rng, lat_rng))
            center = _point_at(arc, lateral)
            sx = _uniform(rng, size_rng) * params.clutter_scale
            sy = _uniform(rng, size_rng) * params.clutter_scale
            h = _uniform(rng, height_rng)
            statics.append(BoxPrimitive(
                cls, (center[0] - sx / 2, center[1] - sy / 2, -0.5), (sx, sy, h)))

    _place_boxes(_int_uniform(rng, params.num_buildings), BUILDING,
                 (3.0, 7.0), (0.5, 5.0), (1.5, 3.4))
    _place_boxes(_int_uniform(rng, params.num_vegetation), VEGETATION,
                 (2.0, 4.5), (0.5, 7.0), (1.0, 2.4))
    _place_boxes(_int_uniform(rng, params.num_barriers), BARRIER,
                 (2.5, 4.5), (0.0, 1.0), (1.2, 2.2))

    if params.far_field:
        statics.extend(_far_field_statics(rng, params, ego, line, normals, break_arc, ahead))

    agents = _spawn_agents(rng, params, ego, corridor_line, corridor_normals,
                           arcs, road_width, behind)

    script = SceneScript(tuple(statics), tuple(agents), ego, params.duration, seed)
    if params.dynamic_fraction is not None:
        script = _tune_dynamic_budget(rng, script, params)
    return script


def _far_field_statics(rng, params, ego, line, normals, break_arc, ahead):
    """Unstructured content past the corridor break: random ground strips in
    the central band plus mystery stacks everywhere, including lateral bands
    alongside the corridor."""
    prims = []
    arcs = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(line, axis=0), axis=1))])
    total = arcs[-1]

    def _point_at(arc, lateral):
        i = int(np.searchsorted(arcs, np.clip(arc, 0, total), side="right") - 1)
        i = min(max(i, 0), len(line) - 2)
        seg = line[i + 1] - line[i]
        seg_len = np.linalg.norm(seg)
        t = 0.0 if seg_len == 0 else (np.clip(arc, 0, total) - arcs[i]) / seg_len
        return line[i] + np.clip(t, 0, 1) * seg + lateral * normals[i]

    # random ground strips past the break (class or nothing, short pieces)
    arc = break_arc
    while arc < total:
        piece = _uniform(rng, (1.0, 2.5))
        lateral = rng.uniform(-10.0, 10.0)
        cls = rng.choice([0, 0, ROAD, SIDEWALK, VEGETATION, BARRIER])
        if cls != 0:
            center = _point_at(arc, lateral)
            width = _uniform(rng, (2.0, 6.0))
            prims.append(BoxPrimitive(int(cls),
                                      (center[0], center[1] - width / 2, -1.0),
                                      (piece, width, 0.5)))
        arc += piece

    # mystery stacks: past the break and in lateral bands alongside
    area_far = (total - break_arc) * 36.0
    n_far = int(area_far * params.far_block_density)
    for _ in range(n_far):
        arc = rng.uniform(break_arc, total)
        lateral = rng.uniform(-18.0, 18.0)
        center = _point_at(arc, lateral)
        prims.extend(_mystery_stack(rng, center[0], center[1]))
    n_side = int(break_arc * 14.0 * params.far_block_density)
    for _ in range(n_side):
        arc = rng.uniform(0, break_arc)
        lateral = rng.choice([-1.0, 1.0]) * rng.uniform(11.0, 18.0)
        center = _point_at(arc, lateral)
        prims.extend(_mystery_stack(rng, center[0], center[1]))
    return prims


def _spawn_agents(rng, params, ego, line, normals, arcs, road_width, behind):
    count = _int_uniform(rng, params.num_agents)
    if count == 0:
        return []
    total = arcs[-1]
    usable = total - behind - 4.0
    if usable < 2.0 * count:
        raise GenerationError(
            f"cannot fit {count} agents on {usable:.1f} m of usable road")
    agents = []
    slots = rng.permutation(count)
    for a in range(count):
        start_arc = behind - 4.0 + (slots[a] + rng.uniform(0.2, 0.8)) * usable / count
        lateral = rng.uniform(-road_width / 2 + 1.2, road_width / 2 - 1.2)
        speed = _uniform(rng, params.agent_speed) * rng.choice([-1.0, 1.0])
        cls = int(rng.choice(_AGENT_CLASSES))
        length, width, height = (4.0, 2.0, 1.5) if cls == CAR else (6.0, 2.4, 2.4)
        length *= params.agent_scale
        width *= params.agent_scale
        waypoints = []
        for f in range(params.num_frames):
            arc = start_arc + speed * f * FRAME_DT
            arc = float(np.clip(arc, 0.0, total))
            i = int(np.searchsorted(arcs, arc, side="right") - 1)
            i = min(max(i, 0), len(line) - 2)
            seg = line[i + 1] - line[i]
            seg_len = np.linalg.norm(seg)
            t = 0.0 if seg_len == 0 else (arc - arcs[i]) / seg_len
            p = line[i] + np.clip(t, 0, 1) * seg + lateral * normals[i]
            waypoints.append((float(p[0]), float(p[1])))
        agents.append(AgentTrack(cls, (length, width, height),
                                 tuple(waypoints), z_min=-0.5))
    return agents


def _tune_dynamic_budget(rng, script: SceneScript, params: GeneratorParams) -> SceneScript:
    """Scale agent footprints so the measured dynamic occupied fraction hits
    ``params.dynamic_fraction``. Measured at the first ego pose held fixed so
    the measurement is free of resampling noise."""
    target_static = 1.0 - params.dynamic_fraction

    def _try(scale):
        scaled = replace(script, agents=tuple(
            replace(agent, extent=(agent.extent[0] * scale,
                                   agent.extent[1] * scale,
                                   agent.extent[2]))
            for agent in script.agents))
        frac = _measure_static_fraction(scaled, params)
        return abs(frac - target_static), scaled, scale

    best = min((_try(s) for s in np.linspace(0.5, 2.4, 9)), key=lambda r: r[0])
    lo, hi = max(0.2, best[2] - 0.25), best[2] + 0.25
    best = min([best] + [_try(s) for s in np.linspace(lo, hi, 11)],
               key=lambda r: r[0])
    if best[0] > 0.02:
        raise GenerationError(
            f"could not meet dynamic_fraction={params.dynamic_fraction} "
            f"(best miss {best[0]:.3f})")
    return best[1]


def _measure_static_fraction(script: SceneScript, params: GeneratorParams) -> float:
    ref = script.ego_trajectory[0]
    frames = []
    times = [p.timestamp for p in script.ego_trajectory.poses]
    for time in times:
        frames.append(render_frame(script, time, ref, params.spec))
    return static_voxel_fraction(frames, [ref] * len(frames))


def render_frame(script: SceneScript, time: float, ego_pose: Pose,
                 spec: GridSpec) -> OccupancyGrid:
    """Rasterize the script at a time instant into an ego-frame voxel grid.

    Labels are assigned by voxel-center membership; statics in list order
    (later wins), then agents override.
    """
    if not (0.0 <= time <= script.duration + 1e-9):
        raise ValueError(f"time {time} outside scene duration {script.duration}")
    centers = spec.voxel_centers().reshape(-1, 3)
    world = ego_pose.apply(centers)
    labels = np.full(centers.shape[0], spec.free_class, dtype=np.uint8)
    for prim in script.static_primitives:
        hit = prim.contains(world)
        labels[hit] = prim.class_id
    for agent in script.agents:
        hit = agent.box_at(time).contains(world)
        labels[hit] = agent.class_id
    return OccupancyGrid(spec, labels.reshape(spec.dims))


def render_layout(script: SceneScript, time: float, ego_pose: Pose,
                  spec: GridSpec) -> np.ndarray:
    """BEV semantic raster (H, W): static footprints with agent boxes splatted
    on top. An agent marks exactly the columns where its box covers at least
    one voxel center, so its footprint matches the column-wise union of the
    3D render."""
    h, w, d = spec.dims
    centers = spec.voxel_centers()[:, :, 0, :2].reshape(-1, 2)
    world_xy = (np.concatenate([centers, np.zeros((centers.shape[0], 1))], axis=1)
                @ ego_pose.rotation.T + ego_pose.translation)[:, :2]
    layout = np.full(h * w, spec.free_class, dtype=np.uint8)
    for prim in script.static_primitives:
        layout[prim.footprint(world_xy)] = prim.class_id
    world_all = ego_pose.apply(spec.voxel_centers().reshape(-1, 3))
    for agent in script.agents:
        hit = agent.box_at(time).contains(world_all).reshape(h, w, d)
        layout[hit.any(axis=2).reshape(-1)] = agent.class_id
    return layout.reshape(h, w)


def render_sequence(script: SceneScript, spec: GridSpec, layouts: bool = False):
    """Render every trajectory frame in its own ego frame.

    Returns (grids, poses[, layout rasters])."""
    grids, rasters = [], []
    poses = list(script.ego_trajectory.poses)
    for pose in poses:
        grids.append(render_frame(script, pose.timestamp, pose, spec))
        if layouts:
            rasters.append(render_layout(script, pose.timestamp, pose, spec))
    if layouts:
        return grids, poses, rasters
    return grids, poses
