#!/usr/bin/env python3
# Copyright (c) Meta Platforms, Inc. and affiliates.
# All rights reserved.
#
# This source code is licensed under the BSD-style license found in the
# LICENSE file in the root directory of this source tree.

"""
Deterministic synthetic world.

Scenes are floor-standing yaw boxes. Trajectories move a gravity-aligned
camera at eye height with a constant downward tilt. Depth is rendered by
casting one ray per pixel against every box with the slab method; a noisy
oracle stands in for the 2D detector; a seeded latency model stands in for
the network and the detector's compute.

All randomness is drawn from ``numpy.random.default_rng`` seeded explicitly by
the caller.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .config import ConfigError, load_packaged_yaml, load_yaml, load_yaml_file
from .depthlift import DepthFrame
from .geometry import (
    Box2D,
    Box3D,
    box3d_corners,
    CameraIntrinsics,
    clip_box2d,
    gravity_aligned_pose,
    inverse_pose,
    Pose,
    project_points,
    transform_points,
)

logger: logging.Logger = logging.getLogger(__name__)

DEFAULT_EYE_HEIGHT: float = 1.4
CIRCLING_RADIUS_RANGE: Tuple[float, float] = (0.5, 10.0)
_MIN_BOX_PX: float = 4.0
_PARALLEL_EPS: float = 1e-12


def depth_intrinsics() -> CameraIntrinsics:
    """
    360x360 depth camera, about 67 degrees field of view.
    """
    return CameraIntrinsics(
        fx=270.0, fy=270.0, cx=180.0, cy=180.0, width=360, height=360
    )


def rgb_intrinsics() -> CameraIntrinsics:
    """
    1280x720 camera sharing the depth camera's field of view.
    """
    return CameraIntrinsics(
        fx=960.0, fy=540.0, cx=640.0, cy=360.0, width=1280, height=720
    )


def derive_seed(base: int, *keys: int) -> int:
    """
    Derive an independent child seed from a base seed and integer keys.
    """
    return int(np.random.SeedSequence([base, *keys]).generate_state(1)[0])


def class_dims() -> Dict[str, Tuple[float, float, float]]:
    table = load_packaged_yaml("classes.yaml")
    return {name: tuple(float(v) for v in dims) for name, dims in table.items()}


@dataclass(frozen=True)
class SceneObject:
    class_id: str
    box: Box3D


@dataclass
class Scene:
    objects: List[SceneObject] = field(default_factory=list)
    floor_height: float = 0.0
    target: Optional[np.ndarray] = None
    name: str = "scene"

    def __post_init__(self) -> None:
        if self.target is None:
            if self.objects:
                self.target = np.mean([o.box.center for o in self.objects], axis=0)
            else:
                self.target = np.array([0.0, 0.0, self.floor_height])
        self.target = np.asarray(self.target, dtype=np.float64)

    def ground_truth(
        self, indices: Optional[Sequence[int]] = None
    ) -> List[Tuple[str, Box3D]]:
        if indices is None:
            indices = range(len(self.objects))
        return [(self.objects[i].class_id, self.objects[i].box) for i in indices]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "floor_height": self.floor_height,
            "target": [float(v) for v in self.target],
            "objects": [
                {
                    "class_id": o.class_id,
                    "center": [float(v) for v in o.box.center],
                    "dims": [float(v) for v in o.box.dims],
                    "yaw": float(o.box.yaw),
                }
                for o in self.objects
            ],
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "Scene":
        if not isinstance(d, dict) or "objects" not in d:
            raise ConfigError("A scene needs an `objects` list.")
        defaults = class_dims()
        objects = []
        for i, entry in enumerate(d["objects"]):
            try:
                class_id = str(entry["class_id"])
                dims = entry.get("dims") or defaults[class_id]
                box = Box3D(
                    center=np.array(entry["center"], dtype=np.float64),
                    dims=np.array(dims, dtype=np.float64),
                    yaw=float(entry.get("yaw", 0.0)),
                )
            except KeyError as e:
                raise ConfigError(f"Scene object {i} is missing {e}.") from e
            except (TypeError, ValueError) as e:
                raise ConfigError(f"Scene object {i} is invalid: {e}") from e
            objects.append(SceneObject(class_id=class_id, box=box))
        target = d.get("target")
        return cls(
            objects=objects,
            floor_height=float(d.get("floor_height", 0.0)),
            target=None if target is None else np.array(target, dtype=np.float64),
            name=str(d.get("name", "scene")),
        )

    @classmethod
    def from_yaml(cls, yaml_str: str) -> "Scene":
        return cls.from_dict(load_yaml(yaml_str))

    @classmethod
    def from_file(cls, path: str) -> "Scene":
        return cls.from_dict(load_yaml_file(path))


def acceptance_scene() -> Scene:
    return Scene.from_dict(load_packaged_yaml("acceptance_scene.yaml"))


class Scenario(Enum):
    STATIC = "static"
    PARALLEL = "parallel"
    AWAY_CLOSE = "away_close"
    CIRCLING = "circling"


@dataclass(frozen=True)
class TrajectorySpec:
    """
    A mobility pattern.

    Attributes:
        scenario: Movement kind.
        speed: Camera speed in m/s.
        range: Path length in meters for straight-line scenarios.
        radius: Horizontal distance to the target when circling.
        fps: Capture rate.
        target: Point the camera looks at. Defaults to the scene's target.
        start_distance: Initial horizontal distance to the target. Defaults
            to 2 m, except 3 m when approaching and ``radius`` when circling.
        bearing: Direction from the target to the starting camera position.
        approach: For AwayClose, move towards (True) or away from the target.
        track_target: Keep the target centered by yawing the camera. Circling
            always tracks; the other scenarios keep their initial heading.
        duration: Length of a static capture in seconds.
        sweep: Angle covered when circling, in radians.
        eye_height: Camera height above the floor.
        tilt: Downward pitch. Defaults to looking at the target from the
            starting position.
    """

    scenario: Scenario = Scenario.PARALLEL
    speed: float = 1.0
    range: float = 2.0
    radius: float = 1.5
    fps: float = 30.0
    target: Optional[Tuple[float, float, float]] = None
    start_distance: Optional[float] = None
    bearing: float = math.pi
    approach: bool = True
    track_target: bool = False
    duration: float = 2.0
    sweep: float = 2 * math.pi
    eye_height: float = DEFAULT_EYE_HEIGHT
    tilt: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.speed > 0:
            raise ConfigError(f"speed must be positive (got {self.speed}).")
        if not self.range > 0:
            raise ConfigError(f"range must be positive (got {self.range}).")
        if not self.fps > 0:
            raise ConfigError(f"fps must be positive (got {self.fps}).")
        if not self.duration > 0:
            raise ConfigError(f"duration must be positive (got {self.duration}).")

    def resolved_start_distance(self) -> float:
        if self.scenario == Scenario.CIRCLING:
            return self.radius
        if self.start_distance is not None:
            return self.start_distance
        if self.scenario == Scenario.AWAY_CLOSE:
            return 3.0 if self.approach else 1.0
        return 2.0


def _tick_count(path_length: float, step: float) -> int:
    return int(math.floor(path_length / step + 1e-9)) + 1


def make_trajectory(
    spec: TrajectorySpec, scene_target: Optional[Sequence[float]] = None
) -> List[Tuple[float, Pose]]:
    """
    Generate timestamped camera poses for a mobility pattern.

    Consecutive camera positions are exactly ``speed / fps`` apart (chord
    length when circling). Timestamps are ``k / fps``.
    """
    if spec.target is not None:
        target = np.asarray(spec.target, dtype=np.float64)
    elif scene_target is not None:
        target = np.asarray(scene_target, dtype=np.float64)
    else:
        target = np.zeros(3)
    step = spec.speed / spec.fps
    start_dist = spec.resolved_start_distance()
    if not start_dist > 0:
        raise ConfigError(f"start distance must be positive (got {start_dist}).")
    tilt = spec.tilt
    if tilt is None:
        tilt = math.atan2(spec.eye_height - target[2], start_dist)
    outward = np.array([math.cos(spec.bearing), math.sin(spec.bearing), 0.0])
    lateral = np.array([-outward[1], outward[0], 0.0])
    ground_target = np.array([target[0], target[1], spec.eye_height])
    start = ground_target + start_dist * outward
    facing = math.atan2(-outward[1], -outward[0])

    def _heading(position: np.ndarray) -> float:
        return math.atan2(target[1] - position[1], target[0] - position[0])

    positions: List[np.ndarray] = []
    if spec.scenario == Scenario.STATIC:
        n = _tick_count(spec.duration, 1.0 / spec.fps)
        positions = [start] * n
    elif spec.scenario == Scenario.PARALLEL:
        n = _tick_count(spec.range, step)
        origin = start - lateral * spec.range / 2
        positions = [origin + lateral * (k * step) for k in range(n)]
    elif spec.scenario == Scenario.AWAY_CLOSE:
        n = _tick_count(spec.range, step)
        direction = -outward if spec.approach else outward
        final = start_dist - spec.range if spec.approach else start_dist + spec.range
        if not final > 0:
            raise ConfigError(
                f"AwayClose would pass through the target "
                f"(start {start_dist} m, range {spec.range} m)."
            )
        positions = [start + direction * (k * step) for k in range(n)]
    elif spec.scenario == Scenario.CIRCLING:
        lo, hi = CIRCLING_RADIUS_RANGE
        if not lo <= spec.radius <= hi:
            raise ConfigError(
                f"Circling radius must be within [{lo}, {hi}] m (got {spec.radius})."
            )
        if step >= 2 * spec.radius:
            raise ConfigError("Circling step is longer than the circle's diameter.")
        dtheta = 2 * math.asin(step / (2 * spec.radius))
        n = _tick_count(spec.sweep, dtheta)
        positions = [
            ground_target
            + spec.radius
            * np.array(
                [
                    math.cos(spec.bearing + k * dtheta),
                    math.sin(spec.bearing + k * dtheta),
                    0.0,
                ]
            )
            for k in range(n)
        ]
    else:
        raise ConfigError(f"Unknown scenario {spec.scenario}.")

    tracks = spec.track_target or spec.scenario == Scenario.CIRCLING
    trajectory = []
    for k, position in enumerate(positions):
        heading = _heading(position) if tracks else facing
        trajectory.append(
            (k / spec.fps, gravity_aligned_pose(position, heading=heading, tilt=tilt))
        )
    return trajectory


@dataclass(frozen=True)
class NoiseSpec:
    bbox_jitter_px: float = 2.0
    drop_prob: float = 0.0
    depth_noise_m: float = 0.005
    depth_dropout: float = 0.02
    edge_dropout_band_px: int = 2
    edge_dropout_prob: float = 0.8

    def __post_init__(self) -> None:
        for name in ("drop_prob", "depth_dropout", "edge_dropout_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1] (got {value}).")
        for name in ("bbox_jitter_px", "depth_noise_m", "edge_dropout_band_px"):
            value = getattr(self, name)
            if value < 0:
                raise ConfigError(f"{name} must be >= 0 (got {value}).")

    @classmethod
    def zero(cls) -> "NoiseSpec":
        return cls(
            bbox_jitter_px=0.0,
            drop_prob=0.0,
            depth_noise_m=0.0,
            depth_dropout=0.0,
            edge_dropout_band_px=0,
            edge_dropout_prob=0.0,
        )


@dataclass(frozen=True)
class LatencySpec:
    fixed: float = 0.020
    jitter: float = 0.005
    model_compute: float = 0.013

    def __post_init__(self) -> None:
        for name in ("fixed", "jitter", "model_compute"):
            value = getattr(self, name)
            if value < 0:
                raise ConfigError(f"{name} must be >= 0 (got {value}).")


def delay(lat: LatencySpec, send_time: float, rng_seed: int) -> float:
    """
    Arrival time of a result sent at ``send_time``.
    """
    jitter = 0.0
    if lat.jitter > 0:
        jitter = float(np.random.default_rng(rng_seed).uniform(-lat.jitter, lat.jitter))
    return max(send_time, send_time + lat.fixed + lat.model_compute + jitter)


def _ray_directions(intr: CameraIntrinsics) -> np.ndarray:
    # Unit-z camera rays, so the hit parameter equals depth.
    v, u = np.mgrid[0 : intr.height, 0 : intr.width]
    x = (u.ravel() - intr.cx) / intr.fx
    y = (v.ravel() - intr.cy) / intr.fy
    return np.stack([x, y, np.ones_like(x)], axis=1)


def ray_box_hits(origin: np.ndarray, directions: np.ndarray, box: Box3D) -> np.ndarray:
    """
    Slab-method intersection of rays with a yaw box.

    Args:
        origin: Shared ray origin in world coordinates.
        directions: (N, 3) world-frame ray directions.
        box: The box.

    Returns:
        (N,) hit parameters; ``inf`` where a ray misses or starts inside.
    """
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    to_local = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    o = to_local @ (np.asarray(origin, dtype=np.float64) - box.center)
    d = directions @ to_local.T
    half = box.dims / 2

    t_near = np.full(len(d), -np.inf)
    t_far = np.full(len(d), np.inf)
    missed = np.zeros(len(d), dtype=bool)
    for axis in range(3):
        da = d[:, axis]
        parallel = np.abs(da) < _PARALLEL_EPS
        missed |= parallel & (abs(o[axis]) > half[axis])
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half[axis] - o[axis]) / da
            t2 = (half[axis] - o[axis]) / da
        lo = np.where(parallel, -np.inf, np.minimum(t1, t2))
        hi = np.where(parallel, np.inf, np.maximum(t1, t2))
        t_near = np.maximum(t_near, lo)
        t_far = np.minimum(t_far, hi)
    hit = ~missed & (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def _cast(
    scene: Scene, pose: Pose, directions_cam: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    # Nearest hit distance and object index (-1 for no hit) per ray.
    directions = directions_cam @ pose.rotation.T
    depth = np.full(len(directions), np.inf)
    owner = np.full(len(directions), -1, dtype=np.int64)
    for idx, obj in enumerate(scene.objects):
        t = ray_box_hits(pose.translation, directions, obj.box)
        closer = t < depth
        depth = np.where(closer, t, depth)
        owner = np.where(closer, idx, owner)
    return depth, owner


def render_depth(
    scene: Scene,
    pose: Pose,
    intr: CameraIntrinsics,
    noise: NoiseSpec,
    rng_seed: int,
    timestamp: float = 0.0,
) -> DepthFrame:
    """
    Render a depth frame by ray casting. Pixels without a hit read 0.0.

    Noise is applied in a fixed order: additive Gaussian depth noise, uniform
    pixel dropout, then elevated dropout in a band around object silhouettes.
    """
    depth, owner = _cast(scene, pose, _ray_directions(intr))
    depth = depth.reshape(intr.height, intr.width)
    owner = owner.reshape(intr.height, intr.width)
    valid = np.isfinite(depth)
    depth = np.where(valid, depth, 0.0)

    rng = np.random.default_rng(rng_seed)
    if noise.depth_noise_m > 0:
        depth = depth + valid * rng.normal(0.0, noise.depth_noise_m, size=depth.shape)
        depth = np.maximum(depth, 0.0)
    if noise.depth_dropout > 0:
        depth = np.where(rng.random(depth.shape) < noise.depth_dropout, 0.0, depth)
    if noise.edge_dropout_band_px > 0 and noise.edge_dropout_prob > 0:
        band = silhouette_band(owner, noise.edge_dropout_band_px) & valid
        dropped = band & (rng.random(depth.shape) < noise.edge_dropout_prob)
        depth = np.where(dropped, 0.0, depth)

    return DepthFrame(
        depth=depth.astype(np.float32), timestamp=timestamp, pose=pose, intrinsics=intr
    )


def silhouette_band(owner: np.ndarray, band_px: int) -> np.ndarray:
    """
    Pixels within ``band_px`` of a change in the object-index map.
    """
    edges = np.zeros(owner.shape, dtype=bool)
    edges[:, 1:] |= owner[:, 1:] != owner[:, :-1]
    edges[:, :-1] |= owner[:, 1:] != owner[:, :-1]
    edges[1:, :] |= owner[1:, :] != owner[:-1, :]
    edges[:-1, :] |= owner[1:, :] != owner[:-1, :]
    if band_px > 1:
        edges = ndimage.binary_dilation(edges, iterations=band_px - 1)
    return edges


def _visible_center_pixel(
    scene: Scene,
    pose: Pose,
    intr: CameraIntrinsics,
    idx: int,
    fallback_uv: Optional[Tuple[float, float]],
) -> bool:
    center_cam = transform_points(inverse_pose(pose), scene.objects[idx].box.center)
    uv = project_points(intr, center_cam)[0]
    if not (np.all(np.isfinite(uv)) and intr.contains(uv[0], uv[1])):
        if fallback_uv is None:
            return False
        uv = np.asarray(fallback_uv)
    ray = np.array([[(uv[0] - intr.cx) / intr.fx, (uv[1] - intr.cy) / intr.fy, 1.0]])
    _, owner = _cast(scene, pose, ray)
    return int(owner[0]) == idx


def visible_objects(scene: Scene, pose: Pose, intr: CameraIntrinsics) -> List[int]:
    """
    Indices of objects whose center projects into the image unoccluded.
    """
    return [
        idx
        for idx in range(len(scene.objects))
        if _visible_center_pixel(scene, pose, intr, idx, fallback_uv=None)
    ]


def project_box3d(box: Box3D, pose: Pose, intr: CameraIntrinsics) -> Optional[Box2D]:
    """
    Unclipped pixel bounds of a box, or None if any corner is behind the camera.
    """
    corners_cam = transform_points(inverse_pose(pose), box3d_corners(box))
    behind = int(np.count_nonzero(corners_cam[:, 2] <= 0))
    if behind:
        logger.debug(
            f"Not projecting {box}: {behind} of 8 corners are behind the camera."
        )
        return None
    pixels = project_points(intr, corners_cam)
    u_min, v_min = pixels.min(axis=0)
    u_max, v_max = pixels.max(axis=0)
    return Box2D(float(u_min), float(v_min), float(u_max), float(v_max), "", 1.0)


def oracle_detect2d(
    scene: Scene,
    pose: Pose,
    intr: CameraIntrinsics,
    noise: NoiseSpec,
    rng_seed: int,
) -> List[Box2D]:
    """
    Ground-truth-derived 2D detections.

    Each object's projected corners give a pixel box, clipped to the image.
    Boxes under 4 px on a side or whose object is hidden at its center pixel
    are discarded. Survivors get Gaussian corner jitter and are dropped with
    ``drop_prob``. Confidence starts at ``1 - drop_prob`` and is lowered in
    proportion to the applied jitter.
    """
    rng = np.random.default_rng(rng_seed)
    boxes = []
    for idx, obj in enumerate(scene.objects):
        raw = project_box3d(obj.box, pose, intr)
        if raw is None:
            continue
        clipped = clip_box2d(raw, intr)
        if clipped is None:
            continue
        if clipped.width < _MIN_BOX_PX or clipped.height < _MIN_BOX_PX:
            continue
        if not _visible_center_pixel(
            scene, pose, intr, idx, fallback_uv=clipped.center
        ):
            continue

        jitter = (
            rng.normal(0.0, noise.bbox_jitter_px, size=4)
            if noise.bbox_jitter_px > 0
            else np.zeros(4)
        )
        dropped = noise.drop_prob > 0 and rng.random() < noise.drop_prob
        if dropped:
            continue
        u_min, v_min = clipped.u_min + jitter[0], clipped.v_min + jitter[1]
        u_max, v_max = clipped.u_max + jitter[2], clipped.v_max + jitter[3]
        if not (u_min < u_max and v_min < v_max):
            continue
        diag = math.hypot(clipped.width, clipped.height)
        spread = float(np.abs(jitter).mean()) / diag
        confidence = 1.0 - noise.drop_prob - min(0.2, spread)
        jittered = clip_box2d(
            Box2D(
                u_min,
                v_min,
                u_max,
                v_max,
                obj.class_id,
                float(min(1.0, max(0.0, confidence))),
            ),
            intr,
        )
        if jittered is not None:
            boxes.append(jittered)
    return boxes
