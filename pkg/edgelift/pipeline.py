#!/usr/bin/env python3
# Copyright (c) Meta Platforms, Inc. and affiliates.
# All rights reserved.
#
# This source code is licensed under the BSD-style license found in the
# LICENSE file in the root directory of this source tree.

"""
Simulated capture-offload-lift loop on a virtual clock.

Each display tick of a trajectory runs three steps in order:

1. Capture: if fewer than ``max_inflight`` requests are outstanding, the
   current view is offloaded. Its result arrives after a delay drawn from the
   latency model.
2. Deliver: every result that is ready by now is consumed. The hybrid variant
   lifts each 2D box against the depth frame of the current tick (depth is
   always fresh; only the 2D result is stale), optionally reprojecting the
   box through the pose delta first, and folds the lift into the registry.
   The monolithic variant receives finished 3D boxes expressed in the capture
   camera and overlays them in the current camera unchanged.
3. Record: the display set and the latencies of the newest delivered result
   are appended to the timeline.

The clock is virtual, so runs are bit-identical for fixed seeds regardless of
host scheduling. The on-device lift is charged a fixed virtual cost;
wall-clock lift time is measured by the benchmark instead.
"""

import abc
import asyncio
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .depthlift import DepthFrame, FilterConfig, lift, LiftError, LiftMethod
from .edgenet import EdgeClient
from .fusion import FusionMode, ObjectRegistry
from .geometry import (
    Box2D,
    Box3D,
    CameraIntrinsics,
    compose_poses,
    Detection3D,
    inverse_pose,
    map_box2d,
    Pose,
    transform_box3d,
    transform_points,
)
from .metrics import (
    average_reports,
    match_and_score,
    MetricsConfig,
    MetricsReport,
    RecordParseError,
)
from .motion import depth_hint, NotVisibleError, PoseHistory, reproject_box2d
from .simkit import (
    delay,
    depth_intrinsics,
    derive_seed,
    LatencySpec,
    make_trajectory,
    NoiseSpec,
    oracle_detect2d,
    render_depth,
    rgb_intrinsics,
    Scene,
    TrajectorySpec,
    visible_objects,
)
from .wire import SceneViewRequest

logger: logging.Logger = logging.getLogger(__name__)

# Seed stream keys
_SEED_DETECT: int = 1
_SEED_DELAY: int = 2
_SEED_DEPTH: int = 3

HYBRID_COMPUTE_S: float = 0.013
MONOLITHIC_COMPUTE_S: float = 0.283


class Variant(Enum):
    HYBRID = "hybrid"
    MONOLITHIC_EDGE_3D = "monolithic"


class DepthSource(Enum):
    ARRIVAL = "arrival"
    CAPTURE = "capture"


@dataclass(frozen=True)
class PipelineConfig:
    variant: Variant = Variant.HYBRID
    compensation: bool = True
    fusion: bool = True
    filter: FilterConfig = field(default_factory=FilterConfig)
    method: LiftMethod = LiftMethod.MIN_AREA_RECT
    latency: Optional[LatencySpec] = None
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    fps: float = 30.0
    duration: Optional[float] = None
    seed: int = 42
    max_inflight: int = 3
    lift_cost_s: float = 0.010
    skip_truncated: bool = True
    depth_source: DepthSource = DepthSource.ARRIVAL
    match_dist_max: float = 0.5
    stale_after: float = 5.0
    reject_stale: bool = True

    def __post_init__(self) -> None:
        if not self.fps > 0:
            raise ValueError(f"fps must be positive (got {self.fps}).")
        if self.duration is not None and not self.duration > 0:
            raise ValueError(f"duration must be positive (got {self.duration}).")
        if self.max_inflight < 1:
            raise ValueError(f"max_inflight must be >= 1 (got {self.max_inflight}).")
        if self.lift_cost_s < 0:
            raise ValueError(f"lift_cost_s must be >= 0 (got {self.lift_cost_s}).")

    def resolved_latency(self) -> LatencySpec:
        if self.latency is not None:
            return self.latency
        if self.variant == Variant.MONOLITHIC_EDGE_3D:
            return LatencySpec(model_compute=MONOLITHIC_COMPUTE_S)
        return LatencySpec(model_compute=HYBRID_COMPUTE_S)

    def describe(self) -> Dict[str, Any]:
        lat = self.resolved_latency()
        return {
            "variant": self.variant.value,
            "compensation": self.compensation,
            "fusion": self.fusion,
            "method": self.method.value,
            "latency": {
                "fixed": lat.fixed,
                "jitter": lat.jitter,
                "model_compute": lat.model_compute,
            },
            "noise": asdict(self.noise),
            "filter": asdict(self.filter),
            "fps": self.fps,
            "seed": self.seed,
            "max_inflight": self.max_inflight,
            "lift_cost_s": self.lift_cost_s,
            "skip_truncated": self.skip_truncated,
            "depth_source": self.depth_source.value,
        }


class DetectorEndpoint(abc.ABC):
    """
    Where 2D detect requests go.
    """

    @abc.abstractmethod
    def detect2d(
        self, scene_id: str, scene: Scene, pose: Pose, seed: int, capture_ts: float
    ) -> List[Box2D]:
        pass

    def close(self) -> None:
        pass


class InProcessEndpoint(DetectorEndpoint):
    def __init__(
        self,
        noise: Optional[NoiseSpec] = None,
        intrinsics: Optional[CameraIntrinsics] = None,
    ) -> None:
        self.noise: NoiseSpec = noise or NoiseSpec()
        self.intrinsics: CameraIntrinsics = intrinsics or rgb_intrinsics()

    def detect2d(
        self, scene_id: str, scene: Scene, pose: Pose, seed: int, capture_ts: float
    ) -> List[Box2D]:
        return oracle_detect2d(scene, pose, self.intrinsics, self.noise, seed)


class RemoteEndpoint(DetectorEndpoint):
    """
    Sends each request to an edge server and waits for the answer. Timing on
    the virtual clock still comes from the latency model.
    """

    def __init__(
        self,
        host: str,
        port: int,
        timeout: float = 1.0,
        event_loop: Optional[asyncio.AbstractEventLoop] = None,
    ) -> None:
        self._loop: asyncio.AbstractEventLoop = event_loop or asyncio.new_event_loop()
        self._client = EdgeClient(host, port, max_inflight=1, timeout=timeout)
        self._loop.run_until_complete(self._client.connect())
        self._frame_id = 0
        self.rtts: List[float] = []

    def detect2d(
        self, scene_id: str, scene: Scene, pose: Pose, seed: int, capture_ts: float
    ) -> List[Box2D]:
        self._frame_id += 1
        result = self._loop.run_until_complete(
            self._client.detect(
                self._frame_id, capture_ts, SceneViewRequest(scene_id, pose, seed)
            )
        )
        self.rtts.append(result.rtt)
        return result.boxes

    def close(self) -> None:
        self._loop.run_until_complete(self._client.close())
        self._loop.close()


@dataclass
class TickRecord:
    timestamp: float
    pose: Pose
    detections: List[Detection3D]
    # Stages of the newest result that became available at this tick.
    offload_rtt: Optional[float] = None
    lift_time: Optional[float] = None
    total: Optional[float] = None
    delivered: int = 0
    submitted: bool = False
    dropped: bool = False
    lift_failures: int = 0


@dataclass
class TimelineRecord:
    header: Dict[str, Any]
    ticks: List[TickRecord] = field(default_factory=list)

    def first_delivery_index(self) -> Optional[int]:
        for idx, tick in enumerate(self.ticks):
            if tick.delivered:
                return idx
        return None

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "header", **self.header}, sort_keys=True)]
        lines += [json.dumps(_tick_to_dict(t), sort_keys=True) for t in self.ticks]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "TimelineRecord":
        """
        Parse a timeline dump.

        Raises:
            RecordParseError: With the 1-based number of the offending line.
        """
        header: Optional[Dict[str, Any]] = None
        ticks = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise RecordParseError(lineno, f"invalid JSON ({e.msg})") from e
            if not isinstance(d, dict):
                raise RecordParseError(lineno, "expected a JSON object")
            kind = d.pop("type", None)
            if kind == "header":
                if header is not None:
                    raise RecordParseError(lineno, "duplicate header")
                header = d
            elif kind == "tick":
                if header is None:
                    raise RecordParseError(lineno, "tick before header")
                try:
                    ticks.append(_tick_from_dict(d))
                except (KeyError, TypeError, ValueError) as e:
                    raise RecordParseError(lineno, f"malformed tick: {e!r}") from e
            else:
                raise RecordParseError(lineno, f"unknown record type {kind!r}")
        if header is None:
            raise RecordParseError(1, "missing header")
        return cls(header=header, ticks=ticks)


def _pose_to_list(pose: Pose) -> List[float]:
    return pose.rotation.ravel().tolist() + pose.translation.tolist()


def _pose_from_list(values: Sequence[float]) -> Pose:
    if len(values) != 12:
        raise ValueError(f"pose needs 12 values (got {len(values)})")
    return Pose(
        rotation=np.array(values[:9], dtype=np.float64).reshape(3, 3),
        translation=np.array(values[9:], dtype=np.float64),
    )


def detection_to_dict(det: Detection3D) -> Dict[str, Any]:
    return {
        "class_id": det.class_id,
        "confidence": float(det.confidence),
        "view_count": int(det.view_count),
        "last_update": float(det.last_update),
        "center": [float(x) for x in det.box.center],
        "dims": [float(x) for x in det.box.dims],
        "yaw": float(det.box.yaw),
    }


def detection_from_dict(d: Dict[str, Any]) -> Detection3D:
    return Detection3D(
        box=Box3D(
            center=np.array(d["center"], dtype=np.float64),
            dims=np.array(d["dims"], dtype=np.float64),
            yaw=float(d["yaw"]),
        ),
        class_id=str(d["class_id"]),
        confidence=float(d["confidence"]),
        view_count=int(d["view_count"]),
        last_update=float(d["last_update"]),
    )


def _tick_to_dict(tick: TickRecord) -> Dict[str, Any]:
    return {
        "type": "tick",
        "t": tick.timestamp,
        "pose": _pose_to_list(tick.pose),
        "detections": [detection_to_dict(d) for d in tick.detections],
        "offload_rtt": tick.offload_rtt,
        "lift_time": tick.lift_time,
        "total": tick.total,
        "delivered": tick.delivered,
        "submitted": tick.submitted,
        "dropped": tick.dropped,
        "lift_failures": tick.lift_failures,
    }


def _tick_from_dict(d: Dict[str, Any]) -> TickRecord:
    return TickRecord(
        timestamp=float(d["t"]),
        pose=_pose_from_list(d["pose"]),
        detections=[detection_from_dict(x) for x in d["detections"]],
        offload_rtt=d.get("offload_rtt"),
        lift_time=d.get("lift_time"),
        total=d.get("total"),
        delivered=int(d.get("delivered", 0)),
        submitted=bool(d.get("submitted", False)),
        dropped=bool(d.get("dropped", False)),
        lift_failures=int(d.get("lift_failures", 0)),
    )


@dataclass
class _Request:
    frame_id: int
    tick: int
    capture_ts: float
    capture_pose: Pose
    arrival: float
    ready: float
    boxes2d: List[Box2D] = field(default_factory=list)
    boxes3d: List[Tuple[str, Box3D]] = field(default_factory=list)


class _DepthFrames:
    """
    Lazily rendered depth frames keyed by tick index.
    """

    def __init__(
        self,
        scene: Scene,
        trajectory: Sequence[Tuple[float, Pose]],
        intr: CameraIntrinsics,
        noise: NoiseSpec,
        seed: int,
    ) -> None:
        self.scene = scene
        self.trajectory = trajectory
        self.intr = intr
        self.noise = noise
        self.seed = seed
        self._cache: Dict[int, DepthFrame] = {}

    def get(self, tick: int) -> DepthFrame:
        if tick not in self._cache:
            ts, pose = self.trajectory[tick]
            self._cache[tick] = render_depth(
                self.scene,
                pose,
                self.intr,
                self.noise,
                derive_seed(self.seed, _SEED_DEPTH, tick),
                timestamp=ts,
            )
        return self._cache[tick]

    def evict_before(self, tick: int) -> None:
        for key in [k for k in self._cache if k < tick]:
            del self._cache[key]


def _registry_depth_fallback(
    registry: ObjectRegistry, box: Box2D, pose: Pose, intr: CameraIntrinsics
) -> Optional[float]:
    # Camera depth of the same-class object whose center projects closest to
    # the box center.
    best: Optional[Tuple[float, float]] = None
    u_c, v_c = box.center
    to_cam = inverse_pose(pose)
    for det in registry.detections():
        if det.class_id != box.class_id:
            continue
        p = transform_points(to_cam, det.box.center)[0]
        if p[2] <= 0:
            continue
        u = intr.fx * p[0] / p[2] + intr.cx
        v = intr.fy * p[1] / p[2] + intr.cy
        dist = math.hypot(u - u_c, v - v_c)
        if best is None or dist < best[0]:
            best = (dist, float(p[2]))
    return None if best is None else best[1]


class _HybridConsumer:
    def __init__(
        self,
        cfg: PipelineConfig,
        frames: _DepthFrames,
        poses: PoseHistory,
        rgb_intr: CameraIntrinsics,
    ) -> None:
        self.cfg = cfg
        self.frames = frames
        self.poses = poses
        self.rgb_intr = rgb_intr
        self.depth_intr = frames.intr
        self.registry = ObjectRegistry(
            match_dist_max=cfg.match_dist_max,
            stale_after=cfg.stale_after,
            mode=FusionMode.WEIGHTED_MEAN if cfg.fusion else FusionMode.LAST_WRITE_WINS,
            reject_stale=cfg.reject_stale,
        )

    def consume(self, req: _Request, tick: int) -> int:
        """
        Lift and register one result. Returns the number of failed lifts.
        """
        capture_frame = self.frames.get(req.tick)
        if self.cfg.depth_source == DepthSource.ARRIVAL:
            frame = self.frames.get(tick)
        else:
            frame = capture_frame
        capture_pose = self.poses.pose_at(req.capture_ts)
        failures = 0
        for box in req.boxes2d:
            box_d = map_box2d(box, self.rgb_intr, self.depth_intr)
            if self.cfg.skip_truncated and box_d.is_truncated(self.depth_intr):
                logger.debug(
                    f"Frame {req.frame_id}: skipping truncated {box.class_id}."
                )
                continue
            try:
                if self.cfg.compensation and frame is not capture_frame:
                    z_hint = depth_hint(
                        capture_frame,
                        box_d,
                        fallback=_registry_depth_fallback(
                            self.registry, box_d, capture_pose, self.depth_intr
                        ),
                    )
                    box_d = reproject_box2d(
                        box_d, capture_pose, frame.pose, z_hint, self.depth_intr
                    )
                det = lift(
                    frame,
                    box_d,
                    self.cfg.filter,
                    self.cfg.method,
                    timestamp=req.capture_ts,
                )
            except (LiftError, NotVisibleError) as e:
                failures += 1
                logger.debug(
                    f"Frame {req.frame_id}: lift of {box.class_id} failed "
                    f"({type(e).__name__}: {e})."
                )
                continue
            self.registry.insert_or_fuse(det)
        return failures

    def display(self, now: float) -> List[Detection3D]:
        self.registry.prune(now)
        return self.registry.detections()


class _MonolithicOverlay:
    def __init__(self) -> None:
        self.latest: Optional[_Request] = None

    def consume(self, req: _Request) -> None:
        if self.latest is None or req.frame_id > self.latest.frame_id:
            self.latest = req

    def display(self, pose: Pose) -> List[Detection3D]:
        if self.latest is None:
            return []
        # The boxes were estimated relative to the capture camera and are
        # drawn relative to the current one.
        error = compose_poses(pose, inverse_pose(self.latest.capture_pose))
        return [
            Detection3D(
                box=transform_box3d(error, box),
                class_id=class_id,
                confidence=1.0,
                view_count=1,
                last_update=self.latest.capture_ts,
            )
            for class_id, box in self.latest.boxes3d
        ]


def run(
    scene: Scene,
    trajectory: Sequence[Tuple[float, Pose]],
    cfg: PipelineConfig,
    endpoint: Optional[DetectorEndpoint] = None,
    scene_id: Optional[str] = None,
    header: Optional[Dict[str, Any]] = None,
) -> TimelineRecord:
    """
    Run one variant of the pipeline over a trajectory.

    Args:
        scene: Ground-truth world.
        trajectory: Timestamped camera poses, one per display tick.
        cfg: Pipeline settings.
        endpoint: 2D detector for the hybrid variant. Defaults to the
            in-process oracle with ``cfg.noise``. The monolithic variant
            always emulates its 3D detector in process.
        scene_id: Scene name sent to remote detectors.
        header: Extra fields for the timeline header.

    Returns:
        The display timeline.
    """
    if cfg.duration is not None:
        trajectory = [(t, p) for t, p in trajectory if t <= cfg.duration + 1e-9]
    if not trajectory:
        raise ValueError("Empty trajectory.")
    endpoint = endpoint or InProcessEndpoint(noise=cfg.noise)
    scene_id = scene_id or scene.name
    latency = cfg.resolved_latency()
    rgb_intr = rgb_intrinsics()
    depth_intr = depth_intrinsics()
    intr_values = [
        depth_intr.fx,
        depth_intr.fy,
        depth_intr.cx,
        depth_intr.cy,
        depth_intr.width,
        depth_intr.height,
    ]
    record = TimelineRecord(
        header={
            **(header or {}),
            "scene": scene.name,
            "config": cfg.describe(),
            "depth_intrinsics": intr_values,
            "ticks": len(trajectory),
        }
    )
    frames = _DepthFrames(scene, trajectory, depth_intr, cfg.noise, cfg.seed)
    poses = PoseHistory(capacity=max(2, len(trajectory)))
    hybrid = _HybridConsumer(cfg, frames, poses, rgb_intr)
    overlay = _MonolithicOverlay()
    inflight: List[_Request] = []

    for tick, (now, pose) in enumerate(trajectory):
        poses.append(now, pose)
        tick_record = TickRecord(timestamp=now, pose=pose, detections=[])

        # Capture
        in_network = [r for r in inflight if r.arrival > now]
        if len(in_network) < cfg.max_inflight:
            req = _Request(
                frame_id=tick + 1,
                tick=tick,
                capture_ts=now,
                capture_pose=pose,
                arrival=delay(latency, now, derive_seed(cfg.seed, _SEED_DELAY, tick)),
                ready=0.0,
            )
            if cfg.variant == Variant.HYBRID:
                req.boxes2d = endpoint.detect2d(
                    scene_id,
                    scene,
                    pose,
                    derive_seed(cfg.seed, _SEED_DETECT, tick),
                    now,
                )
                req.ready = req.arrival + cfg.lift_cost_s
            else:
                visible = visible_objects(scene, pose, depth_intr)
                req.boxes3d = scene.ground_truth(visible)
                req.ready = req.arrival
            inflight.append(req)
            tick_record.submitted = True
        else:
            tick_record.dropped = True
            logger.debug(
                f"t={now:.3f}: {len(in_network)} requests in flight, dropping."
            )

        # Deliver
        due = sorted(
            (r for r in inflight if r.ready <= now + 1e-12),
            key=lambda r: (r.ready, r.frame_id),
        )
        for req in due:
            inflight.remove(req)
            if cfg.variant == Variant.HYBRID:
                tick_record.lift_failures += hybrid.consume(req, tick)
                lift_time: Optional[float] = cfg.lift_cost_s
            else:
                overlay.consume(req)
                lift_time = 0.0
            tick_record.delivered += 1
            tick_record.offload_rtt = req.arrival - req.capture_ts
            tick_record.lift_time = lift_time
            tick_record.total = req.ready - req.capture_ts
        frames.evict_before(min([r.tick for r in inflight] + [tick]))

        # Record
        if cfg.variant == Variant.HYBRID:
            tick_record.detections = hybrid.display(now)
        else:
            tick_record.detections = overlay.display(pose)
        record.ticks.append(tick_record)

    return record


def run_scenario(
    scene: Scene,
    spec: TrajectorySpec,
    cfg: PipelineConfig,
    endpoint: Optional[DetectorEndpoint] = None,
) -> TimelineRecord:
    """
    Build the trajectory for ``spec`` at the pipeline's frame rate and run.
    """
    spec = replace(spec, fps=cfg.fps)
    trajectory = make_trajectory(spec, scene.target)
    header = {
        "scenario": spec.scenario.value,
        "speed": spec.speed,
        "range": spec.range,
        "radius": spec.radius,
    }
    return run(scene, trajectory, cfg, endpoint=endpoint, header=header)


def _record_intrinsics(record: TimelineRecord) -> CameraIntrinsics:
    values = record.header.get("depth_intrinsics")
    if not values:
        return depth_intrinsics()
    fx, fy, cx, cy, width, height = values
    return CameraIntrinsics(
        fx=fx, fy=fy, cx=cx, cy=cy, width=int(width), height=int(height)
    )


def evaluate_run(
    record: TimelineRecord, scene: Scene, cfg: Optional[MetricsConfig] = None
) -> MetricsReport:
    """
    Score a timeline against ground truth.

    At each tick the display set is scored against the objects visible from
    that tick's pose. Ticks before the first delivered result are warm-up and
    are excluded. The report averages per-class values over the scored ticks.
    """
    cfg = cfg or MetricsConfig()
    intr = _record_intrinsics(record)
    start = record.first_delivery_index()
    if start is None:
        classes = list(cfg.classes) or sorted({o.class_id for o in scene.objects})
        return MetricsReport.empty(classes, cfg)
    if not cfg.classes:
        cfg = replace(cfg, classes=tuple(sorted({o.class_id for o in scene.objects})))
    reports = []
    for tick in record.ticks[start:]:
        gts = scene.ground_truth(visible_objects(scene, tick.pose, intr))
        reports.append(match_and_score(tick.detections, gts, cfg))
    return average_reports(reports, cfg)


@dataclass(frozen=True)
class StageStats:
    mean: float
    p95: float
    max: float
    count: int


def _stats(values: List[float]) -> StageStats:
    if not values:
        return StageStats(mean=0.0, p95=0.0, max=0.0, count=0)
    arr = np.asarray(values, dtype=np.float64)
    return StageStats(
        mean=float(arr.mean()),
        p95=float(np.percentile(arr, 95)),
        max=float(arr.max()),
        count=len(values),
    )


def latency_breakdown(record: TimelineRecord) -> Dict[str, StageStats]:
    """
    Aggregate per-result stage timings.

    Returns:
        Stats for ``offload_rtt`` (capture to result arrival), ``lift`` and
        ``end_to_end`` (capture to display availability).
    """
    delivered = [t for t in record.ticks if t.delivered]
    return {
        "offload_rtt": _stats(
            [t.offload_rtt for t in delivered if t.offload_rtt is not None]
        ),
        "lift": _stats([t.lift_time for t in delivered if t.lift_time is not None]),
        "end_to_end": _stats([t.total for t in delivered if t.total is not None]),
    }
