#!/usr/bin/env python3
# Copyright (c) Meta Platforms, Inc. and affiliates.
# All rights reserved.
#
# This source code is licensed under the BSD-style license found in the
# LICENSE file in the root directory of this source tree.

"""
Latency compensation.

A 2D detection computed on a frame captured at t0 arrives after the camera
has moved. Before lifting it against the newest depth frame, its corners are
pushed through world space at an estimated object depth and re-projected into
the camera at t1.
"""

import bisect
import logging
import threading
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .depthlift import crop, DepthFrame, EmptyCropError, InsufficientDepthError
from .geometry import (
    Box2D,
    CameraIntrinsics,
    clip_box2d,
    inverse_pose,
    Pose,
    project_points,
    transform_points,
    unproject_pixels,
)

logger: logging.Logger = logging.getLogger(__name__)


class NotVisibleError(ValueError):
    pass


class PoseHistory:
    """
    Bounded, time-ordered record of tracked camera poses.

    A single tracker thread appends; any number of readers may query. Reads
    operate on a consistent snapshot taken under the lock.
    """

    def __init__(self, capacity: int = 256) -> None:
        if capacity < 2:
            raise ValueError(f"PoseHistory capacity must be >= 2 (got {capacity}).")
        self.capacity = capacity
        self._timestamps: List[float] = []
        self._poses: List[Pose] = []
        self._lock = threading.Lock()

    def __len__(self) -> int:
        with self._lock:
            return len(self._timestamps)

    def append(self, timestamp: float, pose: Pose) -> None:
        with self._lock:
            if self._timestamps and timestamp <= self._timestamps[-1]:
                raise ValueError(
                    f"Pose timestamps must be strictly increasing "
                    f"({timestamp} <= {self._timestamps[-1]})."
                )
            self._timestamps.append(timestamp)
            self._poses.append(pose)
            if len(self._timestamps) > self.capacity:
                del self._timestamps[0]
                del self._poses[0]

    def snapshot(self) -> Tuple[Tuple[float, ...], Tuple[Pose, ...]]:
        with self._lock:
            return tuple(self._timestamps), tuple(self._poses)

    def pose_at(self, t: float) -> Pose:
        return pose_at(self, t)


def pose_at(hist: PoseHistory, t: float) -> Pose:
    """
    Interpolate the tracked pose at time ``t``.

    Translation is interpolated linearly and rotation by spherical linear
    interpolation of unit quaternions. Queries outside the recorded range are
    clamped to the first or last pose.
    """
    timestamps, poses = hist.snapshot()
    if not timestamps:
        raise ValueError("PoseHistory is empty.")
    if t <= timestamps[0]:
        return poses[0]
    if t >= timestamps[-1]:
        return poses[-1]
    idx = bisect.bisect_left(timestamps, t)
    if timestamps[idx] == t:
        return poses[idx]
    t0, t1 = timestamps[idx - 1], timestamps[idx]
    p0, p1 = poses[idx - 1], poses[idx]
    alpha = (t - t0) / (t1 - t0)
    slerp = Slerp([t0, t1], Rotation.from_matrix(np.stack([p0.rotation, p1.rotation])))
    rotation = slerp([t]).as_matrix()[0]
    # Re-orthonormalize on extraction.
    u, _, vt = np.linalg.svd(rotation)
    rotation = u @ vt
    translation = (1 - alpha) * p0.translation + alpha * p1.translation
    return Pose(rotation=rotation, translation=translation)


def reproject_box2d(
    box: Box2D,
    pose_t0: Pose,
    pose_t1: Pose,
    z_hint: float,
    intr: CameraIntrinsics,
) -> Box2D:
    """
    Move a stale 2D box from the t0 camera into the t1 camera.

    All four corners are assumed to lie at depth ``z_hint`` in the t0 camera
    (a fronto-parallel plane).
    """
    if not z_hint > 0:
        raise ValueError(f"z_hint must be positive (got {z_hint}).")
    corners = box.corners()
    cam0 = unproject_pixels(intr, corners[:, 0], corners[:, 1], np.full(4, z_hint))
    world = transform_points(pose_t0, cam0)
    cam1 = transform_points(inverse_pose(pose_t1), world)
    in_front = cam1[:, 2] > 0
    if not np.any(in_front):
        raise NotVisibleError(f"{box} is entirely behind the camera at t1.")
    pixels = project_points(intr, cam1[in_front])
    u_min, v_min = pixels.min(axis=0)
    u_max, v_max = pixels.max(axis=0)
    if not (u_min < u_max and v_min < v_max):
        raise NotVisibleError(f"{box} collapses after reprojection.")
    moved = Box2D(
        float(u_min),
        float(v_min),
        float(u_max),
        float(v_max),
        box.class_id,
        box.confidence,
    )
    clipped = clip_box2d(moved, intr)
    if clipped is None:
        raise NotVisibleError(f"{box} leaves the image after reprojection.")
    return clipped


def depth_hint(
    frame: DepthFrame, box: Box2D, fallback: Optional[float] = None
) -> float:
    """
    Median valid depth under ``box``, or ``fallback`` if there is none.
    """
    try:
        _, _, depths = crop(frame, box)
    except EmptyCropError:
        depths = np.zeros(0, dtype=np.float32)
    with np.errstate(invalid="ignore"):
        valid = depths[np.isfinite(depths) & (depths > 0)]
    if valid.size:
        return float(np.median(valid))
    if fallback is not None:
        return fallback
    raise InsufficientDepthError(f"No valid depth under {box} and no fallback.")
