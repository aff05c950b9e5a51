#!/usr/bin/env python3
# Copyright (c) Meta Platforms, Inc. and affiliates.
# All rights reserved.
#
# This source code is licensed under the BSD-style license found in the
# LICENSE file in the root directory of this source tree.

"""
On-device lifting of 2D detections into world-anchored 3D boxes.

A lift crops the depth pixels under a 2D box (the frustum), rejects depth
outliers with a median/MAD gate, and fits a yaw-oriented box to the surviving
points after moving them into the world frame.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from scipy.spatial import ConvexHull

from .geometry import (
    Box2D,
    Box3D,
    CameraIntrinsics,
    Detection3D,
    Pose,
    transform_points,
    unproject_pixels,
)

logger: logging.Logger = logging.getLogger(__name__)

_MAD_ZERO_TOL: float = 1e-6
_COLLINEAR_TOL: float = 1e-9


class LiftError(ValueError):
    pass


class EmptyCropError(LiftError):
    pass


class InsufficientDepthError(LiftError):
    pass


class DegenerateGeometryError(LiftError):
    pass


class LiftMethod(Enum):
    AABB = "aabb"
    MIN_AREA_RECT = "min_area_rect"


@dataclass(frozen=True)
class FilterConfig:
    mad_k: float = 3.0
    min_points: int = 20
    invalid_ratio_max: float = 0.9

    def __post_init__(self) -> None:
        if not self.mad_k > 0:
            raise ValueError(f"mad_k must be positive (got {self.mad_k}).")
        if self.min_points < 4:
            raise ValueError(f"min_points must be >= 4 (got {self.min_points}).")
        if not 0.0 <= self.invalid_ratio_max <= 1.0:
            raise ValueError(
                f"invalid_ratio_max must be in [0, 1] (got {self.invalid_ratio_max})."
            )


@dataclass(frozen=True, eq=False)
class DepthFrame:
    """
    A pose-stamped depth image.

    ``depth`` has shape (height, width) in meters. Missing returns are encoded
    as 0.0; NaN is accepted and treated as missing.
    """

    depth: np.ndarray
    timestamp: float
    pose: Pose
    intrinsics: CameraIntrinsics

    def __post_init__(self) -> None:
        depth = np.array(self.depth, dtype=np.float32)
        if depth.ndim != 2:
            raise ValueError(f"Depth grid must be 2-D (got shape {depth.shape}).")
        if depth.shape != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError(
                f"Depth grid shape {depth.shape} does not match the "
                f"{self.intrinsics.width}x{self.intrinsics.height} intrinsics."
            )
        finite = depth[np.isfinite(depth)]
        if finite.size and float(finite.min()) < 0:
            raise ValueError("Depth values must be non-negative.")
        if not self.timestamp >= 0:
            raise ValueError(f"Timestamp must be >= 0 (got {self.timestamp}).")
        depth.setflags(write=False)
        object.__setattr__(self, "depth", depth)

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    def valid_mask(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.isfinite(self.depth) & (self.depth > 0)

    def num_valid(self) -> int:
        return int(np.count_nonzero(self.valid_mask()))


def _pixel_range(lo: float, hi: float, size: int) -> Tuple[int, int]:
    # Pixel j has its center at j; it is inside [lo, hi) iff lo <= j < hi.
    start = max(int(math.ceil(lo)), 0)
    stop = min(int(math.ceil(hi)), size)
    return start, stop


def _crop_window(frame: DepthFrame, box: Box2D) -> Tuple[slice, slice]:
    if not box.intersects_image(frame.intrinsics):
        raise EmptyCropError(f"{box} does not intersect the depth image.")
    col_start, col_stop = _pixel_range(box.u_min, box.u_max, frame.width)
    row_start, row_stop = _pixel_range(box.v_min, box.v_max, frame.height)
    if col_start >= col_stop or row_start >= row_stop:
        raise EmptyCropError(f"{box} covers no pixel center.")
    return slice(row_start, row_stop), slice(col_start, col_stop)


def crop(frame: DepthFrame, box: Box2D) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Returns the (rows, cols, depths) of every pixel inside ``box`` clipped to
    the image, in raster order, including pixels without a depth return.
    """
    row_window, col_window = _crop_window(frame, box)
    rows, cols = np.mgrid[row_window, col_window]
    depths = frame.depth[row_window, col_window]
    return rows.ravel(), cols.ravel(), depths.ravel()


def frustum_points(frame: DepthFrame, box: Box2D) -> np.ndarray:
    """
    Unproject every valid-depth pixel inside ``box`` into the camera frame.

    Returns:
        An (N, 3) array in raster order. N is 0 if no pixel has a return.
    """
    rows, cols, depths = crop(frame, box)
    with np.errstate(invalid="ignore"):
        valid = np.isfinite(depths) & (depths > 0)
    return unproject_pixels(
        frame.intrinsics, cols[valid], rows[valid], depths[valid].astype(np.float64)
    )


def mad_gate(z: np.ndarray, mad_k: float) -> np.ndarray:
    """
    Boolean mask of values within ``mad_k`` median absolute deviations of the
    median. When the MAD is zero only values within 1e-6 of the median pass.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        return np.zeros(0, dtype=bool)
    median = np.median(z)
    deviation = np.abs(z - median)
    mad = float(np.median(deviation))
    gate = mad_k * mad if mad > 0 else _MAD_ZERO_TOL
    return deviation <= gate


def robust_depth_filter(points: np.ndarray, cfg: FilterConfig) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    kept = points[mad_gate(points[:, 2], cfg.mad_k)]
    if len(kept) < cfg.min_points:
        raise InsufficientDepthError(
            f"{len(kept)} of {len(points)} points survived the depth gate "
            f"(need {cfg.min_points})."
        )
    return kept


def _check_not_collinear(xy: np.ndarray) -> None:
    centered = xy - xy.mean(axis=0)
    if len(xy) < 3:
        raise DegenerateGeometryError("Fewer than 3 footprint points.")
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    spread = np.abs(centered @ vt[-1])
    if float(spread.max()) <= _COLLINEAR_TOL:
        raise DegenerateGeometryError("Footprint points are collinear.")


def min_area_rect(xy: np.ndarray) -> Tuple[np.ndarray, float, float, float]:
    """
    Minimum-area enclosing rectangle of 2D points by rotating calipers over
    the convex hull edges.

    Returns:
        (center, length, width, yaw) with length >= width and yaw in
        [-pi/2, pi/2) giving the direction of the length axis.
    """
    _check_not_collinear(xy)
    hull = xy[ConvexHull(xy).vertices]
    edges = np.roll(hull, -1, axis=0) - hull
    angles = np.unique(np.mod(np.arctan2(edges[:, 1], edges[:, 0]), math.pi / 2))
    axis_u = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    axis_v = np.stack([-np.sin(angles), np.cos(angles)], axis=1)
    proj_u = hull @ axis_u.T
    proj_v = hull @ axis_v.T
    extent_u = proj_u.max(axis=0) - proj_u.min(axis=0)
    extent_v = proj_v.max(axis=0) - proj_v.min(axis=0)
    best = int(np.argmin(extent_u * extent_v))

    mid_u = (proj_u[:, best].max() + proj_u[:, best].min()) / 2
    mid_v = (proj_v[:, best].max() + proj_v[:, best].min()) / 2
    center = mid_u * axis_u[best] + mid_v * axis_v[best]
    length, width = float(extent_u[best]), float(extent_v[best])
    yaw = float(angles[best])
    if length < width:
        length, width = width, length
        yaw += math.pi / 2
    if yaw >= math.pi / 2:
        yaw -= math.pi
    return center, length, width, yaw


def estimate_box3d(
    points: np.ndarray, pose: Pose, method: LiftMethod = LiftMethod.MIN_AREA_RECT
) -> Box3D:
    """
    Fit a yaw-oriented box to camera-frame points.

    The height axis is world-up. Only the surfaces visible to the sensor are
    sampled, so the extent along the viewing direction is a lower bound of the
    true object extent.
    """
    world = transform_points(pose, points)
    if len(world) == 0:
        raise DegenerateGeometryError("No points to fit.")
    z_lo, z_hi = float(world[:, 2].min()), float(world[:, 2].max())
    height = z_hi - z_lo
    if height <= _COLLINEAR_TOL:
        raise DegenerateGeometryError("Points have no vertical extent.")
    xy = world[:, :2]

    if method == LiftMethod.AABB:
        lo, hi = xy.min(axis=0), xy.max(axis=0)
        extent = hi - lo
        if float(extent.min()) <= _COLLINEAR_TOL:
            raise DegenerateGeometryError("Footprint has no area.")
        center_xy, length, width, yaw = (lo + hi) / 2, extent[0], extent[1], 0.0
    elif method == LiftMethod.MIN_AREA_RECT:
        center_xy, length, width, yaw = min_area_rect(xy)
        if width <= _COLLINEAR_TOL:
            raise DegenerateGeometryError("Footprint has no area.")
    else:
        raise ValueError(f"Unknown lift method {method}.")

    return Box3D(
        center=np.array([center_xy[0], center_xy[1], (z_lo + z_hi) / 2]),
        dims=np.array([length, width, height]),
        yaw=yaw,
    )


def lift(
    frame: DepthFrame,
    box: Box2D,
    cfg: Optional[FilterConfig] = None,
    method: LiftMethod = LiftMethod.MIN_AREA_RECT,
    timestamp: Optional[float] = None,
) -> Detection3D:
    """
    Lift a 2D detection against a depth frame.

    Args:
        frame: The depth frame. ``box`` must be in its pixel coordinates.
        box: The 2D detection.
        cfg: Depth filter settings.
        method: Footprint fitting method.
        timestamp: Overrides the detection's ``last_update`` (defaults to the
            frame timestamp).

    Returns:
        A single-view detection in the world frame.
    """
    cfg = cfg or FilterConfig()
    row_window, col_window = _crop_window(frame, box)
    n_pixels = (row_window.stop - row_window.start) * (
        col_window.stop - col_window.start
    )
    points = frustum_points(frame, box)
    invalid_ratio = 1.0 - len(points) / n_pixels
    if invalid_ratio > cfg.invalid_ratio_max:
        raise InsufficientDepthError(
            f"{invalid_ratio:.2f} of the crop has no depth "
            f"(max {cfg.invalid_ratio_max})."
        )
    kept = robust_depth_filter(points, cfg)
    box3d = estimate_box3d(kept, frame.pose, method)
    return Detection3D(
        box=box3d,
        class_id=box.class_id,
        confidence=box.confidence,
        view_count=1,
        last_update=frame.timestamp if timestamp is None else timestamp,
    )
