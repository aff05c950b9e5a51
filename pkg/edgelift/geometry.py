#!/usr/bin/env python3
# Copyright (c) Meta Platforms, Inc. and affiliates.
# All rights reserved.
#
# This source code is licensed under the BSD-style license found in the
# LICENSE file in the root directory of this source tree.

"""
Camera model, rigid transforms and yaw-oriented 3D box geometry.

Conventions:

    World frame: right-handed, +z is up (gravity aligned).
    Camera frame: +x right, +y down, +z along the optical axis.
    Pixel (row i, column j) has its center at (u=j, v=i).

All value types are immutable; numpy arrays held by them are made read-only.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

# Areas below this are treated as an empty intersection.
_AREA_EPS: float = 1e-12
_ORTHO_TOL: float = 1e-9


class InvalidDepthError(ValueError):
    pass


class BehindCameraError(ValueError):
    pass


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def normalize_yaw(yaw: float) -> float:
    """
    Wrap an angle into [-pi, pi). Angles already in range are returned as is.
    """
    if -math.pi <= yaw < math.pi:
        return yaw
    wrapped = math.fmod(yaw + math.pi, 2 * math.pi)
    if wrapped < 0:
        wrapped += 2 * math.pi
    wrapped -= math.pi
    # fmod can land exactly on pi after the shift
    if wrapped >= math.pi:
        wrapped -= 2 * math.pi
    return wrapped


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(
                f"Focal lengths must be positive (got fx={self.fx}, fy={self.fy})."
            )
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"Principal point ({self.cx}, {self.cy}) is outside the "
                f"{self.width}x{self.height} image."
            )

    def contains(self, u: float, v: float) -> bool:
        return 0 <= u < self.width and 0 <= v < self.height


@dataclass(frozen=True, eq=False)
class Pose:
    """
    World-from-camera rigid transform.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rotation = _frozen(self.rotation)
        translation = _frozen(self.translation)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise ValueError(
                f"Pose expects a 3x3 rotation and a 3-vector translation "
                f"(got {rotation.shape} and {translation.shape})."
            )
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=_ORTHO_TOL):
            raise ValueError("Pose rotation is not orthonormal.")
        if abs(np.linalg.det(rotation) - 1.0) > _ORTHO_TOL:
            raise ValueError("Pose rotation is not a proper rotation (det != +1).")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(rotation=np.eye(3), translation=np.zeros(3))

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return np.allclose(self.rotation, other.rotation, atol=atol) and np.allclose(
            self.translation, other.translation, atol=atol
        )

    @property
    def yaw(self) -> float:
        """
        Heading of the camera's optical axis in the world ground plane.
        """
        forward = self.rotation[:, 2]
        return math.atan2(forward[1], forward[0])


def gravity_aligned_pose(
    position: Sequence[float], heading: float, tilt: float
) -> Pose:
    """
    Build a camera pose with zero roll.

    Args:
        position: Camera origin in world coordinates.
        heading: Direction of the optical axis in the ground plane (radians
            from world +x towards +y).
        tilt: Downward pitch of the optical axis (radians).

    Returns:
        The world-from-camera pose.
    """
    ct, st = math.cos(tilt), math.sin(tilt)
    ch, sh = math.cos(heading), math.sin(heading)
    forward = np.array([ct * ch, ct * sh, -st])
    right = np.array([sh, -ch, 0.0])
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward], axis=1)
    return Pose(rotation=rotation, translation=np.asarray(position, dtype=np.float64))


def inverse_pose(pose: Pose) -> Pose:
    rot_t = pose.rotation.T
    return Pose(rotation=rot_t, translation=-rot_t @ pose.translation)


def compose_poses(outer: Pose, inner: Pose) -> Pose:
    """
    Returns outer ∘ inner, i.e. the transform applying ``inner`` first.
    """
    return Pose(
        rotation=outer.rotation @ inner.rotation,
        translation=outer.rotation @ inner.translation + outer.translation,
    )


def transform_point(pose: Pose, p_cam: Sequence[float]) -> np.ndarray:
    return pose.rotation @ np.asarray(p_cam, dtype=np.float64) + pose.translation


def transform_points(pose: Pose, points: np.ndarray) -> np.ndarray:
    """
    Vectorized :func:`transform_point` over an (N, 3) array.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return points @ pose.rotation.T + pose.translation


def unproject(intr: CameraIntrinsics, u: float, v: float, z: float) -> np.ndarray:
    if not z > 0:
        raise InvalidDepthError(f"Depth must be positive (got {z}).")
    if not intr.contains(u, v):
        raise ValueError(
            f"Pixel ({u}, {v}) is outside the {intr.width}x{intr.height} image."
        )
    return np.array([(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z])


def unproject_pixels(
    intr: CameraIntrinsics, u: np.ndarray, v: np.ndarray, z: np.ndarray
) -> np.ndarray:
    """
    Vectorized :func:`unproject` without bounds checks. Returns (N, 3).
    """
    z = np.asarray(z, dtype=np.float64)
    x = (np.asarray(u, dtype=np.float64) - intr.cx) * z / intr.fx
    y = (np.asarray(v, dtype=np.float64) - intr.cy) * z / intr.fy
    return np.stack([x, y, z], axis=-1)


def project(intr: CameraIntrinsics, p: Sequence[float]) -> Tuple[float, float]:
    x, y, z = (float(c) for c in p)
    if not z > 0:
        raise BehindCameraError(f"Point {tuple(p)} is behind the camera.")
    return intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy


def project_points(intr: CameraIntrinsics, points: np.ndarray) -> np.ndarray:
    """
    Vectorized :func:`project`. Points with z <= 0 yield NaN pixels.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = points[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(z > 0, intr.fx * points[:, 0] / z + intr.cx, np.nan)
        v = np.where(z > 0, intr.fy * points[:, 1] / z + intr.cy, np.nan)
    return np.stack([u, v], axis=-1)


@dataclass(frozen=True)
class Box2D:
    u_min: float
    v_min: float
    u_max: float
    v_max: float
    class_id: str
    confidence: float = 1.0

    def __post_init__(self) -> None:
        if not (self.u_min < self.u_max and self.v_min < self.v_max):
            raise ValueError(
                f"Degenerate 2D box ({self.u_min}, {self.v_min}, "
                f"{self.u_max}, {self.v_max})."
            )
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"Confidence must be in [0, 1] (got {self.confidence}).")

    @property
    def width(self) -> float:
        return self.u_max - self.u_min

    @property
    def height(self) -> float:
        return self.v_max - self.v_min

    @property
    def center(self) -> Tuple[float, float]:
        return (self.u_min + self.u_max) / 2, (self.v_min + self.v_max) / 2

    def corners(self) -> np.ndarray:
        return np.array(
            [
                [self.u_min, self.v_min],
                [self.u_max, self.v_min],
                [self.u_max, self.v_max],
                [self.u_min, self.v_max],
            ]
        )

    def intersects_image(self, intr: CameraIntrinsics) -> bool:
        return (
            self.u_max > 0
            and self.v_max > 0
            and self.u_min < intr.width
            and self.v_min < intr.height
        )

    def is_truncated(self, intr: CameraIntrinsics, margin: float = 1.0) -> bool:
        return (
            self.u_min <= margin
            or self.v_min <= margin
            or self.u_max >= intr.width - margin
            or self.v_max >= intr.height - margin
        )


def clip_box2d(box: Box2D, intr: CameraIntrinsics) -> Optional[Box2D]:
    """
    Clip a box to the image. Returns None if nothing is left.
    """
    u_min, v_min = max(box.u_min, 0.0), max(box.v_min, 0.0)
    u_max, v_max = min(box.u_max, float(intr.width)), min(box.v_max, float(intr.height))
    if u_min >= u_max or v_min >= v_max:
        return None
    return Box2D(u_min, v_min, u_max, v_max, box.class_id, box.confidence)


def map_box2d(box: Box2D, src: CameraIntrinsics, dst: CameraIntrinsics) -> Box2D:
    """
    Map a box between two co-located cameras through normalized image
    coordinates. For cameras sharing a field of view this is a per-axis scale.
    """

    def _u(u: float) -> float:
        return (u - src.cx) / src.fx * dst.fx + dst.cx

    def _v(v: float) -> float:
        return (v - src.cy) / src.fy * dst.fy + dst.cy

    return Box2D(
        _u(box.u_min),
        _v(box.v_min),
        _u(box.u_max),
        _v(box.v_max),
        box.class_id,
        box.confidence,
    )


@dataclass(frozen=True, eq=False)
class Box3D:
    """
    A box rotated by ``yaw`` about world-up.

    ``dims`` is (length, width, height): length runs along the box's local x
    axis, which points at ``yaw`` in the ground plane.
    """

    center: np.ndarray
    dims: np.ndarray
    yaw: float = 0.0

    def __post_init__(self) -> None:
        center = _frozen(self.center)
        dims = _frozen(self.dims)
        if center.shape != (3,) or dims.shape != (3,):
            raise ValueError("Box3D center and dims must be 3-vectors.")
        if not np.all(dims > 0):
            raise ValueError(f"Box3D dims must be positive (got {dims.tolist()}).")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "yaw", normalize_yaw(float(self.yaw)))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Box3D):
            return NotImplemented
        return (
            np.array_equal(self.center, other.center)
            and np.array_equal(self.dims, other.dims)
            and self.yaw == other.yaw
        )

    def __hash__(self) -> int:
        return hash((tuple(self.center), tuple(self.dims), self.yaw))

    def __repr__(self) -> str:
        return (
            f"Box3D(center={self.center.tolist()}, dims={self.dims.tolist()}, "
            f"yaw={self.yaw})"
        )

    @property
    def volume(self) -> float:
        return float(np.prod(self.dims))

    @property
    def z_min(self) -> float:
        return float(self.center[2] - self.dims[2] / 2)

    @property
    def z_max(self) -> float:
        return float(self.center[2] + self.dims[2] / 2)

    def footprint(self) -> np.ndarray:
        """
        The (4, 2) ground-plane rectangle, counter-clockwise viewed from +up.
        """
        half_l, half_w = self.dims[0] / 2, self.dims[1] / 2
        local = np.array(
            [[half_l, half_w], [-half_l, half_w], [-half_l, -half_w], [half_l, -half_w]]
        )
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        """
        Inclusive containment test for an (N, 3) array of world points.
        """
        local = np.asarray(points, dtype=np.float64).reshape(-1, 3) - self.center
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        x = local[:, 0] * c + local[:, 1] * s
        y = -local[:, 0] * s + local[:, 1] * c
        half = self.dims / 2 + tol
        return (
            (np.abs(x) <= half[0])
            & (np.abs(y) <= half[1])
            & (np.abs(local[:, 2]) <= half[2])
        )


def box3d_corners(b: Box3D) -> np.ndarray:
    """
    Returns the (8, 3) corners of a box.

    Order: the bottom face counter-clockwise viewed from +up, starting at the
    (+length/2, +width/2) corner, then the top face in the same order.
    """
    footprint = b.footprint()
    bottom = np.column_stack([footprint, np.full(4, b.z_min)])
    top = np.column_stack([footprint, np.full(4, b.z_max)])
    return np.vstack([bottom, top])


def transform_box3d(pose: Pose, box: Box3D) -> Box3D:
    """
    Apply an up-preserving rigid transform to a box.
    """
    if abs(pose.rotation[2, 2] - 1.0) > 1e-9:
        raise ValueError("The transform does not preserve the world-up axis.")
    delta_yaw = math.atan2(pose.rotation[1, 0], pose.rotation[0, 0])
    return Box3D(
        center=transform_point(pose, box.center), dims=box.dims, yaw=box.yaw + delta_yaw
    )


def polygon_area(poly: np.ndarray) -> float:
    """
    Signed shoelace area; positive for counter-clockwise polygons.
    """
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """
    Sutherland–Hodgman clipping of ``subject`` against the convex polygon
    ``clip``. Both polygons must be counter-clockwise.

    Returns:
        The (M, 2) intersection polygon; M == 0 if the polygons are disjoint.
    """
    output: List[np.ndarray] = list(subject)
    cp1 = clip[-1]
    for cp2 in clip:
        if not output:
            break
        edge = cp2 - cp1

        def _side(p: np.ndarray) -> float:
            return edge[0] * (p[1] - cp1[1]) - edge[1] * (p[0] - cp1[0])

        def _intersect(s: np.ndarray, e: np.ndarray) -> np.ndarray:
            ds, de = _side(s), _side(e)
            t = ds / (ds - de)
            return s + t * (e - s)

        inputs = output
        output = []
        s = inputs[-1]
        for e in inputs:
            if _side(e) >= 0:
                if _side(s) < 0:
                    output.append(_intersect(s, e))
                output.append(e)
            elif _side(s) >= 0:
                output.append(_intersect(s, e))
            s = e
        cp1 = cp2
    if len(output) < 3:
        return np.zeros((0, 2))
    return np.array(output)


def _canonical_pair(a: Box3D, b: Box3D) -> Tuple[Box3D, Box3D]:
    key_a = (tuple(a.center), tuple(a.dims), a.yaw)
    key_b = (tuple(b.center), tuple(b.dims), b.yaw)
    return (a, b) if key_a <= key_b else (b, a)


def footprint_intersection_area(a: Box3D, b: Box3D) -> float:
    a, b = _canonical_pair(a, b)
    inter = clip_convex_polygon(a.footprint(), b.footprint())
    area = polygon_area(inter)
    return area if area > _AREA_EPS else 0.0


def iou3d(a: Box3D, b: Box3D) -> float:
    """
    Exact IoU of two boxes that share the world-up axis.

    The pair is put into a canonical order before clipping so that the result
    is bit-for-bit symmetric.
    """
    overlap_z = min(a.z_max, b.z_max) - max(a.z_min, b.z_min)
    if overlap_z <= 0:
        return 0.0
    inter_area = footprint_intersection_area(a, b)
    if inter_area == 0.0:
        return 0.0
    inter = inter_area * overlap_z
    union = a.volume + b.volume - inter
    return float(min(1.0, max(0.0, inter / union)))


def iou3d_mc(a: Box3D, b: Box3D, n_samples: int, rng_seed: int) -> float:
    """
    Monte-Carlo IoU estimate over the axis-aligned bounds of both boxes.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1 (got {n_samples}).")
    corners = np.vstack([box3d_corners(a), box3d_corners(b)])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    rng = np.random.default_rng(rng_seed)
    samples = lo + rng.random((n_samples, 3)) * (hi - lo)
    in_a = a.contains(samples)
    in_b = b.contains(samples)
    either = int(np.count_nonzero(in_a | in_b))
    if either == 0:
        return 0.0
    return int(np.count_nonzero(in_a & in_b)) / either


@dataclass(frozen=True)
class Detection3D:
    box: Box3D
    class_id: str
    confidence: float
    view_count: int = 1
    last_update: float = 0.0

    def __post_init__(self) -> None:
        if self.view_count < 1:
            raise ValueError(f"view_count must be >= 1 (got {self.view_count}).")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"Confidence must be in [0, 1] (got {self.confidence}).")
