#!/usr/bin/env python3
# Copyright (c) Meta Platforms, Inc. and affiliates.
# All rights reserved.
#
# This source code is licensed under the BSD-style license found in the
# LICENSE file in the root directory of this source tree.

"""
World-anchored object registry with multi-view fusion.

Incoming detections are greedily associated with known objects of the same
class (nearest center, gated by distance and a non-zero 3D overlap). Matched
observations are folded into confidence-weighted running means; unmatched ones
start a new object.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from .geometry import Box3D, Detection3D, iou3d

logger: logging.Logger = logging.getLogger(__name__)

_CONFIDENCE_CAP: float = 0.999
_MIN_WEIGHT: float = 1e-6


class FusionError(RuntimeError):
    pass


class FusionMode(Enum):
    WEIGHTED_MEAN = "weighted_mean"
    LAST_WRITE_WINS = "last_write_wins"


def align_yaw(box: Box3D, ref_yaw: float) -> Tuple[float, np.ndarray]:
    """
    Express a box's orientation within a quarter turn of ``ref_yaw``.

    A rectangle is unchanged by a quarter turn combined with a swap of its
    horizontal dims, so the returned (yaw, dims) describe the same box.
    """
    quarter = math.pi / 2
    turns = int(math.floor((box.yaw - ref_yaw) / quarter + 0.5))
    yaw = box.yaw - turns * quarter
    dims = np.array(box.dims)
    if turns % 2:
        dims[0], dims[1] = dims[1], dims[0]
    return yaw, dims


@dataclass
class _RunningStats:
    weight_sum: float
    center_sum: np.ndarray
    dims_sum: np.ndarray
    cos2_sum: float
    sin2_sum: float

    @classmethod
    def from_detection(cls, det: Detection3D) -> "_RunningStats":
        w = max(det.confidence, _MIN_WEIGHT)
        yaw = det.box.yaw
        return cls(
            weight_sum=w,
            center_sum=w * det.box.center,
            dims_sum=w * det.box.dims,
            cos2_sum=w * math.cos(2 * yaw),
            sin2_sum=w * math.sin(2 * yaw),
        )

    def add(self, det: Detection3D, ref_yaw: float) -> None:
        w = max(det.confidence, _MIN_WEIGHT)
        yaw, dims = align_yaw(det.box, ref_yaw)
        self.weight_sum += w
        self.center_sum = self.center_sum + w * det.box.center
        self.dims_sum = self.dims_sum + w * dims
        self.cos2_sum += w * math.cos(2 * yaw)
        self.sin2_sum += w * math.sin(2 * yaw)

    def box(self) -> Box3D:
        return Box3D(
            center=self.center_sum / self.weight_sum,
            dims=self.dims_sum / self.weight_sum,
            yaw=math.atan2(self.sin2_sum, self.cos2_sum) / 2,
        )


@dataclass
class ObjectRegistry:
    match_dist_max: float = 0.5
    stale_after: float = 5.0
    mode: FusionMode = FusionMode.WEIGHTED_MEAN
    reject_stale: bool = True
    entries: Dict[int, Detection3D] = field(default_factory=dict)
    _stats: Dict[int, _RunningStats] = field(default_factory=dict, repr=False)
    _next_id: int = 1

    def __post_init__(self) -> None:
        if not self.match_dist_max > 0:
            raise ValueError(
                f"match_dist_max must be positive (got {self.match_dist_max})."
            )
        if not self.stale_after > 0:
            raise ValueError(f"stale_after must be positive (got {self.stale_after}).")

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, object_id: int) -> bool:
        return object_id in self.entries

    def snapshot(self) -> Dict[int, Detection3D]:
        return dict(self.entries)

    def detections(self) -> List[Detection3D]:
        return [self.entries[object_id] for object_id in sorted(self.entries)]

    def insert(self, det: Detection3D) -> int:
        object_id = self._next_id
        self._next_id += 1
        self.entries[object_id] = det
        self._stats[object_id] = _RunningStats.from_detection(det)
        return object_id

    def match(self, det: Detection3D) -> Optional[int]:
        return match(self, det)

    def fuse(self, object_id: int, det: Detection3D) -> Detection3D:
        return fuse(self, object_id, det)

    def insert_or_fuse(self, det: Detection3D) -> int:
        return insert_or_fuse(self, det)

    def prune(self, now: float) -> List[int]:
        return prune(self, now)


def match(reg: ObjectRegistry, det: Detection3D) -> Optional[int]:
    """
    Find the registry entry a detection belongs to.

    Returns:
        The id of the same-class entry with the nearest center, provided it
        lies within ``match_dist_max`` and overlaps the detection. Ties go to
        the higher IoU, then the lower id. None if nothing qualifies.
    """
    best: Optional[Tuple[float, float, int]] = None
    for object_id, entry in reg.entries.items():
        if entry.class_id != det.class_id:
            continue
        dist = float(np.linalg.norm(entry.box.center - det.box.center))
        if dist > reg.match_dist_max:
            continue
        iou = iou3d(entry.box, det.box)
        if iou <= 0:
            continue
        key = (dist, -iou, object_id)
        if best is None or key < best:
            best = key
    return None if best is None else best[2]


def fuse(reg: ObjectRegistry, object_id: int, det: Detection3D) -> Detection3D:
    """
    Fold a new observation into an existing entry.
    """
    if object_id not in reg.entries:
        raise FusionError(f"Unknown object id {object_id}.")
    entry = reg.entries[object_id]
    if entry.class_id != det.class_id:
        raise FusionError(
            f"Cannot fuse a {det.class_id} detection into {entry.class_id} "
            f"object {object_id}."
        )
    if reg.reject_stale and det.last_update < entry.last_update:
        logger.debug(
            f"Ignoring stale observation of object {object_id} "
            f"({det.last_update} < {entry.last_update})."
        )
        return entry

    confidence = min(
        1.0 - (1.0 - entry.confidence) * (1.0 - det.confidence), _CONFIDENCE_CAP
    )
    if reg.mode == FusionMode.WEIGHTED_MEAN:
        stats = reg._stats[object_id]
        stats.add(det, ref_yaw=entry.box.yaw)
        box = stats.box()
    else:
        reg._stats[object_id] = _RunningStats.from_detection(det)
        box = det.box
    fused = replace(
        entry,
        box=box,
        confidence=confidence,
        view_count=entry.view_count + 1,
        last_update=max(entry.last_update, det.last_update),
    )
    reg.entries[object_id] = fused
    return fused


def insert_or_fuse(reg: ObjectRegistry, det: Detection3D) -> int:
    object_id = match(reg, det)
    if object_id is None:
        return reg.insert(det)
    fuse(reg, object_id, det)
    return object_id


def prune(reg: ObjectRegistry, now: float) -> List[int]:
    removed = [
        object_id
        for object_id, entry in reg.entries.items()
        if now - entry.last_update > reg.stale_after
    ]
    for object_id in removed:
        del reg.entries[object_id]
        del reg._stats[object_id]
    if removed:
        logger.debug(f"Pruned stale objects {removed} at t={now:.3f}.")
    return removed
