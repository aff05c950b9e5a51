#!/usr/bin/env python3
# Copyright (c) Meta Platforms, Inc. and affiliates.
# All rights reserved.
#
# This source code is licensed under the BSD-style license found in the
# LICENSE file in the root directory of this source tree.

import logging
import struct
from typing import List

import numpy as np

from .depthlift import DepthFrame
from .geometry import Box2D, CameraIntrinsics, Pose

logger: logging.Logger = logging.getLogger(__name__)

DEPTH_FRAME_MAGIC: bytes = b"DPF1"

# magic, width, height, timestamp, 9 rotation + 3 translation, fx, fy, cx, cy
_DPF1_HEADER = struct.Struct("<4sIId12d4d")
DPF1_HEADER_SIZE: int = _DPF1_HEADER.size

# u_min, v_min, u_max, v_max, confidence, class_id length
_BOX2D_STRUCT = struct.Struct("<5dH")
_COUNT_STRUCT = struct.Struct("<I")


def depth_frame_as_bytes(frame: DepthFrame) -> bytes:
    """
    Serialize a depth frame in the DPF1 fixture format.

    Binary format (all little-endian):

    +-----------------------------------+ 0 bytes
    |          magic "DPF1"             |
    +-----------------------------------+ 4 bytes
    |     width, height as u32          |
    +-----------------------------------+ 12 bytes
    |       timestamp as f64            |
    +-----------------------------------+ 20 bytes
    |  rotation (row-major 9 x f64)     |
    |  then translation (3 x f64)       |
    +-----------------------------------+ 116 bytes
    |      fx, fy, cx, cy as f64        |
    +-----------------------------------+ 148 bytes
    |  width * height f32 depths,       |
    |  row-major                        |
    +-----------------------------------+ 148 + 4 * width * height bytes

    Args:
        frame: The frame to serialize.

    Returns:
        The serialized frame.
    """
    intr = frame.intrinsics
    header = _DPF1_HEADER.pack(
        DEPTH_FRAME_MAGIC,
        frame.width,
        frame.height,
        frame.timestamp,
        *frame.pose.rotation.ravel().tolist(),
        *frame.pose.translation.tolist(),
        intr.fx,
        intr.fy,
        intr.cx,
        intr.cy,
    )
    return header + np.ascontiguousarray(frame.depth, dtype="<f4").tobytes()


def depth_frame_from_bytes(buf: bytes) -> DepthFrame:
    if len(buf) < DPF1_HEADER_SIZE:
        raise ValueError(
            f"Buffer is too short for a DPF1 header ({len(buf)} < {DPF1_HEADER_SIZE})."
        )
    fields = _DPF1_HEADER.unpack_from(buf, 0)
    magic, width, height, timestamp = fields[:4]
    if magic != DEPTH_FRAME_MAGIC:
        raise ValueError(f"Bad depth frame magic {magic!r}.")
    rotation = np.array(fields[4:13]).reshape(3, 3)
    translation = np.array(fields[13:16])
    fx, fy, cx, cy = fields[16:20]
    expected = DPF1_HEADER_SIZE + 4 * width * height
    if len(buf) != expected:
        raise ValueError(
            f"DPF1 payload size mismatch (expected {expected} bytes, got {len(buf)})."
        )
    depth = np.frombuffer(buf, dtype="<f4", offset=DPF1_HEADER_SIZE).reshape(
        height, width
    )
    return DepthFrame(
        depth=depth.astype(np.float32),
        timestamp=timestamp,
        pose=Pose(rotation=rotation, translation=translation),
        intrinsics=CameraIntrinsics(
            fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height
        ),
    )


def boxes2d_as_bytes(boxes: List[Box2D]) -> bytes:
    """
    Serialize a list of 2D boxes.

    Binary format:

    +-------------------------------------------+ 0 bytes
    |            box count as u32               |
    +-------------------------------------------+ 4 bytes
    | per box: u_min, v_min, u_max, v_max,      |
    | confidence as f64, class_id length as u16,|
    | then the utf-8 class_id                   |
    +-------------------------------------------+
    """
    parts = [_COUNT_STRUCT.pack(len(boxes))]
    for box in boxes:
        class_id = box.class_id.encode("utf-8")
        parts.append(
            _BOX2D_STRUCT.pack(
                box.u_min,
                box.v_min,
                box.u_max,
                box.v_max,
                box.confidence,
                len(class_id),
            )
        )
        parts.append(class_id)
    return b"".join(parts)


def boxes2d_from_bytes(buf: bytes, offset: int = 0) -> List[Box2D]:
    (count,) = _COUNT_STRUCT.unpack_from(buf, offset)
    offset += _COUNT_STRUCT.size
    boxes = []
    for _ in range(count):
        u_min, v_min, u_max, v_max, confidence, n = _BOX2D_STRUCT.unpack_from(
            buf, offset
        )
        offset += _BOX2D_STRUCT.size
        if offset + n > len(buf):
            raise ValueError("Truncated class_id in box list.")
        class_id = bytes(buf[offset : offset + n]).decode("utf-8")
        offset += n
        boxes.append(Box2D(u_min, v_min, u_max, v_max, class_id, confidence))
    if offset != len(buf):
        raise ValueError(f"{len(buf) - offset} trailing bytes after box list.")
    return boxes
