#!/usr/bin/env python3
# Copyright (c) Meta Platforms, Inc. and affiliates.
# All rights reserved.
#
# This source code is licensed under the BSD-style license found in the
# LICENSE file in the root directory of this source tree.

"""
Length-prefixed framing for the edge-offload protocol.

Every message is a fixed little-endian header followed by the payload:

+-------------------------------+ 0 bytes
| payload length as u32         |
+-------------------------------+ 4 bytes
| msg_type as u8                |
+-------------------------------+ 5 bytes
| frame_id as u64               |
+-------------------------------+ 13 bytes
| capture_timestamp as f64      |
+-------------------------------+ 21 bytes
| payload                       |
+-------------------------------+ 21 + payload length bytes
"""

import asyncio
import logging
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import List, Optional, Tuple

import numpy as np

from .geometry import Box2D, Pose
from .serialization import boxes2d_as_bytes, boxes2d_from_bytes

logger: logging.Logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<IBQd")
HEADER_SIZE: int = _HEADER.size
MAX_PAYLOAD_SIZE: int = 64 * 1024 * 1024

# 9 rotation + 3 translation, seed, scene id length
_SCENE_VIEW = struct.Struct("<12dQH")
_SERVER_TIME = struct.Struct("<d")


class WireError(RuntimeError):
    pass


class OversizeError(WireError):
    pass


class FramingError(WireError):
    pass


class MsgType(IntEnum):
    DETECT_REQUEST = 1
    DETECT_RESPONSE = 2
    PING = 3
    PONG = 4
    # Raw image payload for external detector backends.
    RAW_DETECT_REQUEST = 5
    ERROR = 255


@dataclass(frozen=True)
class WireMessage:
    msg_type: MsgType
    frame_id: int
    capture_timestamp: float
    payload: bytes = b""


def encode(msg: WireMessage) -> bytes:
    if len(msg.payload) > MAX_PAYLOAD_SIZE:
        raise OversizeError(
            f"Payload of {len(msg.payload)} bytes exceeds {MAX_PAYLOAD_SIZE} bytes."
        )
    if not 0 <= msg.frame_id < 2**64:
        raise ValueError(f"frame_id {msg.frame_id} does not fit in u64.")
    header = _HEADER.pack(
        len(msg.payload), int(msg.msg_type), msg.frame_id, msg.capture_timestamp
    )
    return header + bytes(msg.payload)


def _parse_header(header: bytes) -> Tuple[int, MsgType, int, float]:
    length, raw_type, frame_id, capture_timestamp = _HEADER.unpack(header)
    if length > MAX_PAYLOAD_SIZE:
        raise OversizeError(
            f"Frame announces {length} payload bytes (max {MAX_PAYLOAD_SIZE})."
        )
    try:
        msg_type = MsgType(raw_type)
    except ValueError as e:
        raise FramingError(f"Unknown message type {raw_type}.") from e
    return length, msg_type, frame_id, capture_timestamp


def decode(buf: bytes) -> WireMessage:
    if len(buf) < HEADER_SIZE:
        raise FramingError(f"Truncated header ({len(buf)} < {HEADER_SIZE} bytes).")
    length, msg_type, frame_id, capture_timestamp = _parse_header(buf[:HEADER_SIZE])
    if len(buf) != HEADER_SIZE + length:
        raise FramingError(
            f"Frame size mismatch (header says {length} payload bytes, "
            f"got {len(buf) - HEADER_SIZE})."
        )
    return WireMessage(msg_type, frame_id, capture_timestamp, bytes(buf[HEADER_SIZE:]))


async def read_message(reader: asyncio.StreamReader) -> Optional[WireMessage]:
    """
    Read one message from a stream.

    Returns:
        The message, or None on a clean end of stream at a frame boundary.
    """
    try:
        header = await reader.readexactly(HEADER_SIZE)
    except asyncio.IncompleteReadError as e:
        if not e.partial:
            return None
        raise FramingError(f"Stream ended inside a header ({len(e.partial)} bytes).")
    length, msg_type, frame_id, capture_timestamp = _parse_header(header)
    try:
        payload = await reader.readexactly(length)
    except asyncio.IncompleteReadError as e:
        raise FramingError(
            f"Stream ended inside a payload ({len(e.partial)} of {length} bytes)."
        )
    return WireMessage(msg_type, frame_id, capture_timestamp, payload)


async def write_message(writer: asyncio.StreamWriter, msg: WireMessage) -> None:
    writer.write(encode(msg))
    await writer.drain()


@dataclass(frozen=True)
class SceneViewRequest:
    """
    Simulation payload of a detect request: which scene, from where, and the
    seed that drives the detector's noise.
    """

    scene_id: str
    pose: Pose
    seed: int

    def as_bytes(self) -> bytes:
        scene_id = self.scene_id.encode("utf-8")
        return (
            _SCENE_VIEW.pack(
                *self.pose.rotation.ravel().tolist(),
                *self.pose.translation.tolist(),
                self.seed,
                len(scene_id),
            )
            + scene_id
        )

    @classmethod
    def from_bytes(cls, buf: bytes) -> "SceneViewRequest":
        if len(buf) < _SCENE_VIEW.size:
            raise FramingError("Truncated scene-view request.")
        fields = _SCENE_VIEW.unpack_from(buf, 0)
        n = fields[13]
        if len(buf) != _SCENE_VIEW.size + n:
            raise FramingError("Scene-view request size mismatch.")
        try:
            pose = Pose(
                rotation=np.array(fields[:9]).reshape(3, 3),
                translation=np.array(fields[9:12]),
            )
        except ValueError as e:
            raise FramingError(f"Invalid pose in request: {e}") from e
        scene_id = bytes(buf[_SCENE_VIEW.size :]).decode("utf-8")
        return cls(scene_id=scene_id, pose=pose, seed=fields[12])


def detect_response_payload(boxes: List[Box2D], server_time: float) -> bytes:
    return _SERVER_TIME.pack(server_time) + boxes2d_as_bytes(boxes)


def parse_detect_response(payload: bytes) -> Tuple[List[Box2D], float]:
    """
    Returns:
        (boxes, server handling time in seconds)
    """
    if len(payload) < _SERVER_TIME.size:
        raise FramingError("Truncated detect response.")
    (server_time,) = _SERVER_TIME.unpack_from(payload, 0)
    try:
        boxes = boxes2d_from_bytes(payload, offset=_SERVER_TIME.size)
    except (ValueError, struct.error) as e:
        raise FramingError(f"Malformed box list: {e}") from e
    return boxes, server_time
