#!/usr/bin/env python3
# Copyright (c) Meta Platforms, Inc. and affiliates.
# All rights reserved.
#
# This source code is licensed under the BSD-style license found in the
# LICENSE file in the root directory of this source tree.

import asyncio
import struct
import unittest
from unittest.mock import patch

import numpy as np

from edgelift.geometry import Box2D, gravity_aligned_pose
from edgelift.test_utils import async_test
from edgelift.wire import (
    decode,
    detect_response_payload,
    encode,
    FramingError,
    HEADER_SIZE,
    MsgType,
    OversizeError,
    parse_detect_response,
    read_message,
    SceneViewRequest,
    WireMessage,
)


def _reader(data: bytes) -> asyncio.StreamReader:
    reader = asyncio.StreamReader()
    reader.feed_data(data)
    reader.feed_eof()
    return reader


class FramingTest(unittest.TestCase):
    def test_header_layout(self) -> None:
        self.assertEqual(HEADER_SIZE, 21)
        buf = encode(WireMessage(MsgType.PING, 7, 1.5, b"abc"))
        self.assertEqual(struct.unpack_from("<IBQd", buf), (3, 3, 7, 1.5))
        self.assertEqual(buf[HEADER_SIZE:], b"abc")

    def test_random_roundtrip(self) -> None:
        rng = np.random.default_rng(0)
        types = list(MsgType)
        for _ in range(10000):
            msg = WireMessage(
                msg_type=types[int(rng.integers(len(types)))],
                frame_id=int(rng.integers(0, 2**64, dtype=np.uint64)),
                capture_timestamp=float(rng.uniform(-1e6, 1e6)),
                payload=rng.bytes(int(rng.integers(0, 65))),
            )
            self.assertEqual(decode(encode(msg)), msg)

    def test_malformed(self) -> None:
        buf = encode(WireMessage(MsgType.DETECT_REQUEST, 1, 0.0, b"payload"))
        for name, bad in [
            ("truncated header", buf[:10]),
            ("truncated payload", buf[:-1]),
            ("trailing bytes", buf + b"x"),
            ("unknown type", buf[:4] + bytes([9]) + buf[5:]),
        ]:
            with self.subTest(name):
                with self.assertRaises(FramingError):
                    decode(bad)

    def test_oversize(self) -> None:
        with patch("edgelift.wire.MAX_PAYLOAD_SIZE", 4):
            with self.assertRaises(OversizeError):
                encode(WireMessage(MsgType.PING, 0, 0.0, b"12345"))
            buf = struct.pack("<IBQd", 5, 3, 0, 0.0) + b"12345"
            with self.assertRaises(OversizeError):
                decode(buf)

    def test_frame_id_range(self) -> None:
        with self.assertRaises(ValueError):
            encode(WireMessage(MsgType.PING, -1, 0.0))
        with self.assertRaises(ValueError):
            encode(WireMessage(MsgType.PING, 2**64, 0.0))

    @async_test
    async def test_stream(self) -> None:
        first = WireMessage(MsgType.PING, 1, 0.5)
        second = WireMessage(MsgType.PONG, 1, 0.5, b"\x00" * 100)
        reader = _reader(encode(first) + encode(second))
        self.assertEqual(await read_message(reader), first)
        self.assertEqual(await read_message(reader), second)
        self.assertIsNone(await read_message(reader))

    @async_test
    async def test_stream_truncated(self) -> None:
        buf = encode(WireMessage(MsgType.PING, 1, 0.5, b"abcdef"))
        for cut in [5, len(buf) - 2]:
            with self.subTest(cut=cut):
                with self.assertRaises(FramingError):
                    await read_message(_reader(buf[:cut]))


class PayloadTest(unittest.TestCase):
    def test_scene_view_request(self) -> None:
        pose = gravity_aligned_pose((1.0, -2.0, 1.4), heading=0.3, tilt=0.4)
        request = SceneViewRequest(scene_id="salle-à-manger", pose=pose, seed=2**63)
        restored = SceneViewRequest.from_bytes(request.as_bytes())
        self.assertEqual(restored.scene_id, request.scene_id)
        self.assertEqual(restored.seed, request.seed)
        np.testing.assert_array_equal(restored.pose.rotation, pose.rotation)
        np.testing.assert_array_equal(restored.pose.translation, pose.translation)

    def test_scene_view_request_malformed(self) -> None:
        pose = gravity_aligned_pose((0.0, 0.0, 1.4), heading=0.0, tilt=0.0)
        buf = SceneViewRequest(scene_id="a", pose=pose, seed=1).as_bytes()
        with self.assertRaises(FramingError):
            SceneViewRequest.from_bytes(buf[:20])
        with self.assertRaises(FramingError):
            SceneViewRequest.from_bytes(buf + b"b")
        not_a_rotation = struct.pack("<12dQH", *([0.0] * 12), 1, 0)
        with self.assertRaises(FramingError):
            SceneViewRequest.from_bytes(not_a_rotation)

    def test_detect_response(self) -> None:
        boxes = [
            Box2D(1.0, 2.0, 30.5, 40.25, "chair", 0.75),
            Box2D(100.0, 50.0, 120.0, 90.0, "bag", 1.0),
        ]
        restored, server_time = parse_detect_response(
            detect_response_payload(boxes, 0.013)
        )
        self.assertEqual(restored, boxes)
        self.assertEqual(server_time, 0.013)
        empty = detect_response_payload([], 0.0)
        self.assertEqual(parse_detect_response(empty), ([], 0.0))

    def test_detect_response_malformed(self) -> None:
        payload = detect_response_payload([Box2D(1.0, 2.0, 3.0, 4.0, "box")], 0.0)
        for bad in [payload[:4], payload[:-2]]:
            with self.subTest(size=len(bad)):
                with self.assertRaises(FramingError):
                    parse_detect_response(bad)
