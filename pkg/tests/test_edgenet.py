#!/usr/bin/env python3
# Copyright (c) Meta Platforms, Inc. and affiliates.
# All rights reserved.
#
# This source code is licensed under the BSD-style license found in the
# LICENSE file in the root directory of this source tree.

import asyncio
import struct
import unittest
from concurrent.futures import Executor
from typing import List, Optional, Tuple

from edgelift.backend import DetectorBackend
from edgelift.backends.oracle import OracleBackend
from edgelift.edgenet import (
    BackpressurePolicy,
    DetectTimeoutError,
    EdgeClient,
    EdgeServer,
    FrameDroppedError,
    RemoteError,
    TransportError,
)
from edgelift.geometry import Box2D
from edgelift.simkit import (
    acceptance_scene,
    LatencySpec,
    make_trajectory,
    NoiseSpec,
    oracle_detect2d,
    rgb_intrinsics,
    Scenario,
    TrajectorySpec,
)
from edgelift.test_utils import async_test, looking_at
from edgelift.wire import (
    MsgType,
    read_message,
    SceneViewRequest,
    WireMessage,
    write_message,
)

_LOCALHOST = "127.0.0.1"


def _pad(seconds: float) -> LatencySpec:
    return LatencySpec(fixed=0.0, jitter=0.0, model_compute=seconds)


def _request(seed: int = 0, scene_id: str = "acceptance") -> SceneViewRequest:
    return SceneViewRequest(
        scene_id=scene_id, pose=looking_at((0.0, 0.0, 0.25)), seed=seed
    )


class SleepyBackend(DetectorBackend):
    """
    Sleeps ``seed`` milliseconds and returns one box labelled with the seed.
    """

    async def detect(
        self, request: SceneViewRequest, executor: Optional[Executor] = None
    ) -> List[Box2D]:
        await asyncio.sleep(request.seed / 1000)
        return [Box2D(0.0, 0.0, 10.0, 10.0, str(request.seed))]


async def _start(
    backend: Optional[DetectorBackend] = None,
    latency: Optional[LatencySpec] = None,
    seed: int = 0,
) -> Tuple[EdgeServer, int]:
    server = EdgeServer(backend or OracleBackend.from_scene_path(None), latency, seed)
    await server.start(_LOCALHOST, 0)
    return server, server.address[1]


async def _connect(port: int, **kwargs) -> EdgeClient:
    client = EdgeClient(_LOCALHOST, port, **kwargs)
    await client.connect()
    return client


class LoopbackTest(unittest.TestCase):
    @async_test
    async def test_matches_in_process_detector(self) -> None:
        server, port = await _start()
        client = await _connect(port)
        scene = acceptance_scene()
        spec = TrajectorySpec(scenario=Scenario.CIRCLING, speed=2.0)
        trajectory = make_trajectory(spec, scene.target)[::20]
        try:
            for frame_id, (ts, pose) in enumerate(trajectory):
                request = SceneViewRequest("acceptance", pose, seed=frame_id)
                result = await client.detect(frame_id, ts, request)
                expected = oracle_detect2d(
                    scene, pose, rgb_intrinsics(), NoiseSpec(), frame_id
                )
                self.assertEqual(result.frame_id, frame_id)
                self.assertEqual(result.boxes, expected)
        finally:
            await client.close()
            await server.close()
        self.assertEqual(server.requests_served, len(trajectory))

    @async_test
    async def test_compute_pad(self) -> None:
        server, port = await _start(latency=_pad(0.05))
        client = await _connect(port)
        try:
            result = await client.detect(0, 0.0, _request())
        finally:
            await client.close()
            await server.close()
        self.assertGreaterEqual(result.server_time, 0.05)
        self.assertGreaterEqual(result.rtt, result.server_time)

    @async_test
    async def test_out_of_order_responses(self) -> None:
        server, port = await _start(SleepyBackend())
        client = await _connect(port)
        try:
            slow = await client.submit(1, 0.0, _request(seed=300).as_bytes())
            fast = await client.submit(2, 0.0, _request(seed=0).as_bytes())
            self.assertEqual(client.inflight, 2)
            done, _ = await asyncio.wait(
                {slow, fast}, return_when=asyncio.FIRST_COMPLETED
            )
            self.assertEqual(done, {fast})
            self.assertEqual(fast.result().boxes[0].class_id, "0")
            self.assertEqual((await slow).boxes[0].class_id, "300")
        finally:
            await client.close()
            await server.close()

    @async_test
    async def test_ping(self) -> None:
        server, port = await _start()
        client = await _connect(port)
        try:
            rtt = await client.ping()
        finally:
            await client.close()
            await server.close()
        self.assertGreater(rtt, 0.0)
        self.assertLess(rtt, 1.0)

    @async_test
    async def test_unknown_scene(self) -> None:
        server, port = await _start()
        client = await _connect(port)
        try:
            with self.assertRaises(RemoteError):
                await client.detect(0, 0.0, _request(scene_id="elsewhere"))
            # The connection survives a failed request.
            result = await client.detect(1, 0.0, _request())
            self.assertEqual(result.frame_id, 1)
        finally:
            await client.close()
            await server.close()

    @async_test
    async def test_malformed_frame(self) -> None:
        server, port = await _start()
        reader, writer = await asyncio.open_connection(_LOCALHOST, port)
        try:
            writer.write(struct.pack("<IBQd", 0, 77, 5, 0.0))
            await writer.drain()
            reply = await read_message(reader)
            self.assertEqual(reply.msg_type, MsgType.ERROR)
            self.assertIsNone(await read_message(reader))
        finally:
            writer.close()
            await server.close()

    @async_test
    async def test_malformed_payload_closes_connection(self) -> None:
        server, port = await _start()
        reader, writer = await asyncio.open_connection(_LOCALHOST, port)
        try:
            await write_message(
                writer, WireMessage(MsgType.DETECT_REQUEST, 9, 1.5, b"\x00\x01\x02")
            )
            reply = await read_message(reader)
            self.assertEqual(reply.msg_type, MsgType.ERROR)
            self.assertEqual(reply.frame_id, 9)
            self.assertIsNone(await read_message(reader))
        finally:
            writer.close()
            await server.close()


class BackpressureTest(unittest.TestCase):
    @async_test
    async def test_max_inflight_under_stress(self) -> None:
        server, port = await _start(
            latency=LatencySpec(fixed=0.0, jitter=0.005, model_compute=0.02)
        )
        client = await _connect(port, max_inflight=3)
        payload = _request().as_bytes()
        handles = []
        try:
            for frame_id in range(1000):
                try:
                    handles.append(await client.submit(frame_id, 0.0, payload))
                except FrameDroppedError:
                    pass
                self.assertLessEqual(client.inflight, 3)
                await asyncio.sleep(0.001)
            results = await asyncio.gather(*handles)
        finally:
            await client.close()
            await server.close()
        self.assertLessEqual(client.peak_inflight, 3)
        self.assertEqual(len(handles) + client.dropped, 1000)
        self.assertGreater(client.dropped, 0)
        self.assertEqual(len(results), server.requests_served)
        frame_ids = [r.frame_id for r in results]
        self.assertEqual(frame_ids, sorted(frame_ids))

    @async_test
    async def test_reject_newest(self) -> None:
        server, port = await _start(latency=_pad(0.2))
        client = await _connect(port, max_inflight=1)
        try:
            first = await client.submit(0, 0.0, _request().as_bytes())
            with self.assertRaises(FrameDroppedError):
                await client.submit(1, 0.0, _request().as_bytes())
            self.assertEqual(client.dropped, 1)
            await first
            # The slot is free again.
            await client.detect(2, 0.0, _request())
        finally:
            await client.close()
            await server.close()

    @async_test
    async def test_block_policy(self) -> None:
        server, port = await _start(latency=_pad(0.05))
        client = await _connect(
            port, max_inflight=1, policy=BackpressurePolicy.BLOCK
        )
        try:
            first = await client.submit(0, 0.0, _request().as_bytes())
            second = await client.submit(1, 0.0, _request().as_bytes())
            self.assertTrue(first.done())
            await second
        finally:
            await client.close()
            await server.close()
        self.assertEqual(client.dropped, 0)
        self.assertEqual(client.peak_inflight, 1)

    @async_test
    async def test_blocked_frame_superseded_by_newer_frame(self) -> None:
        server, port = await _start(backend=SleepyBackend())
        client = await _connect(
            port, max_inflight=1, policy=BackpressurePolicy.BLOCK
        )
        try:
            first = await client.submit(1, 0.0, _request(seed=50).as_bytes())
            newer = asyncio.create_task(
                client.submit(3, 0.0, _request(seed=1).as_bytes())
            )
            await asyncio.sleep(0)
            older = asyncio.create_task(
                client.submit(2, 0.0, _request(seed=1).as_bytes())
            )
            await first
            handle = await newer
            self.assertEqual((await handle).frame_id, 3)
            with self.assertRaises(FrameDroppedError):
                await older
        finally:
            await client.close()
            await server.close()
        self.assertEqual(client.dropped, 1)

    @async_test
    async def test_frame_ids_increase(self) -> None:
        server, port = await _start()
        client = await _connect(port)
        try:
            await client.detect(5, 0.0, _request())
            with self.assertRaises(ValueError):
                await client.submit(5, 0.0, _request().as_bytes())
        finally:
            await client.close()
            await server.close()

    def test_max_inflight_validation(self) -> None:
        with self.assertRaises(ValueError):
            EdgeClient(_LOCALHOST, 1, max_inflight=0)


class FailureTest(unittest.TestCase):
    @async_test
    async def test_timeout(self) -> None:
        server, port = await _start(latency=_pad(0.5))
        client = await _connect(port, timeout=0.05)
        try:
            with self.assertRaises(DetectTimeoutError):
                await client.detect(0, 0.0, _request())
            self.assertEqual(client.inflight, 0)
        finally:
            await client.close()
            await server.close()

    @async_test
    async def test_server_shutdown_fails_pending(self) -> None:
        server, port = await _start(latency=_pad(1.0))
        client = await _connect(port, timeout=5.0)
        try:
            handle = await client.submit(0, 0.0, _request().as_bytes())
            await server.close()
            with self.assertRaises(TransportError):
                await handle
            with self.assertRaises(TransportError):
                await client.submit(1, 0.0, _request().as_bytes())
        finally:
            await client.close()

    @async_test
    async def test_connection_refused(self) -> None:
        server, port = await _start()
        await server.close()
        client = EdgeClient(_LOCALHOST, port)
        with self.assertRaises(TransportError):
            await client.connect()
        with self.assertRaises(TransportError):
            await client.submit(0, 0.0, b"")

    @async_test
    async def test_double_bind(self) -> None:
        server, port = await _start()
        other = EdgeServer(OracleBackend.from_scene_path(None))
        try:
            with self.assertRaises(OSError):
                await other.start(_LOCALHOST, port)
        finally:
            await server.close()
