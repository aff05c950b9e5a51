#!/usr/bin/env python3
# Copyright (c) Meta Platforms, Inc. and affiliates.
# All rights reserved.
#
# This source code is licensed under the BSD-style license found in the
# LICENSE file in the root directory of this source tree.

import argparse
import asyncio
import logging
import time
from typing import List

from edgelift.backends.oracle import OracleBackend
from edgelift.edgenet import EdgeClient, EdgeServer, FrameDroppedError
from edgelift.profiler import LatencySummary
from edgelift.simkit import (
    acceptance_scene,
    LatencySpec,
    make_trajectory,
    Scenario,
    TrajectorySpec,
)
from edgelift.wire import SceneViewRequest

logging.basicConfig(level=logging.INFO)
logger: logging.Logger = logging.getLogger(__name__)


async def benchmark_loopback(
    n_frames: int, fps: float, compute_ms: float, max_inflight: int
) -> None:
    server = EdgeServer(
        OracleBackend.from_scene_path(None),
        latency=LatencySpec(fixed=0.0, jitter=0.0, model_compute=compute_ms / 1000),
    )
    await server.start("127.0.0.1", 0)
    client = EdgeClient(*server.address, max_inflight=max_inflight)
    await client.connect()

    scene = acceptance_scene()
    spec = TrajectorySpec(scenario=Scenario.CIRCLING, speed=1.0, fps=fps)
    trajectory = make_trajectory(spec, scene.target)
    handles: List[asyncio.Future] = []
    ts_begin = time.monotonic()
    logger.info(
        f"Offloading {n_frames} frames at {fps:g} FPS "
        f"({compute_ms:g} ms compute, {max_inflight} in flight)..."
    )
    for frame_id in range(n_frames):
        ts, pose = trajectory[frame_id % len(trajectory)]
        request = SceneViewRequest(scene.name, pose, seed=frame_id)
        try:
            handles.append(await client.submit(frame_id, ts, request.as_bytes()))
        except FrameDroppedError:
            pass
        await asyncio.sleep(1 / fps)
    results = await asyncio.gather(*handles)
    rtt = LatencySummary.from_seconds([r.rtt for r in results])
    logger.info(
        f"Took {time.monotonic() - ts_begin:.2f} seconds. "
        f"RTT mean {rtt.mean_ms:.1f} ms, p95 {rtt.p95_ms:.1f} ms. "
        f"Dropped {client.dropped}, peak in flight {client.peak_inflight}."
    )
    await client.close()
    await server.close()


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--frames", type=int, default=300)
    parser.add_argument("--fps", type=float, default=30.0)
    parser.add_argument("--compute-ms", type=float, default=13.0)
    parser.add_argument("--max-inflight", type=int, default=3)
    args: argparse.Namespace = parser.parse_args()

    asyncio.run(
        benchmark_loopback(
            n_frames=args.frames,
            fps=args.fps,
            compute_ms=args.compute_ms,
            max_inflight=args.max_inflight,
        )
    )
