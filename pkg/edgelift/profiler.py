#!/usr/bin/env python3
# Copyright (c) Meta Platforms, Inc. and affiliates.
# All rights reserved.
#
# This source code is licensed under the BSD-style license found in the
# LICENSE file in the root directory of this source tree.

import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import timedelta
from threading import Event, Thread
from typing import ClassVar, Generator, List, Optional, Tuple

import numpy as np
import psutil

from .depthlift import DepthFrame, FilterConfig, lift, LiftError, LiftMethod
from .geometry import Box2D, map_box2d
from .simkit import (
    acceptance_scene,
    depth_intrinsics,
    derive_seed,
    make_trajectory,
    NoiseSpec,
    oracle_detect2d,
    render_depth,
    rgb_intrinsics,
    Scenario,
    Scene,
    TrajectorySpec,
)

logger: logging.Logger = logging.getLogger(__name__)

_DEFAULT_MEASURE_INTERVAL = timedelta(milliseconds=100)
DEFAULT_LIFT_BUDGET_MS: float = 33.0
MAX_BOXES_PER_FRAME: int = 8


def _measure(
    rss_deltas: List[int],
    interval: timedelta,
    baseline_rss_bytes: int,
    stop_event: Event,
) -> None:
    p = psutil.Process()
    while not stop_event.is_set():
        rss_deltas.append(p.memory_info().rss - baseline_rss_bytes)
        time.sleep(interval.total_seconds())


@contextmanager
def measure_rss_deltas(
    rss_deltas: List[int], interval: timedelta = _DEFAULT_MEASURE_INTERVAL
) -> Generator[None, None, None]:
    """
    A context manager that periodically measures RSS (resident set size) delta.

    The baseline RSS is measured when the context manager is initialized.

    Args:
        rss_deltas: Receives the measured RSS deltas in bytes.
        interval: The interval at which RSS deltas are measured.
    """
    baseline_rss_bytes = psutil.Process().memory_info().rss
    stop_event = Event()
    thread = Thread(
        target=_measure, args=(rss_deltas, interval, baseline_rss_bytes, stop_event)
    )
    thread.start()
    try:
        yield
    finally:
        stop_event.set()
        thread.join()


@dataclass(frozen=True)
class LatencySummary:
    mean_ms: float
    p95_ms: float
    max_ms: float
    count: int

    @classmethod
    def from_seconds(cls, samples: List[float]) -> "LatencySummary":
        if not samples:
            return cls(mean_ms=0.0, p95_ms=0.0, max_ms=0.0, count=0)
        arr = np.asarray(samples, dtype=np.float64) * 1000.0
        return cls(
            mean_ms=float(arr.mean()),
            p95_ms=float(np.percentile(arr, 95)),
            max_ms=float(arr.max()),
            count=len(samples),
        )


@dataclass(frozen=True)
class LiftBenchResult:
    per_frame: LatencySummary
    lifts: int
    failures: int
    peak_rss_delta_bytes: int

    def within_budget(self, budget_ms: float) -> bool:
        return self.per_frame.p95_ms <= budget_ms


class _BenchReporter:
    _BENCH_LOG_TEMPLATE: ClassVar[str] = (
        "{frames:>8} {boxes:>8} {mean:>12} {p95:>12} {max:>12} {rss_delta:>16}"
    )

    def __init__(self) -> None:
        self._header: str = self._BENCH_LOG_TEMPLATE.format(
            frames="Frames",
            boxes="Boxes",
            mean="Mean (ms)",
            p95="P95 (ms)",
            max="Max (ms)",
            rss_delta="RSS Delta (MB)",
        )

    def print_header(self) -> None:
        logger.info(self._header)
        logger.info("-" * len(self._header))

    def report(self, result: LiftBenchResult) -> None:
        logger.info(
            self._BENCH_LOG_TEMPLATE.format(
                frames=result.per_frame.count,
                boxes=result.lifts + result.failures,
                mean=f"{result.per_frame.mean_ms:.2f}",
                p95=f"{result.per_frame.p95_ms:.2f}",
                max=f"{result.per_frame.max_ms:.2f}",
                rss_delta=f"{result.peak_rss_delta_bytes / 1024**2:.1f}",
            )
        )

    def report_budget(self, budget_ms: float, passed: bool) -> None:
        verdict = "within" if passed else "OVER"
        msg = f"p95 {verdict} the {budget_ms:.1f} ms budget"
        padding = (len(self._header) - len(msg) - 2) / 2
        logger.info(f"{'-' * math.ceil(padding)} {msg} {'-' * math.floor(padding)}")


def bench_inputs(
    n_frames: int, seed: int, scene: Optional[Scene] = None
) -> List[Tuple[DepthFrame, List[Box2D]]]:
    """
    Render depth frames and oracle boxes along a circling trajectory.
    """
    if n_frames < 1:
        raise ValueError(f"n_frames must be >= 1 (got {n_frames}).")
    scene = scene or acceptance_scene()
    spec = TrajectorySpec(scenario=Scenario.CIRCLING, speed=1.0, radius=1.5)
    trajectory = make_trajectory(spec, scene.target)
    rgb, depth = rgb_intrinsics(), depth_intrinsics()
    noise = NoiseSpec()
    inputs = []
    for k in range(n_frames):
        ts, pose = trajectory[k % len(trajectory)]
        frame = render_depth(
            scene, pose, depth, noise, derive_seed(seed, 3, k), timestamp=ts
        )
        boxes = oracle_detect2d(scene, pose, rgb, noise, derive_seed(seed, 1, k))
        boxes = [map_box2d(b, rgb, depth) for b in boxes[:MAX_BOXES_PER_FRAME]]
        inputs.append((frame, boxes))
    return inputs


def bench_lift(
    n_frames: int,
    seed: int = 42,
    cfg: Optional[FilterConfig] = None,
    method: LiftMethod = LiftMethod.MIN_AREA_RECT,
    warmup: int = 3,
) -> LiftBenchResult:
    """
    Time the lift stage alone: every box of a frame is lifted and the
    per-frame wall time is recorded. Rendering is excluded.
    """
    inputs = bench_inputs(n_frames, seed)
    for frame, boxes in inputs[:warmup]:
        for box in boxes:
            try:
                lift(frame, box, cfg, method)
            except LiftError:
                pass

    samples: List[float] = []
    lifts = failures = 0
    rss_deltas: List[int] = []
    with measure_rss_deltas(rss_deltas=rss_deltas):
        for frame, boxes in inputs:
            begin = time.perf_counter()
            for box in boxes:
                try:
                    lift(frame, box, cfg, method)
                    lifts += 1
                except LiftError:
                    failures += 1
            samples.append(time.perf_counter() - begin)

    result = LiftBenchResult(
        per_frame=LatencySummary.from_seconds(samples),
        lifts=lifts,
        failures=failures,
        peak_rss_delta_bytes=max(rss_deltas, default=0),
    )
    reporter = _BenchReporter()
    reporter.print_header()
    reporter.report(result)
    return result


def report_budget(result: LiftBenchResult, budget_ms: float) -> bool:
    passed = result.within_budget(budget_ms)
    _BenchReporter().report_budget(budget_ms, passed)
    return passed
