#!/usr/bin/env python3
# Copyright (c) Meta Platforms, Inc. and affiliates.
# All rights reserved.
#
# This source code is licensed under the BSD-style license found in the
# LICENSE file in the root directory of this source tree.

import argparse
import logging

from edgelift.depthlift import LiftMethod
from edgelift.profiler import bench_lift, DEFAULT_LIFT_BUDGET_MS, report_budget

logging.basicConfig(level=logging.INFO)
logger: logging.Logger = logging.getLogger(__name__)


def benchmark_methods(n_frames: int, seed: int, budget_ms: float) -> None:
    for method in LiftMethod:
        logger.info(f"Lifting {n_frames} frames with {method.value}...")
        result = bench_lift(n_frames=n_frames, seed=seed, method=method)
        report_budget(result, budget_ms)
        logger.info(
            f"{result.lifts} lifts, {result.failures} failures. "
            f"Peak RSS delta: {result.peak_rss_delta_bytes // 1024**2}MB"
        )


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--frames", type=int, default=300)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--budget-ms", type=float, default=DEFAULT_LIFT_BUDGET_MS)
    args: argparse.Namespace = parser.parse_args()

    benchmark_methods(n_frames=args.frames, seed=args.seed, budget_ms=args.budget_ms)
