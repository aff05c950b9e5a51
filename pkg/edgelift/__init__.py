#!/usr/bin/env python3
# Copyright (c) Meta Platforms, Inc. and affiliates.
# All rights reserved.
#
# This source code is licensed under the BSD-style license found in the
# LICENSE file in the root directory of this source tree.

"Edge-assisted 2D detection lifted to world-anchored 3D boxes with on-device depth"

from .depthlift import DepthFrame, FilterConfig, lift, LiftMethod
from .fusion import ObjectRegistry
from .geometry import Box2D, Box3D, CameraIntrinsics, Detection3D, iou3d, Pose
from .metrics import match_and_score, MetricsConfig, MetricsReport
from .pipeline import evaluate_run, PipelineConfig, run, run_scenario, Variant
from .simkit import Scene, TrajectorySpec
from .version import __version__


__all__ = [
    "__version__",
    "Box2D",
    "Box3D",
    "CameraIntrinsics",
    "DepthFrame",
    "Detection3D",
    "evaluate_run",
    "FilterConfig",
    "iou3d",
    "lift",
    "LiftMethod",
    "match_and_score",
    "MetricsConfig",
    "MetricsReport",
    "ObjectRegistry",
    "PipelineConfig",
    "Pose",
    "run",
    "run_scenario",
    "Scene",
    "TrajectorySpec",
    "Variant",
]
