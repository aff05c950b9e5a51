#!/usr/bin/env python3
# Copyright (c) Meta Platforms, Inc. and affiliates.
# All rights reserved.
#
# This source code is licensed under the BSD-style license found in the
# LICENSE file in the root directory of this source tree.

import asyncio
import logging
from concurrent.futures import Executor
from typing import Dict, List, Optional

from edgelift.backend import DetectorBackend
from edgelift.geometry import Box2D, CameraIntrinsics
from edgelift.simkit import (
    acceptance_scene,
    NoiseSpec,
    oracle_detect2d,
    rgb_intrinsics,
    Scene,
)
from edgelift.wire import SceneViewRequest

logger: logging.Logger = logging.getLogger(__name__)


class UnknownSceneError(KeyError):
    pass


class OracleBackend(DetectorBackend):
    """
    Serves :func:`edgelift.simkit.oracle_detect2d` for registered scenes.
    """

    def __init__(
        self,
        scenes: Optional[Dict[str, Scene]] = None,
        intrinsics: Optional[CameraIntrinsics] = None,
        noise: Optional[NoiseSpec] = None,
    ) -> None:
        self.scenes: Dict[str, Scene] = dict(scenes or {})
        self.intrinsics: CameraIntrinsics = intrinsics or rgb_intrinsics()
        self.noise: NoiseSpec = noise or NoiseSpec()

    @classmethod
    def from_scene_path(cls, path: Optional[str]) -> "OracleBackend":
        scene = acceptance_scene() if path is None else Scene.from_file(path)
        return cls(scenes={scene.name: scene})

    def register_scene(self, scene_id: str, scene: Scene) -> None:
        self.scenes[scene_id] = scene

    def _detect(self, request: SceneViewRequest) -> List[Box2D]:
        if request.scene_id not in self.scenes:
            raise UnknownSceneError(f"Unknown scene {request.scene_id!r}.")
        return oracle_detect2d(
            self.scenes[request.scene_id],
            request.pose,
            self.intrinsics,
            self.noise,
            request.seed,
        )

    async def detect(
        self, request: SceneViewRequest, executor: Optional[Executor] = None
    ) -> List[Box2D]:
        loop = asyncio.get_running_loop()
        return await loop.run_in_executor(executor, self._detect, request)
