#!/usr/bin/env python3
# Copyright (c) Meta Platforms, Inc. and affiliates.
# All rights reserved.
#
# This source code is licensed under the BSD-style license found in the
# LICENSE file in the root directory of this source tree.

import abc
import asyncio
from concurrent.futures import Executor
from typing import List, Optional

from importlib_metadata import entry_points

from .geometry import Box2D
from .wire import SceneViewRequest

BACKEND_ENTRY_POINT_GROUP: str = "edgelift.backends"


class DetectorBackend(abc.ABC):
    """
    A 2D detector hosted by the edge server.

    Backends that cannot be invoked concurrently set ``single_flight`` and the
    server serializes calls into them.
    """

    single_flight: bool = False

    @abc.abstractmethod
    async def detect(
        self, request: SceneViewRequest, executor: Optional[Executor] = None
    ) -> List[Box2D]:
        pass

    async def detect_raw(
        self, payload: bytes, executor: Optional[Executor] = None
    ) -> List[Box2D]:
        raise NotImplementedError(
            f"{type(self).__name__} does not accept raw image payloads."
        )

    async def close(self) -> None:
        pass

    def sync_detect(
        self,
        request: SceneViewRequest,
        event_loop: Optional[asyncio.AbstractEventLoop] = None,
    ) -> List[Box2D]:
        if event_loop is None:
            event_loop = asyncio.new_event_loop()
        return event_loop.run_until_complete(self.detect(request=request))

    def sync_close(
        self, event_loop: Optional[asyncio.AbstractEventLoop] = None
    ) -> None:
        if event_loop is None:
            event_loop = asyncio.new_event_loop()
        event_loop.run_until_complete(self.close())


def url_to_backend(url: str) -> DetectorBackend:
    """
    Initialize a detector backend from a url.

    Args:
        url: ``[name]://[argument]`` or a bare ``[name]``. The built-in
            ``oracle`` backend takes an optional scene file path; without one
            it serves the packaged acceptance scene.

    Returns:
        The initialized backend.
    """
    if "://" in url:
        name, arg = url.split("://", 1)
    else:
        name, arg = url, ""

    # Built-in backends
    if name == "oracle":
        from .backends.oracle import OracleBackend

        return OracleBackend.from_scene_path(arg or None)

    # Registered backends
    eps = entry_points(group=BACKEND_ENTRY_POINT_GROUP)
    registered = {ep.name: ep for ep in eps}
    if name in registered:
        entry = registered[name]
        factory = entry.load()
        backend = factory(arg)
        if not isinstance(backend, DetectorBackend):
            raise RuntimeError(
                f"The factory function for {name} ({entry.value}) "
                "did not return a DetectorBackend object."
            )
        return backend
    raise RuntimeError(f"Unsupported detector backend: {name}.")
