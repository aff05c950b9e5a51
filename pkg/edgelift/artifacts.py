#!/usr/bin/env python3
# Copyright (c) Meta Platforms, Inc. and affiliates.
# All rights reserved.
#
# This source code is licensed under the BSD-style license found in the
# LICENSE file in the root directory of this source tree.

import asyncio
import logging
import os
import pathlib
import uuid
from typing import Dict, Optional, Set, Union

import aiofiles
import aiofiles.os

logger: logging.Logger = logging.getLogger(__name__)

Content = Union[str, bytes]


class ArtifactWriter:
    """
    Writes experiment outputs under a root directory. Each file is written to
    a temporary sibling and renamed into place, so readers never observe a
    partial file.
    """

    def __init__(self, root: str) -> None:
        self.root = root
        self._dir_cache: Set[pathlib.Path] = set()

    def path(self, rel_path: str) -> str:
        return os.path.join(self.root, rel_path)

    async def write(self, rel_path: str, content: Content) -> str:
        path = self.path(rel_path)
        dir_path = pathlib.Path(path).parent
        if dir_path not in self._dir_cache:
            dir_path.mkdir(parents=True, exist_ok=True)
            self._dir_cache.add(dir_path)

        tmp_path = f"{path}.tmp-{uuid.uuid4().hex}"
        data = content.encode("utf-8") if isinstance(content, str) else content
        try:
            async with aiofiles.open(tmp_path, "wb") as f:
                await f.write(data)
            await aiofiles.os.replace(tmp_path, path)
        except BaseException:
            if os.path.exists(tmp_path):
                await aiofiles.os.remove(tmp_path)
            raise
        logger.debug(f"Wrote {len(data)} bytes to {path}.")
        return path

    async def write_many(self, files: Dict[str, Content]) -> None:
        await asyncio.gather(*(self.write(p, c) for p, c in files.items()))

    def sync_write(
        self,
        rel_path: str,
        content: Content,
        event_loop: Optional[asyncio.AbstractEventLoop] = None,
    ) -> str:
        if event_loop is None:
            event_loop = asyncio.new_event_loop()
        return event_loop.run_until_complete(self.write(rel_path, content))

    def sync_write_many(
        self,
        files: Dict[str, Content],
        event_loop: Optional[asyncio.AbstractEventLoop] = None,
    ) -> None:
        if event_loop is None:
            event_loop = asyncio.new_event_loop()
        event_loop.run_until_complete(self.write_many(files))


async def read_text(path: str) -> str:
    async with aiofiles.open(path, "r", encoding="utf-8") as f:
        return await f.read()


def sync_read_text(
    path: str, event_loop: Optional[asyncio.AbstractEventLoop] = None
) -> str:
    if event_loop is None:
        event_loop = asyncio.new_event_loop()
    return event_loop.run_until_complete(read_text(path))
