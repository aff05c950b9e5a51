#!/usr/bin/env python3
# Copyright (c) Meta Platforms, Inc. and affiliates.
# All rights reserved.
#
# This source code is licensed under the BSD-style license found in the
# LICENSE file in the root directory of this source tree.

import os
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import pytest

from edgelift.artifacts import ArtifactWriter, read_text, sync_read_text
from edgelift.test_utils import async_test


class ArtifactWriterTest(unittest.TestCase):
    @async_test
    async def test_write_many(self) -> None:
        with tempfile.TemporaryDirectory() as path:
            writer = ArtifactWriter(path)
            await writer.write_many(
                {
                    "table.md": "| a |\n",
                    "reports/x/y.csv": "class\n",
                    "raw.bin": b"\x00",
                }
            )
            self.assertEqual(await read_text(writer.path("table.md")), "| a |\n")
            self.assertEqual(await read_text(writer.path("reports/x/y.csv")), "class\n")
            with open(writer.path("raw.bin"), "rb") as f:
                self.assertEqual(f.read(), b"\x00")

    def test_overwrite(self) -> None:
        with tempfile.TemporaryDirectory() as path:
            writer = ArtifactWriter(path)
            writer.sync_write("a.txt", "first")
            written = writer.sync_write("a.txt", "second")
            self.assertEqual(sync_read_text(written), "second")
            self.assertEqual(os.listdir(path), ["a.txt"])

    def test_failed_write_leaves_no_partial_file(self) -> None:
        with tempfile.TemporaryDirectory() as path:
            writer = ArtifactWriter(path)
            with patch("aiofiles.os.replace", side_effect=OSError("disk full")):
                with self.assertRaises(OSError):
                    writer.sync_write("a.txt", "content")
            self.assertEqual(os.listdir(path), [])


@pytest.mark.asyncio
@pytest.mark.parametrize("num_files", [1, 16])
async def test_concurrent_writes(tmp_path: Path, num_files: int) -> None:
    writer = ArtifactWriter(str(tmp_path))
    files = {f"cells/{i}.csv": f"cell,{i}\n" for i in range(num_files)}
    await writer.write_many(files)
    assert len(os.listdir(tmp_path / "cells")) == num_files
    for i in range(num_files):
        assert await read_text(writer.path(f"cells/{i}.csv")) == f"cell,{i}\n"
