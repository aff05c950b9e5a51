#!/usr/bin/env python3
# Copyright (c) Meta Platforms, Inc. and affiliates.
# All rights reserved.
#
# This source code is licensed under the BSD-style license found in the
# LICENSE file in the root directory of this source tree.

"""
Edge-offload client and server.

The server hosts a :class:`~edgelift.backend.DetectorBackend` and answers
detect requests concurrently, optionally padding each request's handling time
to emulate a detector's compute cost. The client submits frames without
blocking, keeps at most ``max_inflight`` requests outstanding and resolves a
future per request as responses arrive, in any order.
"""

import asyncio
import logging
import time
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Set, Tuple

import numpy as np

from .backend import DetectorBackend
from .geometry import Box2D
from .simkit import derive_seed, LatencySpec
from .wire import (
    detect_response_payload,
    FramingError,
    MsgType,
    parse_detect_response,
    read_message,
    SceneViewRequest,
    WireError,
    WireMessage,
    write_message,
)

logger: logging.Logger = logging.getLogger(__name__)

_MAX_SERVER_CPU_CONCURRENCY: int = 4


class TransportError(RuntimeError):
    pass


class DetectTimeoutError(TransportError):
    pass


class FrameDroppedError(RuntimeError):
    pass


class RemoteError(RuntimeError):
    pass


class BackpressurePolicy(Enum):
    REJECT_NEWEST = "reject_newest"
    BLOCK = "block"


@dataclass(frozen=True)
class DetectResult:
    frame_id: int
    boxes: List[Box2D]
    rtt: float
    server_time: float


class EdgeServer:
    def __init__(
        self,
        backend: DetectorBackend,
        latency: Optional[LatencySpec] = None,
        seed: int = 0,
        executor: Optional[Executor] = None,
    ) -> None:
        self.backend = backend
        self.latency: LatencySpec = latency or LatencySpec(
            fixed=0.0, jitter=0.0, model_compute=0.0
        )
        self.seed = seed
        self._executor: Executor = executor or ThreadPoolExecutor(
            max_workers=_MAX_SERVER_CPU_CONCURRENCY
        )
        self._backend_lock: Optional[asyncio.Lock] = None
        self._server: Optional[asyncio.AbstractServer] = None
        self._connections: Set[asyncio.Task] = set()
        self.requests_served = 0

    @property
    def address(self) -> Tuple[str, int]:
        if self._server is None or not self._server.sockets:
            raise RuntimeError("The server is not running.")
        host, port = self._server.sockets[0].getsockname()[:2]
        return host, port

    async def start(self, host: str, port: int) -> None:
        self._backend_lock = asyncio.Lock()
        self._server = await asyncio.start_server(self._handle_connection, host, port)
        bound_host, bound_port = self.address
        logger.info(
            f"Serving {type(self.backend).__name__} on {bound_host}:{bound_port} "
            f"(compute pad {self.latency.model_compute * 1000:.1f} ms, "
            f"jitter {self.latency.jitter * 1000:.1f} ms)."
        )

    async def serve_forever(self) -> None:
        if self._server is None:
            raise RuntimeError("The server is not running.")
        await self._server.serve_forever()

    async def close(self) -> None:
        server, self._server = self._server, None
        if server is not None:
            server.close()
        # wait_closed also waits for open connections, so end those first.
        for task in set(self._connections):
            task.cancel()
        if self._connections:
            await asyncio.gather(*self._connections, return_exceptions=True)
        if server is not None:
            await server.wait_closed()
        await self.backend.close()
        logger.info(f"Server stopped after {self.requests_served} requests.")

    def _compute_pad(self, frame_id: int) -> float:
        pad = self.latency.model_compute
        if self.latency.jitter > 0:
            rng = np.random.default_rng(derive_seed(self.seed, frame_id))
            pad += float(rng.uniform(-self.latency.jitter, self.latency.jitter))
        return max(pad, 0.0)

    async def _handle_connection(
        self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter
    ) -> None:
        task = asyncio.current_task()
        if task is not None:
            self._connections.add(task)
        peer = writer.get_extra_info("peername")
        write_lock = asyncio.Lock()
        request_tasks: Set[asyncio.Task] = set()
        try:
            while True:
                try:
                    msg = await read_message(reader)
                except WireError as e:
                    logger.warning(f"Malformed frame from {peer}: {e}")
                    async with write_lock:
                        await write_message(
                            writer,
                            WireMessage(MsgType.ERROR, 0, 0.0, str(e).encode("utf-8")),
                        )
                    break
                if msg is None:
                    break
                if msg.msg_type == MsgType.PING:
                    async with write_lock:
                        await write_message(
                            writer,
                            WireMessage(
                                MsgType.PONG, msg.frame_id, msg.capture_timestamp
                            ),
                        )
                elif msg.msg_type in (
                    MsgType.DETECT_REQUEST,
                    MsgType.RAW_DETECT_REQUEST,
                ):
                    request_task = asyncio.create_task(
                        self._handle_request(msg, writer, write_lock)
                    )
                    request_tasks.add(request_task)
                    request_task.add_done_callback(request_tasks.discard)
                else:
                    logger.warning(f"Unexpected {msg.msg_type.name} from {peer}.")
                    async with write_lock:
                        await write_message(
                            writer,
                            WireMessage(
                                MsgType.ERROR,
                                msg.frame_id,
                                msg.capture_timestamp,
                                f"unexpected {msg.msg_type.name}".encode("utf-8"),
                            ),
                        )
                    break
            if request_tasks:
                await asyncio.gather(*request_tasks, return_exceptions=True)
        except (ConnectionError, asyncio.CancelledError):
            for request_task in request_tasks:
                request_task.cancel()
        finally:
            writer.close()
            if task is not None:
                self._connections.discard(task)

    async def _handle_request(
        self, msg: WireMessage, writer: asyncio.StreamWriter, write_lock: asyncio.Lock
    ) -> None:
        begin_ts = time.monotonic()
        malformed = False
        try:
            boxes = await self._run_backend(msg)
        except Exception as e:
            # A payload that does not decode gets its reply, then the
            # connection is closed. Backend failures only fail the request.
            malformed = isinstance(e, WireError)
            if malformed:
                logger.warning(f"Malformed payload in frame {msg.frame_id}: {e}")
            else:
                logger.debug(f"Backend failed on frame {msg.frame_id}: {e}")
            reply = WireMessage(
                MsgType.ERROR,
                msg.frame_id,
                msg.capture_timestamp,
                f"{type(e).__name__}: {e}".encode("utf-8"),
            )
        else:
            remaining = self._compute_pad(msg.frame_id) - (time.monotonic() - begin_ts)
            if remaining > 0:
                await asyncio.sleep(remaining)
            server_time = time.monotonic() - begin_ts
            reply = WireMessage(
                MsgType.DETECT_RESPONSE,
                msg.frame_id,
                msg.capture_timestamp,
                detect_response_payload(boxes, server_time),
            )
        self.requests_served += 1
        async with write_lock:
            try:
                await write_message(writer, reply)
            except ConnectionError as e:
                logger.debug(f"Dropping reply to frame {msg.frame_id}: {e}")
            if malformed:
                writer.close()

    async def _run_backend(self, msg: WireMessage) -> List[Box2D]:
        if msg.msg_type == MsgType.RAW_DETECT_REQUEST:
            call = self.backend.detect_raw(msg.payload, self._executor)
        else:
            call = self.backend.detect(
                SceneViewRequest.from_bytes(msg.payload), self._executor
            )
        if self.backend.single_flight and self._backend_lock is not None:
            async with self._backend_lock:
                return await call
        return await call


class EdgeClient:
    """
    Asynchronous detect client over one connection.

    Usage::

        client = EdgeClient(host, port)
        await client.connect()
        handle = await client.submit(frame_id, capture_ts, payload)
        result = await handle
    """

    def __init__(
        self,
        host: str,
        port: int,
        max_inflight: int = 3,
        timeout: float = 1.0,
        policy: BackpressurePolicy = BackpressurePolicy.REJECT_NEWEST,
    ) -> None:
        if max_inflight < 1:
            raise ValueError(f"max_inflight must be >= 1 (got {max_inflight}).")
        self.host = host
        self.port = port
        self.max_inflight = max_inflight
        self.timeout = timeout
        self.policy = policy
        self._reader: Optional[asyncio.StreamReader] = None
        self._writer: Optional[asyncio.StreamWriter] = None
        self._reader_task: Optional[asyncio.Task] = None
        self._write_lock: Optional[asyncio.Lock] = None
        self._slot_freed: Optional[asyncio.Condition] = None
        self._pending: Dict[int, Tuple[asyncio.Future, float, asyncio.TimerHandle]] = {}
        self._pings: Dict[int, Tuple[asyncio.Future, float]] = {}
        self._last_frame_id: Optional[int] = None
        self._next_ping_id = 0
        self._closed_error: Optional[Exception] = None
        self.peak_inflight = 0
        self.dropped = 0

    @property
    def inflight(self) -> int:
        return len(self._pending)

    @property
    def connected(self) -> bool:
        return self._writer is not None and self._closed_error is None

    async def connect(self) -> None:
        try:
            self._reader, self._writer = await asyncio.wait_for(
                asyncio.open_connection(self.host, self.port), timeout=self.timeout
            )
        except (OSError, asyncio.TimeoutError) as e:
            raise TransportError(
                f"Cannot reach detector at {self.host}:{self.port}: {e}"
            ) from e
        self._write_lock = asyncio.Lock()
        self._slot_freed = asyncio.Condition()
        self._closed_error = None
        self._reader_task = asyncio.create_task(self._read_loop())

    async def close(self) -> None:
        if self._writer is not None:
            self._writer.close()
        if self._reader_task is not None:
            self._reader_task.cancel()
            await asyncio.gather(self._reader_task, return_exceptions=True)
            self._reader_task = None
        self._fail_all(TransportError("Client closed."))
        self._writer = None

    async def submit(
        self, frame_id: int, capture_timestamp: float, payload: bytes
    ) -> "asyncio.Future[DetectResult]":
        """
        Send a detect request without waiting for its response.

        Raises:
            FrameDroppedError: ``max_inflight`` requests are outstanding and the
                policy is reject-newest, or a newer frame was sent while this
                one waited under the block policy.
            TransportError: The connection is closed.
        """
        self._check_open()
        if self._last_frame_id is not None and frame_id <= self._last_frame_id:
            raise ValueError(
                f"frame_id must increase (got {frame_id} after {self._last_frame_id})."
            )
        if self.inflight >= self.max_inflight:
            if self.policy == BackpressurePolicy.REJECT_NEWEST:
                self.dropped += 1
                logger.debug(f"Dropping frame {frame_id}: {self.inflight} in flight.")
                raise FrameDroppedError(
                    f"Frame {frame_id} rejected with {self.inflight} requests "
                    "in flight."
                )
            assert self._slot_freed is not None
            async with self._slot_freed:
                await self._slot_freed.wait_for(
                    lambda: self.inflight < self.max_inflight or not self.connected
                )
            self._check_open()
            last = self._last_frame_id
            if last is not None and frame_id <= last:
                # A concurrent submitter sent a newer frame during the wait.
                self.dropped += 1
                raise FrameDroppedError(
                    f"Frame {frame_id} superseded by frame {last} "
                    "while waiting for a slot."
                )

        loop = asyncio.get_running_loop()
        future: asyncio.Future = loop.create_future()
        timer = loop.call_later(self.timeout, self._expire, frame_id)
        self._pending[frame_id] = (future, time.monotonic(), timer)
        self._last_frame_id = frame_id
        self.peak_inflight = max(self.peak_inflight, self.inflight)
        try:
            await self._send(
                WireMessage(
                    MsgType.DETECT_REQUEST, frame_id, capture_timestamp, payload
                )
            )
        except Exception:
            self._resolve(frame_id)
            raise
        return future

    async def detect(
        self, frame_id: int, capture_timestamp: float, request: SceneViewRequest
    ) -> DetectResult:
        handle = await self.submit(frame_id, capture_timestamp, request.as_bytes())
        return await handle

    async def ping(self) -> float:
        """
        Round-trip a Ping and return the measured RTT in seconds.
        """
        self._check_open()
        loop = asyncio.get_running_loop()
        ping_id = self._next_ping_id
        self._next_ping_id += 1
        future: asyncio.Future = loop.create_future()
        self._pings[ping_id] = (future, time.monotonic())
        await self._send(WireMessage(MsgType.PING, ping_id, 0.0))
        try:
            return await asyncio.wait_for(future, timeout=self.timeout)
        except asyncio.TimeoutError as e:
            self._pings.pop(ping_id, None)
            raise DetectTimeoutError(f"Ping {ping_id} timed out.") from e

    def _check_open(self) -> None:
        if self._writer is None:
            raise TransportError("Client is not connected.")
        if self._closed_error is not None:
            raise TransportError(f"Connection lost: {self._closed_error}")

    async def _send(self, msg: WireMessage) -> None:
        assert self._writer is not None and self._write_lock is not None
        async with self._write_lock:
            try:
                await write_message(self._writer, msg)
            except (ConnectionError, RuntimeError) as e:
                raise TransportError(f"Send failed: {e}") from e

    def _resolve(self, frame_id: int) -> Optional[Tuple[asyncio.Future, float]]:
        entry = self._pending.pop(frame_id, None)
        if entry is None:
            return None
        future, sent_ts, timer = entry
        timer.cancel()
        self._notify_slot_freed()
        return future, sent_ts

    def _notify_slot_freed(self) -> None:
        cond = self._slot_freed
        if cond is None:
            return

        async def _notify() -> None:
            async with cond:
                cond.notify_all()

        asyncio.ensure_future(_notify())

    def _expire(self, frame_id: int) -> None:
        resolved = self._resolve(frame_id)
        if resolved is None:
            return
        future, _ = resolved
        if not future.done():
            future.set_exception(
                DetectTimeoutError(
                    f"Frame {frame_id} timed out after {self.timeout} s."
                )
            )

    def _fail_all(self, error: Exception) -> None:
        for frame_id in list(self._pending):
            resolved = self._resolve(frame_id)
            if resolved is not None and not resolved[0].done():
                resolved[0].set_exception(error)
        for future, _ in self._pings.values():
            if not future.done():
                future.set_exception(error)
        self._pings.clear()

    async def _read_loop(self) -> None:
        assert self._reader is not None
        error: Exception = TransportError("Connection closed by server.")
        try:
            while True:
                msg = await read_message(self._reader)
                if msg is None:
                    break
                self._dispatch(msg)
        except asyncio.CancelledError:
            raise
        except (WireError, ConnectionError) as e:
            error = TransportError(f"Connection lost: {e}")
        finally:
            self._closed_error = error
            self._fail_all(error)

    def _dispatch(self, msg: WireMessage) -> None:
        if msg.msg_type == MsgType.PONG:
            entry = self._pings.pop(msg.frame_id, None)
            if entry is not None and not entry[0].done():
                entry[0].set_result(time.monotonic() - entry[1])
            return
        resolved = self._resolve(msg.frame_id)
        if resolved is None:
            if msg.msg_type == MsgType.ERROR and msg.frame_id == 0:
                raise FramingError(msg.payload.decode("utf-8", errors="replace"))
            logger.warning(
                f"Late or unknown {msg.msg_type.name} for frame {msg.frame_id}."
            )
            return
        future, sent_ts = resolved
        if future.done():
            return
        if msg.msg_type == MsgType.DETECT_RESPONSE:
            try:
                boxes, server_time = parse_detect_response(msg.payload)
            except FramingError as e:
                future.set_exception(e)
                return
            future.set_result(
                DetectResult(
                    frame_id=msg.frame_id,
                    boxes=boxes,
                    rtt=time.monotonic() - sent_ts,
                    server_time=server_time,
                )
            )
        elif msg.msg_type == MsgType.ERROR:
            message = msg.payload.decode("utf-8", errors="replace")
            future.set_exception(RemoteError(message))
        else:
            future.set_exception(
                FramingError(
                    f"Unexpected {msg.msg_type.name} for frame {msg.frame_id}."
                )
            )
