"""Length-prefixed JSON request/response frames, over TCP or in-process.

A frame is a 4-byte big-endian length followed by a UTF-8 JSON object.
Requests are ``{"op": ..., "body": {...}}``; responses are either
``{"ok": true, "body": {...}}`` or
``{"ok": false, "error": {"code": ..., "message": ...}}``.

Services implement ``dispatch(op, body, peer) -> dict`` and raise
:class:`ServiceError` for typed failures.  The same service object can be
bound to a :class:`LocalNetwork` (simulation) or served by
:class:`ServiceServer` (live TCP).
"""

from __future__ import annotations

import asyncio
import json
import logging
import socket
import struct
import threading
from typing import Any, Callable, Protocol

from .identity import Rloc

log = logging.getLogger(__name__)

MAX_FRAME_BYTES = 64 * 1024 * 1024
_HEADER = struct.Struct(">I")


class ServiceError(Exception):
    """Typed failure returned by a service (carried across the wire)."""

    def __init__(self, code: str, message: str = "") -> None:
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.message = message


class TransportError(ConnectionError):
    pass


class BindError(OSError):
    def __init__(self, service: str, rloc: Rloc, cause: Exception) -> None:
        super().__init__(f"{service}: cannot bind {rloc}: {cause}")
        self.service = service
        self.rloc = rloc


class Service(Protocol):
    def dispatch(self, op: str, body: dict, peer: Rloc | None) -> dict: ...


def encode_frame(obj: Any) -> bytes:
    data = json.dumps(obj, separators=(",", ":")).encode("utf-8")
    if len(data) > MAX_FRAME_BYTES:
        raise ValueError("frame too large")
    return _HEADER.pack(len(data)) + data


def decode_payload(data: bytes) -> Any:
    return json.loads(data.decode("utf-8"))


def _respond(service: Service, request: Any, peer: Rloc | None) -> dict:
    if not isinstance(request, dict) or not isinstance(request.get("op"), str):
        return {"ok": False, "error": {"code": "bad-request", "message": "missing op"}}
    op = request["op"]
    if op == "PING":
        return {"ok": True, "body": {"pong": True}}
    try:
        body = service.dispatch(op, request.get("body") or {}, peer)
    except ServiceError as exc:
        return {"ok": False, "error": {"code": exc.code, "message": exc.message}}
    except (KeyError, ValueError, TypeError) as exc:
        return {"ok": False, "error": {"code": "bad-request", "message": str(exc)}}
    return {"ok": True, "body": body}


def _unwrap(response: Any) -> dict:
    if not isinstance(response, dict):
        raise TransportError("malformed response")
    if response.get("ok"):
        return response.get("body") or {}
    err = response.get("error") or {}
    raise ServiceError(err.get("code", "error"), err.get("message", ""))


# --------------------------------------------------------------------------
# In-process network


Tap = Callable[[Rloc, str, dict], None]


class LocalNetwork:
    """Routes requests to bound services, round-tripping every frame through JSON."""

    def __init__(self) -> None:
        self._services: dict[Rloc, Service] = {}
        self.taps: list[Tap] = []
        self._fail_next: dict[Rloc, int] = {}

    def bind(self, rloc: Rloc, service: Service) -> None:
        if rloc in self._services:
            raise BindError(type(service).__name__, rloc, OSError("address in use"))
        self._services[rloc] = service

    def unbind(self, rloc: Rloc) -> None:
        self._services.pop(rloc, None)

    def fail_next(self, rloc: Rloc, count: int = 1) -> None:
        """Make the next ``count`` requests to ``rloc`` fail in transit."""
        self._fail_next[rloc] = self._fail_next.get(rloc, 0) + count

    def request(self, rloc: Rloc, op: str, body: dict, sender: Rloc | None = None) -> dict:
        frame = encode_frame({"op": op, "body": body})
        wire_body = decode_payload(frame[_HEADER.size :])["body"]
        for tap in self.taps:
            tap(rloc, op, wire_body)
        if self._fail_next.get(rloc):
            self._fail_next[rloc] -= 1
            raise TransportError(f"injected failure towards {rloc}")
        service = self._services.get(rloc)
        if service is None:
            raise TransportError(f"no route to {rloc}")
        response = _respond(service, {"op": op, "body": wire_body}, sender)
        return _unwrap(decode_payload(encode_frame(response)[_HEADER.size :]))


# --------------------------------------------------------------------------
# TCP


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(n)
        if not chunk:
            raise TransportError("connection closed")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame_sync(sock: socket.socket) -> Any:
    (n,) = _HEADER.unpack(_recv_exact(sock, _HEADER.size))
    if n > MAX_FRAME_BYTES:
        raise TransportError("frame too large")
    return decode_payload(_recv_exact(sock, n))


async def read_frame(reader: asyncio.StreamReader) -> Any:
    header = await reader.readexactly(_HEADER.size)
    (n,) = _HEADER.unpack(header)
    if n > MAX_FRAME_BYTES:
        raise TransportError("frame too large")
    return decode_payload(await reader.readexactly(n))


class TcpTransport:
    """Blocking client keeping one connection per destination."""

    def __init__(self, timeout: float = 10.0) -> None:
        self.timeout = timeout
        self._socks: dict[Rloc, socket.socket] = {}
        self._lock = threading.Lock()

    def _connect(self, rloc: Rloc) -> socket.socket:
        sock = self._socks.get(rloc)
        if sock is None:
            try:
                sock = socket.create_connection((rloc.host, rloc.port), timeout=self.timeout)
            except OSError as exc:
                raise TransportError(f"cannot reach {rloc}: {exc}") from exc
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._socks[rloc] = sock
        return sock

    def request(self, rloc: Rloc, op: str, body: dict, sender: Rloc | None = None) -> dict:
        frame = encode_frame({"op": op, "body": body})
        with self._lock:
            sock = self._connect(rloc)
            try:
                sock.sendall(frame)
                response = read_frame_sync(sock)
            except (OSError, TransportError) as exc:
                self._socks.pop(rloc, None)
                sock.close()
                raise TransportError(f"{op} to {rloc} failed: {exc}") from exc
        return _unwrap(response)

    def close(self) -> None:
        with self._lock:
            for sock in self._socks.values():
                sock.close()
            self._socks.clear()


class ServiceServer:
    """Serves one service on a TCP port from a dedicated event-loop thread."""

    def __init__(self, name: str, service: Service, rloc: Rloc) -> None:
        self.name = name
        self.service = service
        self.rloc = rloc
        self._loop: asyncio.AbstractEventLoop | None = None
        self._server: asyncio.base_events.Server | None = None
        self._thread: threading.Thread | None = None
        self._stopped = False

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        peername = writer.get_extra_info("peername")
        peer = None
        if isinstance(peername, tuple):
            try:
                peer = Rloc(peername[0], peername[1])
            except ValueError:
                peer = None
        try:
            while True:
                try:
                    request = await read_frame(reader)
                except (asyncio.IncompleteReadError, ConnectionError, TransportError):
                    break
                except json.JSONDecodeError:
                    writer.write(encode_frame({"ok": False, "error": {"code": "bad-request", "message": "invalid json"}}))
                    break
                writer.write(encode_frame(_respond(self.service, request, peer)))
                await writer.drain()
        finally:
            writer.close()

    def start(self) -> "ServiceServer":
        ready = threading.Event()
        failure: list[Exception] = []

        def run() -> None:
            loop = asyncio.new_event_loop()
            asyncio.set_event_loop(loop)
            self._loop = loop
            try:
                self._server = loop.run_until_complete(
                    asyncio.start_server(self._handle, self.rloc.host, self.rloc.port)
                )
            except OSError as exc:
                failure.append(exc)
                ready.set()
                loop.close()
                return
            ready.set()
            try:
                loop.run_forever()
            finally:
                self._server.close()
                # Open connections still have handler tasks; finish them before the loop goes away.
                pending = asyncio.all_tasks(loop)
                for task in pending:
                    task.cancel()
                loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
                loop.run_until_complete(self._server.wait_closed())
                loop.close()

        self._thread = threading.Thread(target=run, name=f"{self.name}-server", daemon=True)
        self._thread.start()
        ready.wait()
        if failure:
            raise BindError(self.name, self.rloc, failure[0])
        return self

    @property
    def bound_port(self) -> int:
        assert self._server is not None
        return self._server.sockets[0].getsockname()[1]

    def stop(self) -> None:
        if self._stopped or self._loop is None:
            self._stopped = True
            return
        self._stopped = True
        if self._loop.is_running():
            self._loop.call_soon_threadsafe(self._loop.stop)
        if self._thread is not None:
            self._thread.join(timeout=5)


def ping(rloc: Rloc, timeout: float = 1.0) -> bool:
    try:
        with socket.create_connection((rloc.host, rloc.port), timeout=timeout) as sock:
            sock.sendall(encode_frame({"op": "PING", "body": {}}))
            return bool(read_frame_sync(sock).get("ok"))
    except (OSError, TransportError, ValueError):
        return False
