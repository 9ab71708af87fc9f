"""Browser transport: WebSocket sessions at /steer plus static assets at /.

The steering protocol stays byte-identical on this carriage: every binary
WebSocket message holds exactly one encoded protocol frame, so the browser
client shares the codec with headless clients.  The gateway wraps each
upgraded connection in an object with the MessageStream send/recv/close
surface and hands it to SteeringServer.run_session; everything above the
transport is oblivious to which carriage a session arrived on.

The static side is a deliberately small file server: GET only, one request
per connection, paths confined to the assets directory.
"""

from __future__ import annotations

import base64
import hashlib
import logging
import mimetypes
import os
import socket
import struct
import threading
import time
from pathlib import Path
from typing import Optional, Tuple

from . import protocol
from .errors import ProtocolError, StartupError

log = logging.getLogger(__name__)

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"
_MAX_HEADER = 16 * 1024
_MAX_MESSAGE = 16 * 1024 * 1024

_OP_CONT = 0x0
_OP_TEXT = 0x1
_OP_BINARY = 0x2
_OP_CLOSE = 0x8
_OP_PING = 0x9
_OP_PONG = 0xA

_PLACEHOLDER = b"""<!doctype html>
<title>steerkit</title>
<h1>steerkit server is running</h1>
<p>The steering endpoint is at <code>/steer</code> (binary WebSocket).
No static assets were configured; start the server with --assets pointing
at a built browser client to serve it from here.</p>
"""


def _accept_key(client_key: str) -> str:
    digest = hashlib.sha1((client_key + _WS_GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


class WebSocketStream:
    """A MessageStream lookalike over one upgraded WebSocket connection.

    recv returns the next steering message, None once the peer has gone,
    and raises socket.timeout when the deadline passes first; partial
    WebSocket frames stay buffered across calls, so a timeout never tears
    a frame.
    """

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._buf = bytearray()
        self._fragments: list = []
        self._decoder = protocol.FrameDecoder()
        self._ready: list = []
        self._closed = False
        self._send_lock = threading.Lock()

    # -- sending ------------------------------------------------------

    def send(self, msg: protocol.Message):
        self._send_raw(_OP_BINARY, protocol.encode(msg))

    def _send_raw(self, opcode: int, payload: bytes):
        length = len(payload)
        head = bytearray([0x80 | opcode])
        if length < 126:
            head.append(length)
        elif length < 1 << 16:
            head.append(126)
            head += struct.pack(">H", length)
        else:
            head.append(127)
            head += struct.pack(">Q", length)
        with self._send_lock:
            self.sock.sendall(bytes(head) + payload)

    # -- receiving ----------------------------------------------------

    def recv(self, timeout: Optional[float] = None) -> Optional[protocol.Message]:
        deadline = None if timeout is None else time.perf_counter() + timeout
        while True:
            if self._ready:
                return self._ready.pop(0)
            if self._closed:
                return None
            frame = self._next_frame(deadline)
            if frame is None:
                self._closed = True
                return None
            fin, opcode, payload = frame
            if opcode == _OP_PING:
                self._send_raw(_OP_PONG, payload)
            elif opcode == _OP_PONG:
                pass
            elif opcode == _OP_CLOSE:
                try:
                    self._send_raw(_OP_CLOSE, payload[:2])
                except OSError:
                    pass
                self._closed = True
                return None
            elif opcode in (_OP_BINARY, _OP_TEXT, _OP_CONT):
                done = self._assemble(fin, opcode, payload)
                if done is not None:
                    self._ready.extend(self._decoder.feed(done))
            else:
                raise ProtocolError(f"unknown websocket opcode {opcode:#x}")

    def _assemble(self, fin: bool, opcode: int,
                  payload: bytes) -> Optional[bytes]:
        """Collect fragments until FIN; returns the whole message or None."""
        first = opcode != _OP_CONT
        if first and self._fragments:
            raise ProtocolError("new message interleaved with fragments")
        if not first and not self._fragments:
            raise ProtocolError("continuation frame without a start")
        if first and opcode == _OP_TEXT:
            raise ProtocolError("text messages are not part of the protocol")
        self._fragments.append(payload)
        if not fin:
            return None
        whole = b"".join(self._fragments)
        self._fragments.clear()
        return whole

    def _next_frame(self, deadline) -> Optional[Tuple[bool, int, bytes]]:
        """Parse one frame off the buffer, reading more bytes as needed.
        None means EOF; socket.timeout means the deadline passed."""
        while True:
            parsed = self._try_parse()
            if parsed is not None:
                return parsed
            if deadline is None:
                self.sock.settimeout(None)
            else:
                remaining = deadline - time.perf_counter()
                if remaining <= 0:
                    raise socket.timeout("websocket recv timed out")
                self.sock.settimeout(remaining)
            chunk = self.sock.recv(65536)
            if not chunk:
                return None
            self._buf += chunk
            if len(self._buf) > _MAX_MESSAGE + 14:
                raise ProtocolError("websocket frame exceeds the size cap")

    def _try_parse(self) -> Optional[Tuple[bool, int, bytes]]:
        buf = self._buf
        if len(buf) < 2:
            return None
        b0, b1 = buf[0], buf[1]
        if b0 & 0x70:
            raise ProtocolError("websocket reserved bits set")
        fin = bool(b0 & 0x80)
        opcode = b0 & 0x0F
        masked = bool(b1 & 0x80)
        if not masked:
            raise ProtocolError("client frames must be masked")
        length = b1 & 0x7F
        offset = 2
        if length == 126:
            if len(buf) < 4:
                return None
            (length,) = struct.unpack_from(">H", buf, 2)
            offset = 4
        elif length == 127:
            if len(buf) < 10:
                return None
            (length,) = struct.unpack_from(">Q", buf, 2)
            offset = 10
        if length > _MAX_MESSAGE:
            raise ProtocolError("websocket frame exceeds the size cap")
        if len(buf) < offset + 4 + length:
            return None
        mask = buf[offset:offset + 4]
        start = offset + 4
        payload = bytearray(buf[start:start + length])
        for i in range(len(payload)):
            payload[i] ^= mask[i & 3]
        del self._buf[:start + length]
        return fin, opcode, bytes(payload)

    def close(self):
        if not self._closed:
            try:
                self._send_raw(_OP_CLOSE, struct.pack(">H", 1001))
            except OSError:
                pass
            self._closed = True
        try:
            self.sock.close()
        except OSError:
            pass


def _read_request(sock: socket.socket):
    """Read one HTTP request head; returns (method, path, headers) with
    lower-cased header names, or None on a bad or oversized request."""
    sock.settimeout(10.0)
    buf = bytearray()
    while b"\r\n\r\n" not in buf:
        if len(buf) > _MAX_HEADER:
            return None
        try:
            chunk = sock.recv(4096)
        except (socket.timeout, OSError):
            return None
        if not chunk:
            return None
        buf += chunk
    head = bytes(buf).split(b"\r\n\r\n", 1)[0].decode("latin-1")
    lines = head.split("\r\n")
    parts = lines[0].split(" ")
    if len(parts) != 3:
        return None
    method, target, _version = parts
    headers = {}
    for line in lines[1:]:
        name, sep, value = line.partition(":")
        if sep:
            headers[name.strip().lower()] = value.strip()
    return method, target, headers


def _http_response(status: str, body: bytes,
                   content_type: str = "text/plain") -> bytes:
    return (f"HTTP/1.1 {status}\r\n"
            f"Content-Type: {content_type}\r\n"
            f"Content-Length: {len(body)}\r\n"
            f"Connection: close\r\n\r\n").encode("latin-1") + body


class WebGateway:
    """HTTP listener that upgrades /steer to steering sessions and serves
    static files everywhere else."""

    def __init__(self, server, address: Tuple[str, int],
                 assets: Optional[Path] = None):
        self.server = server
        self.address = address
        self.assets = Path(assets).resolve() if assets is not None else None
        if self.assets is not None and not self.assets.is_dir():
            raise StartupError(f"assets directory {self.assets} not found")
        self._listener: Optional[socket.socket] = None
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def start(self):
        try:
            self._listener = socket.create_server(self.address, backlog=16)
        except OSError as e:
            raise StartupError(
                f"cannot listen on {self.address[0]}:{self.address[1]}: "
                f"{e}") from e
        self._listener.settimeout(0.5)
        self._thread = threading.Thread(
            target=self._accept_loop, name="web-accept", daemon=True)
        self._thread.start()
        log.info("web transport on %s:%d (assets: %s)",
                 self.address[0], self.port, self.assets or "placeholder")

    @property
    def port(self) -> int:
        if self._listener is None:
            raise StartupError("gateway is not running")
        return self._listener.getsockname()[1]

    def stop(self):
        self._stop.set()
        if self._listener is not None:
            self._listener.close()
        if self._thread is not None:
            self._thread.join(timeout=5.0)

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                sock, _addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            t = threading.Thread(target=self._serve_one, args=(sock,),
                                 name="web-conn", daemon=True)
            t.start()

    def _serve_one(self, sock: socket.socket):
        try:
            request = _read_request(sock)
            if request is None:
                sock.close()
                return
            method, target, headers = request
            path = target.split("?", 1)[0]
            if path == "/steer":
                self._upgrade(sock, method, headers)
            else:
                self._static(sock, method, path)
        except OSError:
            try:
                sock.close()
            except OSError:
                pass

    # -- the steering endpoint ------------------------------------------

    def _upgrade(self, sock: socket.socket, method: str, headers: dict):
        key = headers.get("sec-websocket-key")
        if (method != "GET"
                or "websocket" not in headers.get("upgrade", "").lower()
                or headers.get("sec-websocket-version") != "13"
                or not key):
            sock.sendall(_http_response(
                "400 Bad Request", b"expected a websocket upgrade"))
            sock.close()
            return
        sock.sendall((
            "HTTP/1.1 101 Switching Protocols\r\n"
            "Upgrade: websocket\r\n"
            "Connection: Upgrade\r\n"
            f"Sec-WebSocket-Accept: {_accept_key(key)}\r\n\r\n"
        ).encode("latin-1"))
        stream = WebSocketStream(sock)
        try:
            session = protocol.handshake_server(stream)
        except (ProtocolError, OSError, socket.timeout):
            stream.close()
            return
        try:
            self.server.run_session(session, stream)
        except ProtocolError:
            stream.close()

    # -- static files -----------------------------------------------------

    def _static(self, sock: socket.socket, method: str, path: str):
        if method != "GET":
            sock.sendall(_http_response("405 Method Not Allowed", b""))
            sock.close()
            return
        body, content_type = self._lookup(path)
        if body is None:
            sock.sendall(_http_response("404 Not Found", b"not found"))
        else:
            sock.sendall(_http_response("200 OK", body, content_type))
        sock.close()

    def _lookup(self, path: str):
        if self.assets is None:
            if path in ("/", "/index.html"):
                return _PLACEHOLDER, "text/html"
            return None, None
        relative = path.lstrip("/") or "index.html"
        target = (self.assets / relative).resolve()
        if not str(target).startswith(str(self.assets) + os.sep) \
                and target != self.assets:
            return None, None
        if target.is_dir():
            target = target / "index.html"
        if not target.is_file():
            return None, None
        content_type = mimetypes.guess_type(target.name)[0] \
            or "application/octet-stream"
        return target.read_bytes(), content_type
