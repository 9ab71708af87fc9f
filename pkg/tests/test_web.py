"""Browser carriage: WebSocket framing, the /steer upgrade, static files.

The framing tests drive WebSocketStream over a socketpair with hand-built
frames, which keeps every byte of the carriage under the test's control.
The live tests run a real gateway in front of a one-worker fleet.
"""

import base64
import hashlib
import os
import socket
import struct
import time
import urllib.error
import urllib.request
from dataclasses import replace

import pytest

from steerkit import protocol
from steerkit.config import ServerConfig
from steerkit.errors import ProtocolError, StartupError
from steerkit.hierarchy import LevelSpec
from steerkit.server import serve
from steerkit.steering import VarKind
from steerkit.web import WebGateway, WebSocketStream

WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

OP_CONT, OP_TEXT, OP_BINARY = 0x0, 0x1, 0x2
OP_CLOSE, OP_PING, OP_PONG = 0x8, 0x9, 0xA


def mask_frame(payload, opcode=OP_BINARY, fin=True, rsv=0,
               mask=b"\x1b\x2c\x3d\x4e"):
    """Build one client-to-server frame (client frames carry a mask)."""
    head = bytearray([(0x80 if fin else 0) | (rsv << 4) | opcode])
    n = len(payload)
    if n < 126:
        head.append(0x80 | n)
    elif n < 1 << 16:
        head.append(0x80 | 126)
        head += struct.pack(">H", n)
    else:
        head.append(0x80 | 127)
        head += struct.pack(">Q", n)
    head += mask
    return bytes(head) + bytes(b ^ mask[i & 3] for i, b in enumerate(payload))


def parse_server_frame(buf):
    """Parse one unmasked server-to-client frame from the front of buf.
    Returns ((fin, opcode, payload), consumed) or (None, 0) if short."""
    if len(buf) < 2:
        return None, 0
    fin = bool(buf[0] & 0x80)
    opcode = buf[0] & 0x0F
    assert not (buf[1] & 0x80), "server frames must not be masked"
    length = buf[1] & 0x7F
    offset = 2
    if length == 126:
        if len(buf) < 4:
            return None, 0
        (length,) = struct.unpack_from(">H", buf, 2)
        offset = 4
    elif length == 127:
        if len(buf) < 10:
            return None, 0
        (length,) = struct.unpack_from(">Q", buf, 2)
        offset = 10
    if len(buf) < offset + length:
        return None, 0
    payload = bytes(buf[offset:offset + length])
    return (fin, opcode, payload), offset + length


def pair():
    a, b = socket.socketpair()
    a.settimeout(5.0)
    b.settimeout(5.0)
    return WebSocketStream(a), b


def read_frame(sock, timeout=5.0):
    buf = bytearray()
    deadline = time.perf_counter() + timeout
    while True:
        frame, used = parse_server_frame(buf)
        if frame is not None:
            del buf[:used]
            return frame
        if time.perf_counter() > deadline:
            raise AssertionError("no frame from the server side")
        chunk = sock.recv(65536)
        assert chunk, "peer closed mid-frame"
        buf += chunk


HELLO = protocol.encode(protocol.Hello())


def test_masked_binary_frame_decodes_to_a_message():
    stream, client = pair()
    client.sendall(mask_frame(HELLO))
    msg = stream.recv(timeout=2.0)
    assert isinstance(msg, protocol.Hello)
    stream.close()
    client.close()


def test_unmasked_client_frame_is_refused():
    stream, client = pair()
    raw = bytearray(mask_frame(HELLO))
    raw[1] &= 0x7F  # drop the mask bit, keep the mask key bytes in place
    client.sendall(bytes(raw))
    with pytest.raises(ProtocolError, match="masked"):
        stream.recv(timeout=2.0)
    client.close()


def test_reserved_bits_are_refused():
    stream, client = pair()
    client.sendall(mask_frame(HELLO, rsv=0b100))
    with pytest.raises(ProtocolError, match="reserved"):
        stream.recv(timeout=2.0)
    client.close()


def test_text_messages_are_refused():
    stream, client = pair()
    client.sendall(mask_frame(b"hello", opcode=OP_TEXT))
    with pytest.raises(ProtocolError, match="text"):
        stream.recv(timeout=2.0)
    client.close()


def test_fragmented_message_reassembles():
    stream, client = pair()
    first, second, third = HELLO[:3], HELLO[3:5], HELLO[5:]
    client.sendall(mask_frame(first, opcode=OP_BINARY, fin=False))
    client.sendall(mask_frame(second, opcode=OP_CONT, fin=False))
    client.sendall(mask_frame(third, opcode=OP_CONT, fin=True))
    msg = stream.recv(timeout=2.0)
    assert isinstance(msg, protocol.Hello)
    stream.close()
    client.close()


def test_continuation_without_a_start_is_refused():
    stream, client = pair()
    client.sendall(mask_frame(b"tail", opcode=OP_CONT, fin=True))
    with pytest.raises(ProtocolError, match="continuation"):
        stream.recv(timeout=2.0)
    client.close()


def test_new_message_interleaved_with_fragments_is_refused():
    stream, client = pair()
    client.sendall(mask_frame(HELLO[:3], opcode=OP_BINARY, fin=False))
    client.sendall(mask_frame(HELLO, opcode=OP_BINARY, fin=True))
    with pytest.raises(ProtocolError, match="interleaved"):
        stream.recv(timeout=2.0)
    client.close()


def test_ping_is_answered_with_matching_pong():
    stream, client = pair()
    client.sendall(mask_frame(b"tick", opcode=OP_PING))
    client.sendall(mask_frame(HELLO))
    msg = stream.recv(timeout=2.0)
    assert isinstance(msg, protocol.Hello)
    fin, opcode, payload = read_frame(client)
    assert fin and opcode == OP_PONG and payload == b"tick"
    stream.close()
    client.close()


def test_close_is_echoed_and_reads_as_eof():
    stream, client = pair()
    client.sendall(mask_frame(struct.pack(">H", 1000), opcode=OP_CLOSE))
    assert stream.recv(timeout=2.0) is None
    fin, opcode, payload = read_frame(client)
    assert opcode == OP_CLOSE and payload == struct.pack(">H", 1000)
    assert stream.recv(timeout=2.0) is None  # stays closed
    client.close()


def test_partial_frame_survives_a_timeout():
    stream, client = pair()
    raw = mask_frame(HELLO)
    client.sendall(raw[:4])
    with pytest.raises(socket.timeout):
        stream.recv(timeout=0.05)
    client.sendall(raw[4:])
    msg = stream.recv(timeout=2.0)
    assert isinstance(msg, protocol.Hello)
    stream.close()
    client.close()


def test_oversize_frame_is_refused_from_the_header_alone():
    stream, client = pair()
    head = bytearray([0x80 | OP_BINARY, 0x80 | 127])
    head += struct.pack(">Q", 17 * 1024 * 1024)
    client.sendall(bytes(head))
    with pytest.raises(ProtocolError, match="size cap"):
        stream.recv(timeout=2.0)
    client.close()


def test_server_frames_use_extended_lengths():
    stream, client = pair()
    small = protocol.ResultFrame(3, 0, 7, 0.5, 40, 40, (0.0,) * 1600)
    big = protocol.ResultFrame(4, 0, 9, 0.25, 100, 100, (1.0,) * 10_000)
    stream.send(small)
    fin, opcode, payload = read_frame(client)
    assert fin and opcode == OP_BINARY
    assert len(payload) > 126  # forced the 16-bit length form
    decoder = protocol.FrameDecoder()
    (decoded,) = decoder.feed(payload)
    assert decoded == small
    stream.send(big)
    fin, opcode, payload = read_frame(client)
    (decoded,) = decoder.feed(payload)
    assert decoded == big and len(payload) > 0xFFFF
    stream.close()
    client.close()


# -- the live gateway ----------------------------------------------------

BASE = ServerConfig()


def _config(**kw):
    kw.setdefault("listen", ("127.0.0.1", 0))
    kw.setdefault("tick_ms", 5.0)
    kw.setdefault("max_iter", 200_000)
    kw.setdefault("tolerance", 1e-3)
    return replace(BASE, **kw)


@pytest.fixture(scope="module")
def fleet():
    s = serve(_config(workers=1, levels=LevelSpec(((16, 16),))))
    yield s
    s.stop()
    s.check_failed()


@pytest.fixture(scope="module")
def gateway(fleet):
    g = WebGateway(fleet, ("127.0.0.1", 0))
    g.start()
    yield g
    g.stop()


class WsClient:
    """Client half of the carriage: masks its frames, reads server frames."""

    def __init__(self, sock):
        self.sock = sock
        self._buf = bytearray()
        self._decoder = protocol.FrameDecoder()
        self._ready = []

    def send(self, msg):
        self.sock.sendall(mask_frame(protocol.encode(msg)))

    def recv(self, timeout=None):
        deadline = None if timeout is None else time.perf_counter() + timeout
        while True:
            if self._ready:
                return self._ready.pop(0)
            frame, used = parse_server_frame(self._buf)
            if frame is not None:
                del self._buf[:used]
                fin, opcode, payload = frame
                assert fin, "server message fragmented unexpectedly"
                if opcode == OP_BINARY:
                    self._ready.extend(self._decoder.feed(payload))
                elif opcode == OP_CLOSE:
                    return None
                continue
            if deadline is not None:
                remaining = deadline - time.perf_counter()
                if remaining <= 0:
                    raise socket.timeout("client recv timed out")
                self.sock.settimeout(remaining)
            else:
                self.sock.settimeout(None)
            chunk = self.sock.recv(65536)
            if not chunk:
                return None
            self._buf += chunk

    def close(self):
        try:
            self.sock.sendall(
                mask_frame(struct.pack(">H", 1000), opcode=OP_CLOSE))
        except OSError:
            pass
        self.sock.close()

    def recv_until(self, pred, timeout=30.0, what="message"):
        deadline = time.perf_counter() + timeout
        while True:
            remaining = deadline - time.perf_counter()
            assert remaining > 0, f"timed out waiting for {what}"
            try:
                msg = self.recv(timeout=remaining)
            except socket.timeout:
                continue
            assert msg is not None, f"closed while waiting for {what}"
            if pred(msg):
                return msg


def ws_connect(port, path="/steer"):
    sock = socket.create_connection(("127.0.0.1", port), timeout=10.0)
    key = base64.b64encode(os.urandom(16)).decode("ascii")
    sock.sendall((f"GET {path} HTTP/1.1\r\n"
                  f"Host: 127.0.0.1:{port}\r\n"
                  "Upgrade: websocket\r\n"
                  "Connection: Upgrade\r\n"
                  f"Sec-WebSocket-Key: {key}\r\n"
                  "Sec-WebSocket-Version: 13\r\n\r\n").encode("latin-1"))
    sock.settimeout(10.0)
    head = bytearray()
    while b"\r\n\r\n" not in head:
        chunk = sock.recv(4096)
        assert chunk, "gateway closed during the upgrade"
        head += chunk
    status = bytes(head).split(b"\r\n", 1)[0]
    assert b" 101 " in status, status
    digest = hashlib.sha1((key + WS_GUID).encode("ascii")).digest()
    accept = base64.b64encode(digest)
    assert accept in head, "bad Sec-WebSocket-Accept"
    leftover = bytes(head).split(b"\r\n\r\n", 1)[1]
    client = WsClient(sock)
    client._buf += leftover
    return client


def _fetch(port, path):
    return urllib.request.urlopen(
        f"http://127.0.0.1:{port}{path}", timeout=10.0)


def test_steering_session_over_websocket(gateway):
    client = ws_connect(gateway.port)
    try:
        session = protocol.handshake_client(client, client_kind="ui")
        assert session.client_kind == "ui"
        frame = client.recv_until(
            lambda m: isinstance(m, protocol.ResultFrame), what="a frame")
        assert frame.width == 16 and frame.height == 16
        client.send(protocol.ParamUpdate("tolerance", VarKind.FLOAT, 2e-3))
        stats = client.recv_until(
            lambda m: isinstance(m, protocol.Stats)
            and m.updates_coalesced >= 1, what="restart stats")
        assert stats.epoch > frame.epoch
        client.send(protocol.ParamUpdate("tolerance", VarKind.FLOAT, 1e-3))
        client.recv_until(
            lambda m: isinstance(m, protocol.Stats) and m.epoch > stats.epoch,
            what="restore stats")
        client.send(protocol.Bye())
    finally:
        client.close()


def test_second_websocket_client_is_greeted(gateway):
    first = ws_connect(gateway.port)
    try:
        protocol.handshake_client(first)
        first.recv_until(lambda m: isinstance(m, protocol.ResultFrame),
                         what="a frame")
        second = ws_connect(gateway.port)
        try:
            protocol.handshake_client(second)
            greeting = second.recv_until(
                lambda m: isinstance(m, protocol.ResultFrame), timeout=5.0,
                what="greeting frame")
            assert greeting.width == 16
        finally:
            second.close()
    finally:
        first.close()


def test_steer_without_upgrade_headers_is_a_bad_request(gateway):
    with pytest.raises(urllib.error.HTTPError) as err:
        _fetch(gateway.port, "/steer")
    assert err.value.code == 400


def test_placeholder_page_served_without_assets(gateway):
    with _fetch(gateway.port, "/") as reply:
        body = reply.read()
    assert reply.status == 200
    assert b"/steer" in body
    assert "text/html" in reply.headers["Content-Type"]


def test_unknown_path_is_404_without_assets(gateway):
    with pytest.raises(urllib.error.HTTPError) as err:
        _fetch(gateway.port, "/missing.js")
    assert err.value.code == 404


def test_post_is_refused(gateway):
    request = urllib.request.Request(
        f"http://127.0.0.1:{gateway.port}/", data=b"x", method="POST")
    with pytest.raises(urllib.error.HTTPError) as err:
        urllib.request.urlopen(request, timeout=10.0)
    assert err.value.code == 405


@pytest.fixture()
def asset_gateway(fleet, tmp_path):
    www = tmp_path / "www"
    (www / "sub").mkdir(parents=True)
    (www / "index.html").write_text("<h1>console</h1>")
    (www / "app.js").write_text("export const hue = 42;")
    (www / "sub" / "index.html").write_text("<h1>nested</h1>")
    (tmp_path / "secret.txt").write_text("not served")
    g = WebGateway(fleet, ("127.0.0.1", 0), assets=www)
    g.start()
    yield g
    g.stop()


def test_assets_index_and_files(asset_gateway):
    with _fetch(asset_gateway.port, "/") as reply:
        assert reply.read() == b"<h1>console</h1>"
    with _fetch(asset_gateway.port, "/app.js") as reply:
        assert reply.read() == b"export const hue = 42;"
        assert "javascript" in reply.headers["Content-Type"]
    with _fetch(asset_gateway.port, "/sub/") as reply:
        assert reply.read() == b"<h1>nested</h1>"
    with pytest.raises(urllib.error.HTTPError) as err:
        _fetch(asset_gateway.port, "/nope.css")
    assert err.value.code == 404


def test_path_traversal_is_confined(asset_gateway):
    # urllib normalizes "..", so speak raw HTTP
    sock = socket.create_connection(("127.0.0.1", asset_gateway.port),
                                    timeout=10.0)
    sock.sendall(b"GET /../secret.txt HTTP/1.1\r\nHost: x\r\n\r\n")
    sock.settimeout(10.0)
    reply = bytearray()
    while True:
        chunk = sock.recv(4096)
        if not chunk:
            break
        reply += chunk
    sock.close()
    assert b"404" in bytes(reply).split(b"\r\n", 1)[0]
    assert b"not served" not in reply


def test_missing_assets_directory_is_a_startup_error(fleet, tmp_path):
    with pytest.raises(StartupError, match="assets"):
        WebGateway(fleet, ("127.0.0.1", 0), assets=tmp_path / "absent")


def test_busy_web_port_is_a_startup_error(fleet):
    blocker = socket.create_server(("127.0.0.1", 0))
    port = blocker.getsockname()[1]
    try:
        gateway = WebGateway(fleet, ("127.0.0.1", port))
        with pytest.raises(StartupError, match="listen"):
            gateway.start()
    finally:
        blocker.close()
