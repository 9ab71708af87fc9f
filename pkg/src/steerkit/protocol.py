"""Binary wire protocol between steering clients and the simulation server.

Frame layout (all integers little-endian):

    magic   4 bytes  "STER"
    version u16      1
    msg_type u16
    payload_len u32
    payload  payload_len bytes

Strings are u8-length-prefixed UTF-8 (255 bytes max).  Result fields travel
as raw f64 arrays: a full 75x75 frame is under 46 kB, so streaming one frame
per sweep at interactive rates stays well below 0.5 MB/s.

The same frames travel over raw TCP and inside the web transport's binary
messages; encode/decode are pure functions of bytes, carriage-agnostic.
"""

from __future__ import annotations

import struct
import uuid
from dataclasses import dataclass, field as dc_field
from typing import Optional, Tuple, Union

import numpy as np

from .errors import ProtocolError
from .steering import VarKind

MAGIC = b"STER"
VERSION = 1
HEADER = struct.Struct("<4sHHI")
assert HEADER.size == 12

MAX_NAME = 255
MAX_FIELD_ENTRIES = 2**31

CLIENT_KINDS = ("ui", "headless")
GEOMETRY_OPS = ("add", "move", "delete")
GEOMETRY_ENTITIES = ("heat_source", "boundary_point")


@dataclass(frozen=True)
class Hello:
    protocol_version: int = VERSION
    client_kind: str = "headless"


@dataclass(frozen=True)
class ParamUpdate:
    name: str
    kind: VarKind
    value: object


@dataclass(frozen=True)
class GeometryUpdate:
    op: str                  # add | move | delete
    entity: str              # heat_source | boundary_point
    entity_id: int
    x: float = 0.0
    y: float = 0.0
    temperature: Optional[float] = None


@dataclass(eq=False)
class ResultFrame:
    epoch: int
    level_index: int
    iteration: int
    residual: float
    width: int
    height: int
    field: np.ndarray

    def __post_init__(self):
        self.field = np.asarray(self.field, dtype=np.float64).ravel()

    def __eq__(self, other):
        if not isinstance(other, ResultFrame):
            return NotImplemented
        return (self.epoch, self.level_index, self.iteration, self.residual,
                self.width, self.height) == \
               (other.epoch, other.level_index, other.iteration,
                other.residual, other.width, other.height) \
            and np.array_equal(self.field, other.field)

    def grid2d(self) -> np.ndarray:
        return self.field.reshape(self.height, self.width)


@dataclass(frozen=True)
class LevelSwitch:
    from_index: int
    to_index: int
    reason: str


@dataclass(frozen=True)
class Stats:
    epoch: int
    overhead_pct: float
    restart_latency_us: int
    updates_coalesced: int


@dataclass(frozen=True)
class Ack:
    ref_msg: int  # msg_type code of the message being acknowledged


@dataclass(frozen=True)
class Bye:
    pass


Message = Union[Hello, ParamUpdate, GeometryUpdate, ResultFrame,
                LevelSwitch, Stats, Ack, Bye]

MSG_CODES = {
    Hello: 1,
    ParamUpdate: 2,
    GeometryUpdate: 3,
    ResultFrame: 4,
    LevelSwitch: 5,
    Stats: 6,
    Ack: 7,
    Bye: 8,
}
CODE_TYPES = {code: cls for cls, code in MSG_CODES.items()}


class _NeedMore:
    """Sentinel: the buffer does not yet hold a complete frame."""

    def __repr__(self):
        return "NEED_MORE"


NEED_MORE = _NeedMore()


@dataclass(frozen=True)
class Corrupt:
    """The stream is unrecoverable; the session must be torn down."""

    reason: str


# -- payload packing ----------------------------------------------------

def _pack_str8(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > MAX_NAME:
        raise ProtocolError(f"string exceeds {MAX_NAME} bytes")
    return struct.pack("<B", len(raw)) + raw


class _Reader:
    """Cursor over a payload; any overrun or leftover means corruption."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise _Truncated()
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def str8(self) -> str:
        (n,) = self.unpack("<B")
        raw = self.take(n)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise _Truncated("bad utf-8") from None

    def done(self):
        if self.pos != len(self.data):
            raise _Truncated("trailing bytes in payload")


class _Truncated(Exception):
    pass


def _encode_value(kind: VarKind, value) -> bytes:
    if kind == VarKind.INT:
        return struct.pack("<q", value)
    if kind == VarKind.FLOAT:
        return struct.pack("<d", value)
    if kind == VarKind.BOOL:
        return struct.pack("<B", 1 if value else 0)
    if kind == VarKind.POINT2D:
        x, y = value
        return struct.pack("<dd", x, y)
    if kind == VarKind.BLOB:
        raw = value if isinstance(value, (bytes, bytearray)) else bytes(value)
        if len(raw) > 0xFFFFFFFF:
            raise ProtocolError("blob too large")
        return struct.pack("<I", len(raw)) + raw
    raise ProtocolError(f"unknown kind code {kind}")


def _decode_value(kind: VarKind, r: _Reader):
    if kind == VarKind.INT:
        return r.unpack("<q")[0]
    if kind == VarKind.FLOAT:
        return r.unpack("<d")[0]
    if kind == VarKind.BOOL:
        return r.unpack("<B")[0] != 0
    if kind == VarKind.POINT2D:
        return tuple(r.unpack("<dd"))
    if kind == VarKind.BLOB:
        (n,) = r.unpack("<I")
        return r.take(n)
    raise _Truncated(f"unknown kind code {kind}")


def _encode_payload(msg: Message) -> bytes:
    if isinstance(msg, Hello):
        if msg.client_kind not in CLIENT_KINDS:
            raise ProtocolError(f"unknown client kind {msg.client_kind!r}")
        return struct.pack("<HB", msg.protocol_version,
                           CLIENT_KINDS.index(msg.client_kind))
    if isinstance(msg, ParamUpdate):
        kind = VarKind(msg.kind)
        return (_pack_str8(msg.name) + struct.pack("<B", int(kind))
                + _encode_value(kind, msg.value))
    if isinstance(msg, GeometryUpdate):
        if msg.op not in GEOMETRY_OPS:
            raise ProtocolError(f"unknown geometry op {msg.op!r}")
        if msg.entity not in GEOMETRY_ENTITIES:
            raise ProtocolError(f"unknown entity class {msg.entity!r}")
        has_t = msg.temperature is not None
        head = struct.pack(
            "<BBIddB", GEOMETRY_OPS.index(msg.op),
            GEOMETRY_ENTITIES.index(msg.entity), msg.entity_id,
            msg.x, msg.y, 1 if has_t else 0)
        return head + (struct.pack("<d", msg.temperature) if has_t else b"")
    if isinstance(msg, ResultFrame):
        if msg.field.size > MAX_FIELD_ENTRIES:
            raise ProtocolError("field too large")
        if msg.field.size != msg.width * msg.height:
            raise ProtocolError(
                f"field has {msg.field.size} entries for a "
                f"{msg.width}x{msg.height} frame")
        head = struct.pack("<QHQdII", msg.epoch, msg.level_index,
                           msg.iteration, msg.residual, msg.width,
                           msg.height)
        return head + msg.field.astype("<f8", copy=False).tobytes()
    if isinstance(msg, LevelSwitch):
        return (struct.pack("<HH", msg.from_index, msg.to_index)
                + _pack_str8(msg.reason))
    if isinstance(msg, Stats):
        return struct.pack("<QdQI", msg.epoch, msg.overhead_pct,
                           msg.restart_latency_us, msg.updates_coalesced)
    if isinstance(msg, Ack):
        return struct.pack("<I", msg.ref_msg)
    if isinstance(msg, Bye):
        return b""
    raise ProtocolError(f"not a protocol message: {type(msg).__name__}")


def _decode_payload(code: int, payload: bytes) -> Message:
    r = _Reader(payload)
    cls = CODE_TYPES.get(code)
    if cls is None:
        raise _Truncated(f"unknown message type {code}")
    if cls is Hello:
        version, kind_code = r.unpack("<HB")
        if kind_code >= len(CLIENT_KINDS):
            raise _Truncated(f"unknown client kind code {kind_code}")
        msg = Hello(version, CLIENT_KINDS[kind_code])
    elif cls is ParamUpdate:
        name = r.str8()
        (kind_code,) = r.unpack("<B")
        try:
            kind = VarKind(kind_code)
        except ValueError:
            raise _Truncated(f"unknown kind code {kind_code}") from None
        msg = ParamUpdate(name, kind, _decode_value(kind, r))
    elif cls is GeometryUpdate:
        op, entity, entity_id, x, y, has_t = r.unpack("<BBIddB")
        if op >= len(GEOMETRY_OPS) or entity >= len(GEOMETRY_ENTITIES):
            raise _Truncated("bad geometry codes")
        t = r.unpack("<d")[0] if has_t else None
        msg = GeometryUpdate(GEOMETRY_OPS[op], GEOMETRY_ENTITIES[entity],
                             entity_id, x, y, t)
    elif cls is ResultFrame:
        epoch, level, iteration, residual, width, height = \
            r.unpack("<QHQdII")
        count = width * height
        raw = r.take(count * 8)
        field = np.frombuffer(raw, dtype="<f8").copy()
        msg = ResultFrame(epoch, level, iteration, residual, width, height,
                          field)
    elif cls is LevelSwitch:
        from_index, to_index = r.unpack("<HH")
        msg = LevelSwitch(from_index, to_index, r.str8())
    elif cls is Stats:
        epoch, overhead, latency, coalesced = r.unpack("<QdQI")
        msg = Stats(epoch, overhead, latency, coalesced)
    elif cls is Ack:
        msg = Ack(r.unpack("<I")[0])
    else:
        msg = Bye()
    r.done()
    return msg


# -- framing --------------------------------------------------------------

def encode(msg: Message) -> bytes:
    """Serialize one message to a complete frame."""
    code = MSG_CODES.get(type(msg))
    if code is None:
        raise ProtocolError(f"not a protocol message: {type(msg).__name__}")
    try:
        payload = _encode_payload(msg)
    except struct.error as e:
        raise ProtocolError(f"field out of range: {e}") from None
    if len(payload) > 0xFFFFFFFF:
        raise ProtocolError("payload exceeds the u32 length field")
    return HEADER.pack(MAGIC, VERSION, code, len(payload)) + payload


def decode(data: bytes) -> Tuple[Union[Message, _NeedMore, Corrupt], int]:
    """Try to decode one frame from the head of `data`.

    Returns (message, bytes_consumed), (NEED_MORE, 0) when the buffer is
    incomplete, or (Corrupt, 0) when the stream can only be torn down.
    Never raises on malformed input.
    """
    if len(data) < HEADER.size:
        return NEED_MORE, 0
    magic, version, code, payload_len = HEADER.unpack_from(data)
    if magic != MAGIC:
        return Corrupt("bad magic"), 0
    if version != VERSION:
        return Corrupt(f"unsupported version {version}"), 0
    total = HEADER.size + payload_len
    if len(data) < total:
        return NEED_MORE, 0
    try:
        msg = _decode_payload(code, bytes(data[HEADER.size:total]))
    except _Truncated as e:
        return Corrupt(str(e) or "malformed payload"), 0
    return msg, total


class FrameDecoder:
    """Incremental frame splitter for a byte stream.

    Feed arbitrary chunks; complete messages come out in order.  Corruption
    raises ProtocolError: framing has no resynchronization point, so the
    session has to be torn down.
    """

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list:
        self._buf.extend(chunk)
        out = []
        while True:
            result, consumed = decode(self._buf)
            if result is NEED_MORE:
                return out
            if isinstance(result, Corrupt):
                raise ProtocolError(result.reason)
            del self._buf[:consumed]
            out.append(result)

    @property
    def pending(self) -> int:
        return len(self._buf)


# -- blocking-socket session helpers ---------------------------------------

@dataclass
class Session:
    session_id: str
    negotiated_version: int
    client_kind: str
    last_seen: float = 0.0


class MessageStream:
    """One message at a time over a blocking socket."""

    def __init__(self, sock):
        self.sock = sock
        self._decoder = FrameDecoder()
        self._pending: list = []

    def send(self, msg: Message):
        self.sock.sendall(encode(msg))

    def recv(self, timeout: Optional[float] = None) -> Optional[Message]:
        """Next message, or None once the peer has closed.  A timeout
        surfaces as socket.timeout."""
        if self._pending:
            return self._pending.pop(0)
        self.sock.settimeout(timeout)
        while True:
            chunk = self.sock.recv(65536)
            if not chunk:
                return None
            msgs = self._decoder.feed(chunk)
            if msgs:
                self._pending.extend(msgs[1:])
                return msgs[0]

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


def handshake_server(stream: MessageStream,
                     min_version: int = VERSION) -> Session:
    """Server side of session setup: expect Hello first, answer Ack or Bye."""
    first = stream.recv(timeout=10.0)
    if not isinstance(first, Hello):
        stream.send(Bye())
        raise ProtocolError("first message was not a Hello")
    if first.protocol_version < min_version:
        stream.send(Bye())
        raise ProtocolError(
            f"client version {first.protocol_version} below minimum "
            f"{min_version}")
    stream.send(Ack(MSG_CODES[Hello]))
    return Session(uuid.uuid4().hex[:12], VERSION, first.client_kind)


def handshake_client(stream: MessageStream, client_kind: str = "headless",
                     version: int = VERSION) -> Session:
    """Client side of session setup."""
    stream.send(Hello(version, client_kind))
    reply = stream.recv(timeout=10.0)
    if isinstance(reply, Bye):
        raise ProtocolError("server refused the protocol version")
    if not isinstance(reply, Ack):
        raise ProtocolError(f"expected Ack, got {type(reply).__name__}")
    return Session(uuid.uuid4().hex[:12], VERSION, client_kind)
