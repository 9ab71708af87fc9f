"""Coordinator/worker messages: the cluster-internal side of the protocol.

Same frame layout as the client protocol (magic, version, type, length),
with message codes from 0x100 up so the two vocabularies can never collide.
Client-facing decoders treat these codes as corruption, which is correct:
internal frames never belong on a client connection.

Two kinds of traffic flow over these frames.  The coordinator's control
connection to each worker carries Register/Setup, per-sweep reports and
verdicts, and gathers.  The relay connections carry EpochStart pushes down
the broadcast tree; a worker forwards the raw frame bytes to its children
before acting on the frame itself, so a deep tree adds only per-hop
forwarding latency, not per-hop processing latency.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np

from ..errors import ProtocolError
from ..protocol import HEADER, MAGIC, VERSION, _pack_str8, _Reader, _Truncated

# verdict actions
CONTINUE = 0
DONE = 1      # epoch over: tolerance reached or sweep budget exhausted
ABORT = 2     # epoch superseded; a newer EpochStart is on its way


@dataclass(frozen=True)
class Register:
    """Worker's first message: which band it was spawned for and where its
    relay listener accepts the parent connection."""

    band_start: int
    band_rows: int
    relay_port: int


@dataclass(frozen=True)
class Setup:
    """Coordinator's reply to Register: the worker's place in the fleet.

    relay_ports is rank-indexed (all on 127.0.0.1), so a worker can reach
    its tree children, and any orphaned grandchildren after a peer dies.
    """

    rank: int
    worker_count: int
    fanout: int
    width: int
    height: int
    relay_ports: Tuple[int, ...]


@dataclass(eq=False)
class EpochStart:
    """One steering epoch: full problem statement, broadcast to everyone.

    Workers derive their own band from (height, worker_count), so the frame
    is identical for all ranks and can be relayed as raw bytes.  warm_field,
    when present, is a full-grid initial guess (row-major f64); otherwise
    workers start from the rasterized scenario.
    """

    epoch: int
    width: int
    height: int
    max_iter: int
    tolerance: float
    scenario_text: str
    warm_field: Optional[np.ndarray] = None

    def __eq__(self, other):
        if not isinstance(other, EpochStart):
            return NotImplemented
        if (self.epoch, self.width, self.height, self.max_iter,
                self.tolerance, self.scenario_text) != \
           (other.epoch, other.width, other.height, other.max_iter,
                other.tolerance, other.scenario_text):
            return False
        if (self.warm_field is None) != (other.warm_field is None):
            return False
        return self.warm_field is None or np.array_equal(
            self.warm_field, other.warm_field)


@dataclass(frozen=True)
class EpochReady:
    """Worker ack for one EpochStart; relays is how many tree children it
    forwarded the frame to (summed at the coordinator for instrumentation)."""

    epoch: int
    relays: int


@dataclass(eq=False)
class SweepReport:
    """End-of-sweep barrier message: local max change plus the band's edge
    rows, which become the neighbours' ghost rows next sweep."""

    epoch: int
    sweep: int
    max_change: float
    top: np.ndarray
    bottom: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, SweepReport):
            return NotImplemented
        return ((self.epoch, self.sweep, self.max_change)
                == (other.epoch, other.sweep, other.max_change)
                and np.array_equal(self.top, other.top)
                and np.array_equal(self.bottom, other.bottom))


@dataclass(eq=False)
class Verdict:
    """Coordinator's answer to a sweep barrier.

    CONTINUE carries the ghost rows for the next sweep (absent at the grid
    edges); DONE and ABORT carry none.  ABORT also answers reports from
    stale epochs, so a worker never blocks on a dead barrier.
    """

    epoch: int
    sweep: int
    action: int
    ghost_top: Optional[np.ndarray] = None
    ghost_bottom: Optional[np.ndarray] = None

    def __eq__(self, other):
        if not isinstance(other, Verdict):
            return NotImplemented

        def same(a, b):
            if (a is None) != (b is None):
                return False
            return a is None or np.array_equal(a, b)

        return ((self.epoch, self.sweep, self.action)
                == (other.epoch, other.sweep, other.action)
                and same(self.ghost_top, other.ghost_top)
                and same(self.ghost_bottom, other.ghost_bottom))


@dataclass(frozen=True)
class Gather:
    """Request for the worker's band, answered with Band at the current
    sweep boundary."""

    epoch: int


@dataclass(eq=False)
class BandData:
    """One worker's rows, tagged with the epoch and sweep they belong to."""

    epoch: int
    sweep: int
    band_start: int
    rows: int
    width: int
    data: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, BandData):
            return NotImplemented
        return ((self.epoch, self.sweep, self.band_start, self.rows,
                 self.width) == (other.epoch, other.sweep, other.band_start,
                                 other.rows, other.width)
                and np.array_equal(self.data, other.data))


@dataclass(frozen=True)
class Halt:
    """Orderly shutdown; the worker exits after receiving it."""


ClusterMessage = Union[Register, Setup, EpochStart, EpochReady, SweepReport,
                       Verdict, Gather, BandData, Halt]

CLUSTER_CODES = {
    Register: 0x100,
    Setup: 0x101,
    EpochStart: 0x102,
    EpochReady: 0x103,
    SweepReport: 0x104,
    Verdict: 0x105,
    Gather: 0x106,
    BandData: 0x107,
    Halt: 0x108,
}
CODE_CLUSTER_TYPES = {code: cls for cls, code in CLUSTER_CODES.items()}


def _pack_rows(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _take_rows(r: _Reader, count: int) -> np.ndarray:
    return np.frombuffer(r.take(count * 8), dtype="<f8").copy()


def _encode_payload(msg: ClusterMessage) -> bytes:
    if isinstance(msg, Register):
        return struct.pack("<IIH", msg.band_start, msg.band_rows,
                           msg.relay_port)
    if isinstance(msg, Setup):
        head = struct.pack("<HHHII", msg.rank, msg.worker_count, msg.fanout,
                           msg.width, msg.height)
        ports = struct.pack("<H", len(msg.relay_ports))
        ports += struct.pack(f"<{len(msg.relay_ports)}H", *msg.relay_ports)
        return head + ports
    if isinstance(msg, EpochStart):
        raw = msg.scenario_text.encode("utf-8")
        warm = msg.warm_field
        head = struct.pack("<QIIQd", msg.epoch, msg.width, msg.height,
                           msg.max_iter, msg.tolerance)
        body = struct.pack("<I", len(raw)) + raw
        body += struct.pack("<B", 0 if warm is None else 1)
        if warm is not None:
            if warm.size != msg.width * msg.height:
                raise ProtocolError("warm field does not match grid size")
            body += _pack_rows(warm)
        return head + body
    if isinstance(msg, EpochReady):
        return struct.pack("<QH", msg.epoch, msg.relays)
    if isinstance(msg, SweepReport):
        if msg.top.size != msg.bottom.size:
            raise ProtocolError("edge rows differ in length")
        return (struct.pack("<QQdI", msg.epoch, msg.sweep, msg.max_change,
                            msg.top.size)
                + _pack_rows(msg.top) + _pack_rows(msg.bottom))
    if isinstance(msg, Verdict):
        if msg.action not in (CONTINUE, DONE, ABORT):
            raise ProtocolError(f"unknown verdict action {msg.action}")
        flags = (1 if msg.ghost_top is not None else 0) \
            | (2 if msg.ghost_bottom is not None else 0)
        width = 0
        for ghost in (msg.ghost_top, msg.ghost_bottom):
            if ghost is not None:
                if width and ghost.size != width:
                    raise ProtocolError("ghost rows differ in length")
                width = ghost.size
        body = struct.pack("<QQBBI", msg.epoch, msg.sweep, msg.action,
                           flags, width)
        if msg.ghost_top is not None:
            body += _pack_rows(msg.ghost_top)
        if msg.ghost_bottom is not None:
            body += _pack_rows(msg.ghost_bottom)
        return body
    if isinstance(msg, Gather):
        return struct.pack("<Q", msg.epoch)
    if isinstance(msg, BandData):
        if msg.data.size != msg.rows * msg.width:
            raise ProtocolError(
                f"band data has {msg.data.size} entries for "
                f"{msg.rows}x{msg.width} rows")
        return (struct.pack("<QQIII", msg.epoch, msg.sweep, msg.band_start,
                            msg.rows, msg.width) + _pack_rows(msg.data))
    if isinstance(msg, Halt):
        return b""
    raise ProtocolError(f"not a cluster message: {type(msg).__name__}")


def _decode_payload(code: int, payload: bytes) -> ClusterMessage:
    r = _Reader(payload)
    cls = CODE_CLUSTER_TYPES.get(code)
    if cls is None:
        raise _Truncated(f"unknown cluster message type {code}")
    if cls is Register:
        msg = Register(*r.unpack("<IIH"))
    elif cls is Setup:
        rank, count, fanout, width, height = r.unpack("<HHHII")
        (n,) = r.unpack("<H")
        ports = r.unpack(f"<{n}H") if n else ()
        msg = Setup(rank, count, fanout, width, height, tuple(ports))
    elif cls is EpochStart:
        epoch, width, height, max_iter, tolerance = r.unpack("<QIIQd")
        (n,) = r.unpack("<I")
        try:
            text = r.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise _Truncated("bad utf-8") from None
        (warm,) = r.unpack("<B")
        field = (_take_rows(r, width * height).reshape(height, width)
                 if warm else None)
        msg = EpochStart(epoch, width, height, max_iter, tolerance, text,
                         field)
    elif cls is EpochReady:
        msg = EpochReady(*r.unpack("<QH"))
    elif cls is SweepReport:
        epoch, sweep, change, width = r.unpack("<QQdI")
        msg = SweepReport(epoch, sweep, change, _take_rows(r, width),
                          _take_rows(r, width))
    elif cls is Verdict:
        epoch, sweep, action, flags, width = r.unpack("<QQBBI")
        if action not in (CONTINUE, DONE, ABORT):
            raise _Truncated(f"unknown verdict action {action}")
        top = _take_rows(r, width) if flags & 1 else None
        bottom = _take_rows(r, width) if flags & 2 else None
        msg = Verdict(epoch, sweep, action, top, bottom)
    elif cls is Gather:
        msg = Gather(*r.unpack("<Q"))
    elif cls is BandData:
        epoch, sweep, start, rows, width = r.unpack("<QQIII")
        msg = BandData(epoch, sweep, start, rows, width,
                       _take_rows(r, rows * width))
    else:
        msg = Halt()
    r.done()
    return msg


def encode(msg: ClusterMessage) -> bytes:
    """Serialize one cluster message to a complete frame."""
    code = CLUSTER_CODES.get(type(msg))
    if code is None:
        raise ProtocolError(f"not a cluster message: {type(msg).__name__}")
    try:
        payload = _encode_payload(msg)
    except struct.error as e:
        raise ProtocolError(f"field out of range: {e}") from None
    return HEADER.pack(MAGIC, VERSION, code, len(payload)) + payload


class FrameReader:
    """Incremental splitter for a cluster byte stream.

    feed() returns (messages, raw_frames): the decoded messages plus the
    exact frame bytes each came from, so a relay can forward frames verbatim
    without re-encoding.  Corruption raises ProtocolError.
    """

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> Tuple[List[ClusterMessage], List[bytes]]:
        self._buf.extend(chunk)
        msgs: List[ClusterMessage] = []
        frames: List[bytes] = []
        while True:
            if len(self._buf) < HEADER.size:
                return msgs, frames
            magic, version, code, payload_len = HEADER.unpack_from(self._buf)
            if magic != MAGIC:
                raise ProtocolError("bad magic")
            if version != VERSION:
                raise ProtocolError(f"unsupported version {version}")
            total = HEADER.size + payload_len
            if len(self._buf) < total:
                return msgs, frames
            frame = bytes(self._buf[:total])
            del self._buf[:total]
            try:
                msgs.append(_decode_payload(code, frame[HEADER.size:]))
            except _Truncated as e:
                raise ProtocolError(str(e) or "malformed payload") from None
            frames.append(frame)


class ClusterStream:
    """One cluster message at a time over a blocking socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._reader = FrameReader()
        self._pending: List[ClusterMessage] = []

    def send(self, msg: ClusterMessage):
        self.sock.sendall(encode(msg))

    def send_raw(self, frame: bytes):
        self.sock.sendall(frame)

    def recv(self, timeout: Optional[float] = None
             ) -> Optional[ClusterMessage]:
        """Next message, or None once the peer has closed.  A timeout
        surfaces as socket.timeout."""
        if self._pending:
            return self._pending.pop(0)
        self.sock.settimeout(timeout)
        while True:
            chunk = self.sock.recv(1 << 20)
            if not chunk:
                return None
            msgs, _ = self._reader.feed(chunk)
            if msgs:
                self._pending.extend(msgs[1:])
                return msgs[0]

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass
