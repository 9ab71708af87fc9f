"""Scripted headless client: timed actions against a running server, with a
transcript of everything that came back.

Script grammar, one action per line, times relative to script start and
non-decreasing:

    at <t_ms> param <name> <value>
    at <t_ms> add_source <x> <y> <temperature>
    at <t_ms> move_source <id> <x> <y>
    at <t_ms> delete_source <id>
    at <t_ms> add_boundary <x> <y> <temperature>
    at <t_ms> expect_level <index>
    at <t_ms> await_converged <timeout_ms>

Blank lines and # comments are skipped.  Entities created by a script get
ids counted up from 1000 so they stay clear of scenario-file ids.

expect_level and await_converged are assertions, not sends.  expect_level
waits up to a fixed grace window for the server to reach the level (level
transitions are driven by a polling governor, so their timing jitters even
though their sequence is deterministic).  await_converged watches the frame
stream go quiet: while a solve is iterating the server guarantees at least
one frame per second, so a gap well past that with a result in hand means
the fleet has finished.
"""

from __future__ import annotations

import socket
import threading
import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from . import protocol
from .errors import ProtocolError, ScriptFailure, StartupError
from .steering import VarKind

SCRIPT_ENTITY_BASE = 1000
EXPECT_LEVEL_WINDOW_MS = 2000.0
QUIET_GAP_S = 1.1  # longest silence an iterating solve can produce, plus slack

_PARAM_KINDS = {
    "max_iter": (VarKind.INT, int),
    "tolerance": (VarKind.FLOAT, float),
}


@dataclass(frozen=True)
class Action:
    at_ms: float
    verb: str
    args: tuple
    line_no: int
    text: str


@dataclass(frozen=True)
class Script:
    actions: Tuple[Action, ...]

    @staticmethod
    def parse(text: str) -> "Script":
        actions: List[Action] = []
        last_t = 0.0
        for line_no, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            actions.append(_parse_action(line, line_no))
            if actions[-1].at_ms < last_t:
                raise ValueError(
                    f"line {line_no}: time {actions[-1].at_ms:g} ms goes "
                    f"backwards (previous action at {last_t:g} ms)")
            last_t = actions[-1].at_ms
        return Script(tuple(actions))


def _bad(line_no: int, why: str):
    raise ValueError(f"line {line_no}: {why}")


def _parse_action(line: str, line_no: int) -> Action:
    parts = line.split()
    if parts[0] != "at" or len(parts) < 3:
        _bad(line_no, "expected 'at <t_ms> <action> ...'")
    try:
        at_ms = float(parts[1])
    except ValueError:
        _bad(line_no, f"bad time {parts[1]!r}")
    if at_ms < 0:
        _bad(line_no, "time must not be negative")
    verb, rest = parts[2], parts[3:]

    def floats(n, what):
        if len(rest) != n:
            _bad(line_no, f"{verb} takes {what}")
        try:
            return tuple(float(v) for v in rest)
        except ValueError:
            _bad(line_no, f"{verb}: arguments must be numbers")

    if verb == "param":
        if len(rest) != 2:
            _bad(line_no, "param takes <name> <value>")
        name, value = rest
        spec = _PARAM_KINDS.get(name)
        if spec is None:
            _bad(line_no, f"unknown parameter {name!r} (one of: "
                 f"{', '.join(sorted(_PARAM_KINDS))})")
        kind, convert = spec
        try:
            args = (name, kind, convert(value))
        except ValueError:
            _bad(line_no, f"param {name}: bad value {value!r}")
    elif verb == "add_source":
        args = floats(3, "<x> <y> <temperature>")
    elif verb == "move_source":
        args = floats(3, "<id> <x> <y>")
        if args[0] != int(args[0]):
            _bad(line_no, "move_source: id must be an integer")
    elif verb == "delete_source":
        args = floats(1, "<id>")
        if args[0] != int(args[0]):
            _bad(line_no, "delete_source: id must be an integer")
    elif verb == "add_boundary":
        args = floats(3, "<x> <y> <temperature>")
    elif verb == "expect_level":
        args = floats(1, "<index>")
        if args[0] != int(args[0]) or args[0] < 0:
            _bad(line_no, "expect_level: index must be a non-negative integer")
    elif verb == "await_converged":
        args = floats(1, "<timeout_ms>")
        if args[0] <= 0:
            _bad(line_no, "await_converged: timeout must be positive")
    else:
        _bad(line_no, f"unknown action {verb!r}")
    return Action(at_ms, verb, args, line_no, line)


@dataclass
class TranscriptEntry:
    at_ms: float
    kind: str  # frame | stats | level_switch | action
    detail: dict

    def render(self) -> str:
        body = " ".join(f"{k}={v}" for k, v in self.detail.items())
        return f"{self.at_ms:9.1f} ms  {self.kind:12s} {body}"


@dataclass
class Transcript:
    entries: List[TranscriptEntry] = field(default_factory=list)

    def frames(self) -> List[TranscriptEntry]:
        return [e for e in self.entries if e.kind == "frame"]

    def transitions(self) -> List[Tuple[int, int]]:
        """The (epoch, level) sequence, deduplicated in order; this is the
        part of a run that must reproduce exactly."""
        seen: List[Tuple[int, int]] = []
        for e in self.frames():
            pair = (e.detail["epoch"], e.detail["level"])
            if not seen or seen[-1] != pair:
                seen.append(pair)
        return seen

    def render_text(self) -> str:
        return "\n".join(e.render() for e in self.entries)

    def tail(self, n: int = 10) -> str:
        return "\n".join(e.render() for e in self.entries[-n:])


class _Feed:
    """Reader-thread state: transcribes incoming messages and tracks what
    the assertions need (current level, last frame time)."""

    def __init__(self, transcript: Transcript, t0: float):
        self.transcript = transcript
        self.t0 = t0
        self.lock = threading.Lock()
        self.level: Optional[int] = None
        self.frame_count = 0
        self.last_frame_at: Optional[float] = None
        self.dead: Optional[str] = None

    def _now_ms(self) -> float:
        return (time.perf_counter() - self.t0) * 1000.0

    def add(self, kind: str, detail: dict):
        with self.lock:
            self.transcript.entries.append(
                TranscriptEntry(self._now_ms(), kind, detail))

    def on_message(self, msg: protocol.Message):
        if isinstance(msg, protocol.ResultFrame):
            with self.lock:
                self.level = msg.level_index
                self.frame_count += 1
                self.last_frame_at = time.perf_counter()
                self.transcript.entries.append(TranscriptEntry(
                    self._now_ms(), "frame",
                    {"epoch": msg.epoch, "level": msg.level_index,
                     "iteration": msg.iteration,
                     "residual": float(msg.residual)}))
        elif isinstance(msg, protocol.LevelSwitch):
            with self.lock:
                self.level = msg.to_index
                self.transcript.entries.append(TranscriptEntry(
                    self._now_ms(), "level_switch",
                    {"from": msg.from_index, "to": msg.to_index,
                     "reason": msg.reason}))
        elif isinstance(msg, protocol.Stats):
            self.add("stats", {
                "epoch": msg.epoch,
                "overhead_pct": round(msg.overhead_pct, 3),
                "restart_latency_us": msg.restart_latency_us,
                "updates_coalesced": msg.updates_coalesced})


class ScriptRunner:
    """Owns one connection and walks a script through it."""

    def __init__(self, address: Tuple[str, int]):
        try:
            sock = socket.create_connection(address, timeout=10.0)
        except OSError as e:
            raise StartupError(f"cannot reach server at "
                               f"{address[0]}:{address[1]}: {e}") from e
        sock.settimeout(None)
        self.stream = protocol.MessageStream(sock)
        try:
            protocol.handshake_client(self.stream, client_kind="headless")
        except (ProtocolError, OSError, socket.timeout) as e:
            self.stream.close()
            raise StartupError(f"handshake failed: {e}") from e
        self.transcript = Transcript()
        self.t0 = time.perf_counter()
        self.feed = _Feed(self.transcript, self.t0)
        self._next_entity_id = SCRIPT_ENTITY_BASE
        self._stop = threading.Event()
        self._reader = threading.Thread(
            target=self._read_loop, name="script-reader", daemon=True)
        self._reader.start()

    # -- plumbing -------------------------------------------------------

    def _read_loop(self):
        while not self._stop.is_set():
            try:
                msg = self.stream.recv(timeout=0.5)
            except socket.timeout:
                continue
            except (ProtocolError, OSError) as e:
                self.feed.dead = str(e)
                return
            if msg is None or isinstance(msg, protocol.Bye):
                self.feed.dead = "server closed the session"
                return
            self.feed.on_message(msg)

    def _fail(self, action: Action, why: str):
        err = ScriptFailure(
            f"line {action.line_no} ({action.text}): {why}\n"
            f"--- last transcript entries ---\n{self.transcript.tail()}")
        err.transcript = self.transcript
        raise err

    def _elapsed_ms(self) -> float:
        return (time.perf_counter() - self.t0) * 1000.0

    def _check_alive(self, action: Action):
        if self.feed.dead is not None:
            self._fail(action, f"connection lost: {self.feed.dead}")

    # -- the verbs ------------------------------------------------------

    def dispatch(self, action: Action):
        self._check_alive(action)
        self.feed.add("action", {"line": action.text})
        if action.verb == "param":
            name, kind, value = action.args
            self.stream.send(protocol.ParamUpdate(name, kind, value))
        elif action.verb == "add_source":
            x, y, temp = action.args
            self.stream.send(protocol.GeometryUpdate(
                "add", "heat_source", self._claim_id(), x, y, temp))
        elif action.verb == "move_source":
            ident, x, y = action.args
            self.stream.send(protocol.GeometryUpdate(
                "move", "heat_source", int(ident), x, y))
        elif action.verb == "delete_source":
            (ident,) = action.args
            self.stream.send(protocol.GeometryUpdate(
                "delete", "heat_source", int(ident)))
        elif action.verb == "add_boundary":
            x, y, temp = action.args
            self.stream.send(protocol.GeometryUpdate(
                "add", "boundary_point", self._claim_id(), x, y, temp))
        elif action.verb == "expect_level":
            self._expect_level(action, int(action.args[0]))
        elif action.verb == "await_converged":
            self._await_converged(action, action.args[0])

    def _claim_id(self) -> int:
        self._next_entity_id += 1
        return self._next_entity_id

    def _expect_level(self, action: Action, want: int):
        deadline = time.perf_counter() + EXPECT_LEVEL_WINDOW_MS / 1000.0
        while time.perf_counter() < deadline:
            if self.feed.dead is not None:
                self._check_alive(action)
            if self.feed.level == want:
                return
            time.sleep(0.01)
        self._fail(action, f"expected level {want}, observed "
                   f"{self.feed.level} after {EXPECT_LEVEL_WINDOW_MS:g} ms")

    def _await_converged(self, action: Action, timeout_ms: float):
        deadline = time.perf_counter() + timeout_ms / 1000.0
        while time.perf_counter() < deadline:
            self._check_alive(action)
            with self.feed.lock:
                frames = self.feed.frame_count
                last = self.feed.last_frame_at
            if frames > 0 and last is not None \
                    and time.perf_counter() - last >= QUIET_GAP_S:
                return
            time.sleep(0.02)
        self._fail(action, f"no converged result within {timeout_ms:g} ms "
                   f"({self.feed.frame_count} frames seen)")

    # -- the run --------------------------------------------------------

    def run(self, script: Script, trail_ms: float = 1000.0) -> Transcript:
        try:
            for action in script.actions:
                target = self.t0 + action.at_ms / 1000.0
                delay = target - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
                self.dispatch(action)
            if trail_ms > 0:
                time.sleep(trail_ms / 1000.0)
        finally:
            self._stop.set()
            try:
                self.stream.send(protocol.Bye())
            except OSError:
                pass
            self._reader.join(timeout=2.0)
            self.stream.close()
        return self.transcript


def run_script(script: Script, address: Tuple[str, int],
               trail_ms: float = 1000.0) -> Transcript:
    """Connect, run the script, disconnect; returns the transcript.

    Raises StartupError if the server is unreachable and ScriptFailure
    (with the transcript attached) when an assertion does not hold.
    """
    return ScriptRunner(address).run(script, trail_ms=trail_ms)
