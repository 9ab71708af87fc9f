"""The steering server: sessions in, frames out, one solver fleet behind.

Composition of the other modules.  A SteeringEngine owns the epoch loop and
the tick thread; a ClusterBackend owns the worker fleet; this module owns the
listening socket, the per-session reader threads, the authoritative scenario,
the level governor, and the per-level warm-start cache.

Steerable variables:

    max_iter      INT    solver iteration cap
    tolerance     FLOAT  convergence threshold
    active_level  INT    resolution level index (written by the governor)
    scenario      BLOB   scenario text (written on geometry updates)

Every applied update aborts the running epoch; the next epoch re-reads all
four and starts the fleet over.  Clients only ever talk the session protocol;
none of the cluster wire format leaks past this module.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import protocol
from .cluster import ClusterBackend, EpochSpec, FrameSnapshot
from .config import ServerConfig
from .errors import ProtocolError, StartupError
from .heat import Scenario
from .hierarchy import InteractionClock, choose_level, prolong_field, \
    restrict_field
from .steering import EpochContext, Registry, SteeringEngine, TickConfig, \
    UpdateBatch, VarKind

log = logging.getLogger(__name__)

GOVERNOR_INTERVAL = 0.1

# client-writable steerables and the validation each value must pass
_CLIENT_PARAMS = {
    "max_iter": (VarKind.INT, lambda v: int(v) >= 1),
    "tolerance": (VarKind.FLOAT, lambda v: float(v) > 0.0),
}


class _Client:
    """One connected session: its stream, identity, and a send lock so the
    epoch thread and the greeting path never interleave a frame."""

    def __init__(self, session: protocol.Session, stream: protocol.MessageStream):
        self.session = session
        self.stream = stream
        self.send_lock = threading.Lock()

    def send(self, msg: protocol.Message):
        with self.send_lock:
            self.stream.send(msg)


@dataclass
class _EpochMeter:
    """Wall time accounting for one epoch, for the Stats frame."""

    started_at: float
    frame_seconds: float = 0.0
    restart_latency_us: int = 0
    updates_coalesced: int = 0

    def overhead_pct(self, now: float) -> float:
        wall = now - self.started_at
        if wall <= 0.0:
            return 0.0
        return 100.0 * self.frame_seconds / wall


class SteeringServer:
    """Listens for sessions and runs the steered solve behind them."""

    def __init__(self, config: ServerConfig):
        self.config = config
        self.scenario: Scenario = config.load_scenario()
        self._scenario_lock = threading.Lock()
        self.levels = config.levels
        self.policy = config.policy()
        self.clock = InteractionClock()
        self._clock_lock = threading.Lock()

        self.registry = Registry()
        self.registry.register("max_iter", VarKind.INT, config.max_iter)
        self.registry.register("tolerance", VarKind.FLOAT, config.tolerance)
        self.registry.register("active_level", VarKind.INT, self.levels.finest)
        self.registry.register("scenario", VarKind.BLOB, self.scenario.format())
        self.engine = SteeringEngine(
            self.registry, TickConfig(interval_ms=config.tick_ms))
        self.engine.subscribe(self._on_engine_event)

        self.backend = ClusterBackend(
            config.workers, fanout=config.fanout, on_frame=self._on_frame)

        self._clients: Dict[str, _Client] = {}
        self._clients_lock = threading.Lock()
        self._field_cache: Dict[int, np.ndarray] = {}
        self._last_frame: Optional[protocol.ResultFrame] = None

        # governor bookkeeping: the last level it asked for, and the level
        # of the previous epoch (for LevelSwitch emission)
        self._level_target = self.levels.finest
        self._level_prev: Optional[int] = None

        # set by compute for the duration of one epoch
        self._active_ctx: Optional[EpochContext] = None
        self._active_level = self.levels.finest
        self._meter: Optional[_EpochMeter] = None

        self._stop = threading.Event()
        self._fatal: Optional[BaseException] = None
        self._listener: Optional[socket.socket] = None
        self._threads: list = []

    # -- lifecycle ------------------------------------------------------

    def start(self):
        """Spawn the fleet, bind the listener, start all server threads."""
        width, height = self.levels.dims(self.levels.finest)
        self.backend.start(width, height)
        try:
            self._listener = socket.create_server(
                self.config.listen, backlog=16)
        except OSError as e:
            self.backend.shutdown()
            raise StartupError(
                f"cannot listen on {self.config.listen[0]}:"
                f"{self.config.listen[1]}: {e}") from e
        self._listener.settimeout(0.5)
        for name, target in (("steer-accept", self._accept_loop),
                             ("steer-governor", self._governor_loop),
                             ("steer-epochs", self._epoch_loop)):
            t = threading.Thread(target=target, name=name, daemon=True)
            t.start()
            self._threads.append(t)
        log.info("serving on %s:%d (%d workers, tick %.1fms)",
                 self.config.listen[0], self.port, self.config.workers,
                 self.config.tick_ms)

    @property
    def port(self) -> int:
        """The bound steering port (resolves port 0 after start)."""
        if self._listener is None:
            raise StartupError("server is not running")
        return self._listener.getsockname()[1]

    def stop(self):
        """Stop everything: epoch loop, ticker, fleet, listener, sessions."""
        self._stop.set()
        ctx = self._active_ctx
        if ctx is not None:
            ctx._signal_abort()  # unblock a long-running solve promptly
        for t in self._threads:
            t.join(timeout=10.0)
        self.backend.shutdown()
        if self._listener is not None:
            self._listener.close()
        with self._clients_lock:
            clients = list(self._clients.values())
            self._clients.clear()
        for client in clients:
            client.stream.close()

    def wait(self, timeout: Optional[float] = None) -> bool:
        """Block until the server stops; True if it did."""
        return self._stop.wait(timeout)

    def check_failed(self):
        """Re-raise a fatal backend error captured on the epoch thread."""
        if self._fatal is not None:
            raise self._fatal

    # -- the epoch loop ---------------------------------------------------

    def _epoch_loop(self):
        try:
            self.engine.run_steered(self._compute, stop=self._stop)
        except Exception as e:
            log.exception("solver loop died")
            self._fatal = e
            self._stop.set()

    def _compute(self, ctx: EpochContext):
        level = int(ctx.values["active_level"])
        level = max(self.levels.coarsest, min(level, self.levels.finest))
        text = ctx.values["scenario"]
        if isinstance(text, bytes):
            text = text.decode("utf-8")
        width, height = self.levels.dims(level)

        self._announce_level(level)
        self._active_ctx = ctx
        self._active_level = level
        try:
            spec = EpochSpec(
                width=width, height=height, scenario_text=text,
                max_iter=int(ctx.values["max_iter"]),
                tolerance=float(ctx.values["tolerance"]),
                warm_field=self._warm_guess(level, width, height))
            outcome = self.backend.run_epoch(ctx, spec)
        finally:
            self._active_ctx = None
        if outcome.grid is not None:
            self._field_cache[level] = outcome.grid
        if outcome.aborted:
            return None
        return outcome  # .iterations feeds the epoch_complete event

    def _announce_level(self, level: int):
        prev = self._level_prev
        self._level_prev = level
        if prev is None or prev == level:
            return
        reason = "interaction" if level < prev else "idle"
        self._broadcast(protocol.LevelSwitch(prev, level, reason))

    def _warm_guess(self, level: int, width: int,
                    height: int) -> Optional[np.ndarray]:
        """Best starting field for this level: the cached field from the
        nearest already-solved level, transferred one step at a time."""
        if not self._field_cache:
            return None
        src = min(self._field_cache, key=lambda k: (abs(k - level), -k))
        field = self._field_cache[src]
        while src < level:
            src += 1
            field = prolong_field(field, self.levels.dims(src))
        while src > level:
            src -= 1
            field = restrict_field(field)
        if field.shape != (height, width):
            return None
        return field

    # -- frames and stats ---------------------------------------------------

    def _on_frame(self, snap: FrameSnapshot):
        # called on the epoch thread, inside run_epoch
        ctx = self._active_ctx
        if ctx is None:
            return
        began = time.perf_counter()
        level = self._active_level
        height, width = snap.grid.shape
        self._field_cache[level] = snap.grid
        frame = protocol.ResultFrame(
            epoch=ctx.epoch, level_index=level, iteration=snap.sweep,
            residual=snap.residual, width=width, height=height,
            field=snap.grid)
        self._last_frame = frame
        self._broadcast(frame)
        if self._meter is not None:
            self._meter.frame_seconds += time.perf_counter() - began

    def _on_engine_event(self, event):
        if event.kind == "epoch_start":
            latencies = event.fields["restart_latency_us"]
            self._meter = _EpochMeter(
                started_at=event.ts,
                restart_latency_us=int(max(latencies)) if latencies else 0,
                updates_coalesced=len(latencies))
        elif event.kind in ("epoch_complete", "epoch_abort"):
            meter = self._meter
            if meter is None:
                return
            self._broadcast(protocol.Stats(
                epoch=event.fields["epoch"],
                overhead_pct=meter.overhead_pct(event.ts),
                restart_latency_us=meter.restart_latency_us,
                updates_coalesced=meter.updates_coalesced))

    def _broadcast(self, msg: protocol.Message):
        with self._clients_lock:
            clients = list(self._clients.items())
        for session_id, client in clients:
            try:
                client.send(msg)
            except OSError:
                log.info("dropping session %s (send failed)", session_id)
                self._drop(session_id)

    def _drop(self, session_id: str):
        with self._clients_lock:
            client = self._clients.pop(session_id, None)
        if client is not None:
            client.stream.close()

    # -- the level governor -------------------------------------------------

    def _governor_loop(self):
        while not self._stop.wait(GOVERNOR_INTERVAL):
            now = time.perf_counter()
            with self._clock_lock:
                target = choose_level(self.clock, self.policy, self.levels,
                                      self._level_target, now)
            if target != self._level_target:
                self._level_target = target
                self.engine.submit(UpdateBatch(
                    updates=[("active_level", target)], source="governor"))

    # -- sessions -------------------------------------------------------

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                sock, addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            t = threading.Thread(
                target=self._session_thread, args=(sock, addr),
                name="steer-session", daemon=True)
            t.start()

    def _session_thread(self, sock: socket.socket, addr):
        stream = protocol.MessageStream(sock)
        try:
            session = protocol.handshake_server(stream)
        except (ProtocolError, OSError, socket.timeout):
            stream.close()
            return
        self.run_session(session, stream)

    def run_session(self, session: protocol.Session,
                    stream: protocol.MessageStream):
        """Serve one already-handshaken session until it closes.

        Public so other transports (the browser gateway) can hand over a
        connection that quacks like a MessageStream.
        """
        client = _Client(session, stream)
        with self._clients_lock:
            self._clients[session.session_id] = client
        log.info("session %s connected (%s)", session.session_id,
                 session.client_kind)
        last = self._last_frame
        if last is not None:
            try:
                client.send(last)  # joining mid-run still gets a picture
            except OSError:
                self._drop(session.session_id)
                return
        try:
            while not self._stop.is_set():
                try:
                    msg = stream.recv(timeout=0.5)
                except socket.timeout:
                    continue
                except (ProtocolError, OSError):
                    break
                if msg is None or isinstance(msg, protocol.Bye):
                    break
                self._handle(session.session_id, msg)
        finally:
            self._drop(session.session_id)
            log.info("session %s closed", session.session_id)

    def _handle(self, session_id: str, msg: protocol.Message):
        if isinstance(msg, protocol.ParamUpdate):
            self._handle_param(session_id, msg)
        elif isinstance(msg, protocol.GeometryUpdate):
            self._handle_geometry(session_id, msg)
        else:
            log.warning("session %s sent unexpected %s; ignoring",
                        session_id, type(msg).__name__)

    def _observe_interaction(self):
        with self._clock_lock:
            self.clock.observe(time.perf_counter())

    def _handle_param(self, session_id: str, msg: protocol.ParamUpdate):
        expected = _CLIENT_PARAMS.get(msg.name)
        if expected is None:
            log.warning("session %s tried to steer %r; ignoring",
                        session_id, msg.name)
            return
        kind, ok = expected
        try:
            valid = msg.kind == kind and ok(msg.value)
        except (TypeError, ValueError):
            valid = False
        if not valid:
            log.warning("session %s sent invalid %s=%r; ignoring",
                        session_id, msg.name, msg.value)
            return
        self.engine.submit(UpdateBatch(
            updates=[(msg.name, msg.value)], source=session_id))
        self._observe_interaction()

    def _handle_geometry(self, session_id: str, msg: protocol.GeometryUpdate):
        with self._scenario_lock:
            try:
                self.scenario = self.scenario.with_entity(
                    msg.entity, msg.op, msg.entity_id, msg.x, msg.y,
                    msg.temperature)
            except ValueError as e:
                log.warning("session %s sent bad geometry update: %s",
                            session_id, e)
                return
            text = self.scenario.format()
        self.engine.submit(UpdateBatch(
            updates=[("scenario", text)], source=session_id))
        self._observe_interaction()


def serve(config: ServerConfig) -> SteeringServer:
    """Validate, start, and return a running server."""
    from .config import validated
    server = SteeringServer(validated(config))
    server.start()
    return server
