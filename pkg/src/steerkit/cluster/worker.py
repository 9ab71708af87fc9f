"""Band worker process: one rank of the distributed heat solve.

A worker owns a contiguous run of grid rows, iterates them with the
previous-sweep scheme in lockstep with its peers, and checks for pushed
updates between rows, exactly like the single-process solver checks its
abort flag.  Updates arrive as EpochStart frames over the relay connection
from the worker's tree parent; the worker forwards the raw frame bytes to
its own children before acting on it, then abandons the current epoch at
the next row boundary.

Lockstep works through the coordinator: after each sweep the worker sends a
SweepReport with its local max change and its edge rows, then waits for the
Verdict that carries the neighbours' edge rows back as ghosts for the next
sweep.  Because every worker reads only previous-sweep values, the gathered
result is bitwise identical to the serial previous-sweep solve no matter
how many workers share the grid.
"""

from __future__ import annotations

import logging
import socket
import threading
from collections import deque
from typing import Dict, Optional, Tuple

import numpy as np

from ..heat import Scenario, jacobi_sweep, rasterize
from . import wire
from .topology import WorkerTopology, partition, relay_targets

log = logging.getLogger("steerkit.cluster.worker")

_SETUP_TIMEOUT = 30.0
_POLL = 0.005


class RelayChannel:
    """Receives EpochStart frames from the tree parent and fans them out.

    Forwarding happens in the reader thread, before the frame is handed to
    the solver loop, so a relay hop costs only the forwarding writes.  If a
    child cannot be reached, its own children are adopted (the failing
    node's grandparent takes over) and the failure is remembered.
    """

    def __init__(self, listener: socket.socket):
        self.listener = listener
        self.port = listener.getsockname()[1]
        self.inbox: deque = deque()
        self._topology: Optional[WorkerTopology] = None
        self._rank = -1
        self._ports: Tuple[int, ...] = ()
        self._links: Dict[int, socket.socket] = {}
        self._dead: set = set()
        self._relays: Dict[int, int] = {}  # epoch -> frames forwarded
        self._wired = threading.Event()
        self._lock = threading.Lock()
        self._acceptor = threading.Thread(
            target=self._accept_loop, name="relay-accept", daemon=True)

    def start(self):
        self._acceptor.start()

    def wire(self, topology: WorkerTopology, rank: int,
             relay_ports: Tuple[int, ...]):
        """Connect to this rank's tree children; called once after Setup."""
        self._topology = topology
        self._rank = rank
        self._ports = relay_ports
        for child in topology.children(rank):
            self._connect(child)
        self._wired.set()

    def _connect(self, child: int) -> Optional[socket.socket]:
        try:
            sock = socket.create_connection(
                ("127.0.0.1", self._ports[child]), timeout=5.0)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._links[child] = sock
            return sock
        except OSError as e:
            log.warning("relay to worker %d unreachable: %s", child, e)
            self._dead.add(child)
            return None

    def _accept_loop(self):
        while True:
            try:
                conn, _ = self.listener.accept()
            except OSError:
                return  # listener closed, worker is exiting
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            threading.Thread(target=self._read_loop, args=(conn,),
                             name="relay-read", daemon=True).start()

    def _read_loop(self, conn: socket.socket):
        reader = wire.FrameReader()
        while True:
            try:
                chunk = conn.recv(1 << 20)
            except OSError:
                return
            if not chunk:
                return  # parent gone; a re-parented feed may reconnect
            msgs, frames = reader.feed(chunk)
            for msg, frame in zip(msgs, frames):
                self._forward(msg, frame)
                self.inbox.append(msg)

    def _forward(self, msg: wire.ClusterMessage, frame: bytes):
        # A frame can land while the main thread is still between Setup and
        # wire(); forwarding must wait for the wiring, not skip it.
        if not self._wired.wait(_SETUP_TIMEOUT):
            log.error("relay frame arrived but wiring never completed")
            return
        with self._lock:
            targets = relay_targets(self._topology, self._rank,
                                    frozenset(self._dead))
            sent = 0
            pending = list(targets)
            while pending:
                child = pending.pop(0)
                sock = self._links.get(child)
                if sock is None and child not in self._dead:
                    sock = self._connect(child)
                try:
                    if sock is None:
                        raise OSError("no link")
                    sock.sendall(frame)
                    sent += 1
                except OSError:
                    # child died since wiring: adopt its children instead
                    if child not in self._dead:
                        self._dead.add(child)
                        self._links.pop(child, None)
                        pending.extend(relay_targets(
                            self._topology, child, frozenset(self._dead)))
            if isinstance(msg, wire.EpochStart):
                self._relays[msg.epoch] = \
                    self._relays.get(msg.epoch, 0) + sent

    def has_pending(self) -> bool:
        return bool(self.inbox)

    def pop_newest_start(self) -> Optional[wire.EpochStart]:
        """Drain the inbox down to the newest EpochStart, if any."""
        newest = None
        while self.inbox:
            msg = self.inbox.popleft()
            if isinstance(msg, wire.EpochStart):
                if newest is None or msg.epoch > newest.epoch:
                    newest = msg
        return newest

    def relays_for(self, epoch: int) -> int:
        with self._lock:
            return self._relays.get(epoch, 0)

    def close(self):
        try:
            self.listener.close()
        except OSError:
            pass
        for sock in self._links.values():
            try:
                sock.close()
            except OSError:
                pass


class _Halted(Exception):
    """Raised internally when the coordinator tells us to exit."""


class BandWorker:
    """The solver loop of one worker process."""

    def __init__(self, main: wire.ClusterStream, relay: RelayChannel,
                 setup: wire.Setup):
        self.main = main
        self.relay = relay
        self.rank = setup.rank
        self.count = setup.worker_count
        self.fanout = setup.fanout
        self.topology = WorkerTopology(
            setup.worker_count, setup.fanout,
            tuple(partition(setup.height, setup.worker_count)))
        # last completed state, for answering gathers while idle
        self._last: Optional[wire.BandData] = None

    def run(self):
        try:
            while True:
                start = self._await_epoch()
                self._run_epoch(start)
        except _Halted:
            log.info("rank %d halting", self.rank)
        finally:
            self.relay.close()
            self.main.close()

    # -- waiting states -------------------------------------------------

    def _await_epoch(self) -> wire.EpochStart:
        """Idle until the next EpochStart; keep serving the control socket."""
        while True:
            start = self.relay.pop_newest_start()
            if start is not None:
                return start
            try:
                msg = self.main.recv(timeout=_POLL)
            except socket.timeout:
                continue
            if msg is None:
                raise _Halted("coordinator closed the connection")
            self._handle_control(msg)

    def _handle_control(self, msg: wire.ClusterMessage):
        if isinstance(msg, wire.Halt):
            raise _Halted("halt requested")
        if isinstance(msg, wire.Gather):
            # always answer, whatever epoch the request names: the reply
            # carries its own tags and the coordinator checks them
            if self._last is not None:
                self.main.send(self._last)
            else:
                self.main.send(wire.BandData(0, 0, 0, 0, 0,
                                             np.zeros(0)))
            return
        # stale verdicts from an epoch we already left: drop
        if isinstance(msg, wire.Verdict):
            return
        log.warning("rank %d ignoring unexpected %s", self.rank,
                    type(msg).__name__)

    # -- one epoch --------------------------------------------------------

    def _run_epoch(self, start: wire.EpochStart):
        e = start.epoch
        width, height = start.width, start.height
        band = partition(height, self.count)[self.rank]
        grid = rasterize(Scenario.parse(start.scenario_text), width, height)
        if start.warm_field is not None:
            warm = start.warm_field.reshape(height, width)
            free = grid.constrained == 0
            grid.data[free] = warm[free]
        old = grid.data
        new = old.copy()
        constrained = grid.constrained
        # the band's slice plus one ghost row on each interior side
        lo = max(band.start - 1, 0)
        hi = min(band.stop + 1, height)
        self.main.send(wire.EpochReady(e, self.relay.relays_for(e)))
        sweep = 0
        while True:
            change = jacobi_sweep(old[lo:hi], new[lo:hi], constrained[lo:hi],
                                  abort_check=self.relay.has_pending)
            if change is None:
                return  # superseded mid-sweep; adopt the newer epoch
            self._last = wire.BandData(
                e, sweep, band.start, band.rows, width,
                new[band.start:band.stop].ravel().copy())
            self.main.send(wire.SweepReport(
                e, sweep, change, new[band.start].copy(),
                new[band.stop - 1].copy()))
            verdict = self._await_verdict(e, sweep)
            if verdict is None or verdict.action == wire.ABORT:
                return
            if verdict.action == wire.DONE:
                return
            old, new = new, old
            # neighbours' rows from this sweep become next sweep's ghosts
            if verdict.ghost_top is not None:
                old[band.start - 1] = verdict.ghost_top
            if verdict.ghost_bottom is not None:
                old[band.stop] = verdict.ghost_bottom
            sweep += 1

    def _await_verdict(self, e: int, sweep: int) -> Optional[wire.Verdict]:
        """Block at the sweep barrier; None means a newer epoch arrived."""
        while True:
            if self.relay.has_pending():
                return None
            try:
                msg = self.main.recv(timeout=0.001)
            except socket.timeout:
                continue
            if msg is None:
                raise _Halted("coordinator closed the connection")
            if isinstance(msg, wire.Verdict):
                if msg.epoch != e:
                    continue  # stale barrier answer
                if msg.action == wire.ABORT or msg.sweep == sweep:
                    return msg
                continue
            self._handle_control(msg)


def worker_main(band_start: int, band_rows: int, coordinator: str) -> int:
    """Entry point of a spawned worker process."""
    host, _, port = coordinator.rpartition(":")
    listener = socket.socket()
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind(("127.0.0.1", 0))
    listener.listen(4)
    relay = RelayChannel(listener)
    relay.start()
    sock = socket.create_connection((host or "127.0.0.1", int(port)),
                                    timeout=_SETUP_TIMEOUT)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    main = wire.ClusterStream(sock)
    main.send(wire.Register(band_start, band_rows, relay.port))
    try:
        setup = main.recv(timeout=_SETUP_TIMEOUT)
    except socket.timeout:
        log.error("no setup from coordinator")
        return 1
    if not isinstance(setup, wire.Setup):
        log.error("expected Setup, got %s", type(setup).__name__)
        return 1
    expected = partition(setup.height, setup.worker_count)[setup.rank]
    if (expected.start, expected.rows) != (band_start, band_rows):
        log.error("band flags (%d, %d) do not match assignment %s",
                  band_start, band_rows, expected)
        return 1
    worker = BandWorker(main, relay, setup)
    relay.wire(worker.topology, setup.rank, setup.relay_ports)
    worker.run()
    return 0
