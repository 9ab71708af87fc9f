"""Coordinator for the band-parallel backend.

Spawns the worker fleet, seeds each broadcast by handing the EpochStart
frame to worker 0 (the tree relays it to everyone else), and runs the
per-sweep barrier: collect one SweepReport per worker, decide, answer with
Verdicts that carry the neighbours' edge rows back as ghost rows.

The barrier gives the epoch-coherence guarantee its teeth: a frame is only
ever assembled while every worker is parked at the same (epoch, sweep)
boundary, and the assembly still re-checks the tags and refuses to mix.

The coordinator polls its abort context between barrier turns, so a steering
update ends the epoch within roughly one sweep plus the relay latency of the
EpochStart that follows it.
"""

from __future__ import annotations

import logging
import selectors
import socket
import statistics
import subprocess
import sys
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np

from ..errors import ConsistencyError, StartupError
from ..heat import SolveResult, SolverConfig, Scenario
from ..steering import EpochContext
from . import wire
from .topology import Band, WorkerTopology, partition

log = logging.getLogger("steerkit.cluster.coordinator")

_STARTUP_TIMEOUT = 60.0
_STRAGGLER_FACTOR = 10.0


@dataclass(frozen=True)
class EpochSpec:
    """Everything a worker needs to run one epoch."""

    width: int
    height: int
    scenario_text: str
    max_iter: int
    tolerance: float
    warm_field: Optional[np.ndarray] = None


@dataclass
class EpochOutcome:
    epoch: int
    iterations: int
    converged: bool
    residual: float
    aborted: bool
    grid: Optional[np.ndarray]  # full field, only when the epoch finished


@dataclass(frozen=True)
class BroadcastStats:
    """Instrumented cost of one EpochStart broadcast: relay messages between
    workers (the seeding hand-off is not a relay) and the time from send to
    the last EpochReady."""

    relays: int
    ready_latency: float


@dataclass
class FrameSnapshot:
    """One consistent gathered field, as handed to the frame callback."""

    epoch: int
    sweep: int
    residual: float
    grid: np.ndarray
    done: bool


def find_stragglers(sweep_times: Mapping[int, float],
                    factor: float = _STRAGGLER_FACTOR) -> List[int]:
    """Ranks whose sweep took more than `factor` times the fleet median."""
    if len(sweep_times) < 2:
        return []
    median = statistics.median(sweep_times.values())
    if median <= 0.0:
        return []
    return sorted(r for r, t in sweep_times.items() if t > factor * median)


class _Link:
    """Coordinator-side state for one worker connection."""

    def __init__(self, rank: int, sock: socket.socket):
        self.rank = rank
        self.sock = sock
        self.reader = wire.FrameReader()
        self.readies: List[wire.EpochReady] = []
        self.reports: List[wire.SweepReport] = []
        self.bands: List[wire.BandData] = []

    def send(self, msg: wire.ClusterMessage):
        self.sock.sendall(wire.encode(msg))


class ClusterBackend:
    """Owns the worker fleet and runs steered epochs across it."""

    def __init__(self, worker_count: int, fanout: int = 4,
                 frame_interval: float = 0.25,
                 on_frame: Optional[Callable[[FrameSnapshot], None]] = None):
        if worker_count < 1:
            raise ValueError("worker count must be at least 1")
        self.worker_count = worker_count
        self.fanout = fanout
        self.frame_interval = frame_interval
        self.on_frame = on_frame
        self.topology: Optional[WorkerTopology] = None
        self.last_broadcast: Optional[BroadcastStats] = None
        self._links: Dict[int, _Link] = {}
        self._procs: List[subprocess.Popen] = []
        self._relay: Optional[socket.socket] = None
        self._listener: Optional[socket.socket] = None
        self._selector = selectors.DefaultSelector()
        self._running = False

    # -- fleet lifecycle ------------------------------------------------

    def start(self, width: int, height: int):
        """Spawn the fleet for an initial grid size and wire everything up.

        The spawn-time bands document the assignment for that size; level
        switches later just carry new dimensions in EpochStart, and every
        rank re-derives its band from the same partition arithmetic.
        """
        if self._running:
            raise StartupError("cluster already started")
        bands = partition(height, self.worker_count)
        self.topology = WorkerTopology(self.worker_count, self.fanout,
                                       tuple(bands))
        listener = socket.socket()
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind(("127.0.0.1", 0))
        listener.listen(self.worker_count)
        listener.settimeout(_STARTUP_TIMEOUT)
        self._listener = listener
        port = listener.getsockname()[1]
        try:
            for band in bands:
                self._procs.append(subprocess.Popen(
                    [sys.executable, "-m", "steerkit", "--worker",
                     "--band", str(band.start), str(band.rows),
                     "--coordinator", f"127.0.0.1:{port}"],
                    stdin=subprocess.DEVNULL))
            self._register_fleet(bands, width, height)
        except Exception:
            self.shutdown()
            raise
        self._running = True

    def _register_fleet(self, bands: List[Band], width: int, height: int):
        rank_of = {band.start: rank for rank, band in enumerate(bands)}
        relay_ports: Dict[int, int] = {}
        deadline = time.monotonic() + _STARTUP_TIMEOUT
        while len(self._links) < self.worker_count:
            if time.monotonic() > deadline:
                raise StartupError("workers did not all register in time")
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                raise StartupError("workers did not all register in time")
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            stream = wire.ClusterStream(conn)
            msg = stream.recv(timeout=_STARTUP_TIMEOUT)
            if not isinstance(msg, wire.Register):
                raise StartupError(
                    f"expected Register, got {type(msg).__name__}")
            rank = rank_of.get(msg.band_start)
            if rank is None or bands[rank].rows != msg.band_rows \
                    or rank in self._links:
                raise StartupError(
                    f"worker registered unknown band "
                    f"({msg.band_start}, {msg.band_rows})")
            relay_ports[rank] = msg.relay_port
            self._links[rank] = _Link(rank, conn)
        ports = tuple(relay_ports[r] for r in range(self.worker_count))
        for rank, link in self._links.items():
            link.send(wire.Setup(rank, self.worker_count, self.fanout,
                                 width, height, ports))
        # seed connection: the coordinator's single send per broadcast
        self._relay = socket.create_connection(("127.0.0.1", ports[0]),
                                               timeout=_STARTUP_TIMEOUT)
        self._relay.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        for link in self._links.values():
            link.sock.setblocking(False)
            self._selector.register(link.sock, selectors.EVENT_READ, link)

    def shutdown(self):
        for link in self._links.values():
            try:
                link.send(wire.Halt())
            except OSError:
                pass
        for sock in (self._relay, self._listener):
            if sock is not None:
                try:
                    sock.close()
                except OSError:
                    pass
        for proc in self._procs:
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.terminate()
                try:
                    proc.wait(timeout=3)
                except subprocess.TimeoutExpired:
                    proc.kill()
                    proc.wait()
        for link in self._links.values():
            try:
                self._selector.unregister(link.sock)
            except (KeyError, ValueError):
                pass
            try:
                link.sock.close()
            except OSError:
                pass
        self._links.clear()
        self._procs.clear()
        self._relay = None
        self._listener = None
        self._running = False

    # -- message plumbing ----------------------------------------------

    def _pump(self, timeout: float):
        """One selector pass: drain readable workers into their queues."""
        for key, _ in self._selector.select(timeout):
            link: _Link = key.data
            try:
                chunk = link.sock.recv(1 << 20)
            except (BlockingIOError, InterruptedError):
                continue
            except OSError as e:
                raise StartupError(f"worker {link.rank} connection lost: {e}")
            if not chunk:
                raise StartupError(f"worker {link.rank} exited unexpectedly")
            msgs, _ = link.reader.feed(chunk)
            for msg in msgs:
                if isinstance(msg, wire.EpochReady):
                    link.readies.append(msg)
                elif isinstance(msg, wire.SweepReport):
                    link.reports.append(msg)
                elif isinstance(msg, wire.BandData):
                    link.bands.append(msg)
                else:
                    log.warning("unexpected %s from worker %d",
                                type(msg).__name__, link.rank)

    def _discard_stale(self, epoch: int):
        """Drop leftovers from earlier epochs; answer stale barriers with
        ABORT so no worker stays parked on one."""
        for link in self._links.values():
            link.readies = [m for m in link.readies if m.epoch == epoch]
            stale = [m for m in link.reports if m.epoch != epoch]
            link.reports = [m for m in link.reports if m.epoch == epoch]
            for msg in stale:
                link.send(wire.Verdict(msg.epoch, msg.sweep, wire.ABORT))
            link.bands = [m for m in link.bands if m.epoch == epoch]

    def _abort_epoch(self, epoch: int):
        for link in self._links.values():
            link.send(wire.Verdict(epoch, 0, wire.ABORT))

    # -- the epoch ------------------------------------------------------

    def run_epoch(self, ctx: EpochContext, spec: EpochSpec) -> EpochOutcome:
        """Broadcast one epoch and drive its sweep barriers to a verdict.

        Returns when the fleet converged, exhausted the sweep budget, or the
        context was aborted by a newer update (the caller then runs the next
        epoch, whose broadcast is what actually unparks the workers).
        """
        if not self._running:
            raise StartupError("cluster is not running")
        e = ctx.epoch
        start = wire.EpochStart(e, spec.width, spec.height, spec.max_iter,
                                spec.tolerance, spec.scenario_text,
                                spec.warm_field)
        sent_at = time.perf_counter()
        self._relay.sendall(wire.encode(start))
        if not self._await_ready(ctx, e, sent_at):
            return EpochOutcome(e, 0, False, float("inf"), True, None)
        bands = partition(spec.height, self.worker_count)
        sweep = 0
        residual = float("inf")
        last_frame = 0.0
        barrier_at = time.perf_counter()
        warned: set = set()
        while True:
            reports = self._collect_reports(ctx, e, sweep, barrier_at, warned)
            if reports is None:
                return EpochOutcome(e, sweep, False, residual, True, None)
            residual = max(r.max_change for r in reports.values())
            done = residual <= spec.tolerance
            capped = sweep + 1 >= spec.max_iter
            now = time.monotonic()
            grid = None
            if done or capped or (self.on_frame is not None
                                  and now - last_frame >= self.frame_interval):
                grid = self._gather(ctx, e, sweep, bands,
                                    (spec.height, spec.width))
                if grid is None:
                    return EpochOutcome(e, sweep, False, residual, True, None)
                last_frame = now
                if self.on_frame is not None:
                    self.on_frame(FrameSnapshot(e, sweep + 1, residual,
                                                grid, done or capped))
            if done or capped:
                for link in self._links.values():
                    link.send(wire.Verdict(e, sweep, wire.DONE))
                return EpochOutcome(e, sweep + 1, done, residual, False, grid)
            for rank, link in self._links.items():
                ghost_top = reports[rank - 1].bottom if rank > 0 else None
                ghost_bottom = (reports[rank + 1].top
                                if rank < self.worker_count - 1 else None)
                link.send(wire.Verdict(e, sweep, wire.CONTINUE,
                                       ghost_top, ghost_bottom))
            barrier_at = time.perf_counter()
            sweep += 1

    def _await_ready(self, ctx: EpochContext, e: int, sent_at: float) -> bool:
        ready: Dict[int, wire.EpochReady] = {}
        while len(ready) < self.worker_count:
            self._pump(0.001)
            self._discard_stale(e)
            for rank, link in self._links.items():
                while link.readies:
                    msg = link.readies.pop(0)
                    ready.setdefault(rank, msg)
            if ctx.should_abort():
                self._abort_epoch(e)
                return False
        self.last_broadcast = BroadcastStats(
            relays=sum(m.relays for m in ready.values()),
            ready_latency=time.perf_counter() - sent_at)
        return True

    def _collect_reports(self, ctx: EpochContext, e: int, sweep: int,
                         barrier_at: float, warned: set
                         ) -> Optional[Dict[int, wire.SweepReport]]:
        got: Dict[int, wire.SweepReport] = {}
        took: Dict[int, float] = {}
        while len(got) < self.worker_count:
            self._pump(0.001)
            self._discard_stale(e)
            for rank, link in self._links.items():
                while link.reports and rank not in got:
                    msg = link.reports.pop(0)
                    if msg.sweep == sweep:
                        got[rank] = msg
                        took[rank] = time.perf_counter() - barrier_at
            if ctx.should_abort():
                self._abort_epoch(e)
                return None
        for rank in find_stragglers(took):
            if rank not in warned and took[rank] > 0.05:
                warned.add(rank)
                log.warning("worker %d is straggling: sweep %d took %.1f ms "
                            "against a fleet median of %.1f ms", rank, sweep,
                            took[rank] * 1e3,
                            statistics.median(took.values()) * 1e3)
        return got

    def _gather(self, ctx: EpochContext, e: int, sweep: int,
                bands: List[Band],
                shape) -> Optional[np.ndarray]:
        """Collect every band at the current barrier and assemble the field.

        Workers are all parked waiting for this sweep's verdict, so the tags
        must agree; a mix means the lockstep logic is broken and assembly
        refuses to produce a frame.
        """
        for link in self._links.values():
            link.send(wire.Gather(e))
        got: Dict[int, wire.BandData] = {}
        while len(got) < self.worker_count:
            self._pump(0.001)
            for rank, link in self._links.items():
                while link.bands and rank not in got:
                    got[rank] = link.bands.pop(0)
            if ctx.should_abort():
                self._abort_epoch(e)
                return None
        return assemble_field(got, bands, shape, expect_epoch=e,
                              expect_sweep=sweep)

    # -- convenience ------------------------------------------------------


def assemble_field(got: Mapping[int, wire.BandData], bands: List[Band],
                   shape, expect_epoch: Optional[int] = None,
                   expect_sweep: Optional[int] = None) -> np.ndarray:
    """Concatenate per-worker bands into one field, enforcing coherence.

    Every band must carry the same (epoch, sweep) tag and exactly the rows
    the partition assigned to its rank; anything else raises
    ConsistencyError, because a frame must never mix epochs.
    """
    height, width = shape
    tags = {(m.epoch, m.sweep) for m in got.values()}
    if len(tags) != 1:
        raise ConsistencyError(f"gather mixed epoch/sweep tags: {sorted(tags)}")
    tag = tags.pop()
    if expect_epoch is not None and tag[0] != expect_epoch:
        raise ConsistencyError(
            f"gather returned epoch {tag[0]}, expected {expect_epoch}")
    if expect_sweep is not None and tag[1] != expect_sweep:
        raise ConsistencyError(
            f"gather returned sweep {tag[1]}, expected {expect_sweep}")
    if sorted(got) != list(range(len(bands))):
        raise ConsistencyError("gather is missing worker bands")
    grid = np.empty((height, width), dtype=np.float64)
    covered = 0
    for rank, band in enumerate(bands):
        m = got[rank]
        if (m.band_start, m.rows, m.width) != (band.start, band.rows, width):
            raise ConsistencyError(
                f"worker {rank} sent band ({m.band_start}, {m.rows}) "
                f"but owns {band}")
        grid[band.start:band.stop] = m.data.reshape(band.rows, width)
        covered += band.rows
    if covered != height:
        raise ConsistencyError("assembled bands do not cover the grid")
    return grid


def parallel_solve(scenario: Scenario, width: int, height: int,
                   config: SolverConfig, worker_count: int,
                   fanout: int = 4) -> "tuple[SolveResult, np.ndarray]":
    """One uninterrupted solve across a fresh fleet; returns the result and
    the gathered field.  The W=1 case reproduces the serial previous-sweep
    solve bitwise, and any other W reproduces W=1 bitwise."""
    backend = ClusterBackend(worker_count, fanout=fanout)
    backend.start(width, height)
    try:
        ctx = EpochContext(1, {})
        spec = EpochSpec(width, height, scenario.format(), config.max_iter,
                         config.tolerance, None)
        outcome = backend.run_epoch(ctx, spec)
    finally:
        backend.shutdown()
    result = SolveResult(outcome.iterations, outcome.converged,
                         outcome.residual)
    return result, outcome.grid
