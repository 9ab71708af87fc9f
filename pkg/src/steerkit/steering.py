"""The interrupt-and-restart engine.

A computation runs in *epochs*: executions under a fixed snapshot of the
registered steerable variables.  Updates arriving from clients are queued,
coalesced, and applied atomically by a cyclic tick; applying an update flags
the running epoch to abort, and the engine immediately restarts the
computation with the new snapshot.

The tick is a plain timer thread rather than an OS signal: the observable
contract (a pending-update check at least once per interval, restart within
a bounded latency) is what matters, and a cooperative flag keeps the hot
path cheap enough that checking per inner iteration costs well under 5%.
"""

from __future__ import annotations

import enum
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Optional

import numpy as np

from .errors import BatchRejected, LifecycleError, RegistrationError

log = logging.getLogger("steerkit.steering")

WATCHDOG_TICKS = 100


class VarKind(enum.IntEnum):
    """Wire-stable codes for the kinds a steerable variable may have."""

    INT = 0
    FLOAT = 1
    BOOL = 2
    POINT2D = 3
    BLOB = 4

    @classmethod
    def from_name(cls, name: str) -> "VarKind":
        try:
            return cls[name.upper()]
        except KeyError:
            raise RegistrationError(f"unknown kind: {name!r}") from None


def _coerce(kind: VarKind, value: Any) -> Any:
    """Validate and normalize a value for its kind. Raises TypeError."""
    if kind == VarKind.INT:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"expected int, got {type(value).__name__}")
        return value
    if kind == VarKind.FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"expected float, got {type(value).__name__}")
        return float(value)
    if kind == VarKind.BOOL:
        if not isinstance(value, bool):
            raise TypeError(f"expected bool, got {type(value).__name__}")
        return value
    if kind == VarKind.POINT2D:
        try:
            x, y = value
        except (TypeError, ValueError):
            raise TypeError("expected a pair of coordinates") from None
        return (float(x), float(y))
    if kind == VarKind.BLOB:
        if isinstance(value, str):
            return value.encode()
        if not isinstance(value, (bytes, bytearray)):
            raise TypeError(f"expected bytes, got {type(value).__name__}")
        return bytes(value)
    raise RegistrationError(f"unknown kind: {kind!r}")


@dataclass(frozen=True)
class SteerableVar:
    name: str
    kind: VarKind
    value: Any
    epoch: int  # generation counter of this variable, bumped per applied update


@dataclass(frozen=True)
class TickConfig:
    interval_ms: float = 5.0
    enabled: bool = True

    def __post_init__(self):
        if self.interval_ms <= 0:
            raise ValueError("tick interval must be positive")


@dataclass
class UpdateBatch:
    """A set of (name, value) updates applied as a unit."""

    updates: list  # list of (name, value)
    received_at: float = field(default_factory=time.perf_counter)
    source: str = "local"
    # receipt timestamps of every batch coalesced into this one
    coalesced_from: list = field(default_factory=list)

    def __post_init__(self):
        if not self.coalesced_from:
            self.coalesced_from = [self.received_at]

    @staticmethod
    def merge(batches: "Iterable[UpdateBatch]") -> "UpdateBatch":
        """Coalesce several batches into one, last writer wins per variable."""
        merged: dict = {}
        receipts: list = []
        earliest = None
        source = "merged"
        for b in batches:
            for name, value in b.updates:
                merged[name] = value
            receipts.extend(b.coalesced_from)
            earliest = b.received_at if earliest is None else min(earliest, b.received_at)
            source = b.source
        return UpdateBatch(
            updates=list(merged.items()),
            received_at=earliest if earliest is not None else time.perf_counter(),
            source=source,
            coalesced_from=receipts,
        )


@dataclass(frozen=True)
class RegistrySnapshot:
    generation: int
    vars: Mapping[str, SteerableVar]

    def values(self) -> dict:
        return {name: var.value for name, var in self.vars.items()}


class VarHandle:
    """Read access to one registered variable."""

    __slots__ = ("_registry", "name", "kind")

    def __init__(self, registry: "Registry", name: str, kind: VarKind):
        self._registry = registry
        self.name = name
        self.kind = kind

    def get(self) -> Any:
        return self._registry._snap[self.name].value

    @property
    def epoch(self) -> int:
        return self._registry._snap[self.name].epoch


class Registry:
    """Holds the steerable variables.

    Readers take the current snapshot by a single reference read (the dict is
    replaced wholesale on every applied batch, never mutated in place), so a
    reader can never observe half of a batch.  Writers serialize on a lock.
    """

    def __init__(self):
        self._snap: dict = {}
        self._generation = 0
        self._sealed = False
        self._lock = threading.Lock()
        self._active_ctx: Optional[EpochContext] = None
        self._apply_listeners: list = []
        self._unclaimed_receipts: list = []

    def register(self, name: str, kind: VarKind, initial: Any) -> VarHandle:
        if not isinstance(kind, VarKind):
            raise RegistrationError(f"unknown kind: {kind!r}")
        try:
            initial = _coerce(kind, initial)
        except TypeError as e:
            raise RegistrationError(f"bad initial value for {name!r}: {e}") from None
        with self._lock:
            if self._sealed:
                raise RegistrationError("registry is sealed")
            if name in self._snap:
                raise RegistrationError(f"duplicate name: {name!r}")
            snap = dict(self._snap)
            snap[name] = SteerableVar(name, kind, initial, epoch=0)
            self._snap = snap
        return VarHandle(self, name, kind)

    def seal(self):
        with self._lock:
            self._sealed = True

    @property
    def sealed(self) -> bool:
        return self._sealed

    @property
    def generation(self) -> int:
        return self._generation

    def snapshot(self) -> RegistrySnapshot:
        # one reference read; the dict behind it is immutable by convention
        return RegistrySnapshot(self._generation, self._snap)

    def value(self, name: str) -> Any:
        return self._snap[name].value

    def on_apply(self, listener: Callable[[int], None]):
        """Register a callback invoked (under the write lock) after each
        applied batch with the new generation."""
        self._apply_listeners.append(listener)

    def attach_context(self, ctx: "EpochContext"):
        with self._lock:
            self._active_ctx = ctx

    def detach_context(self, ctx: "EpochContext"):
        with self._lock:
            if self._active_ctx is ctx:
                self._active_ctx = None

    def apply(self, batch: UpdateBatch) -> int:
        """Apply a batch atomically: validate everything, then swap the
        snapshot in one reference assignment.  An empty batch is a no-op.
        Rejection leaves the registry untouched."""
        if not batch.updates:
            return self._generation
        with self._lock:
            current = self._snap
            staged = {}
            for name, value in batch.updates:
                var = current.get(name)
                if var is None:
                    raise BatchRejected(f"unknown variable: {name!r}")
                try:
                    staged[name] = _coerce(var.kind, value)
                except TypeError as e:
                    raise BatchRejected(f"kind mismatch for {name!r}: {e}") from None
            snap = dict(current)
            for name, value in staged.items():
                old = snap[name]
                snap[name] = SteerableVar(name, old.kind, value, old.epoch + 1)
            self._generation += 1
            self._snap = snap
            self._unclaimed_receipts.extend(batch.coalesced_from)
            ctx = self._active_ctx
            if ctx is not None:
                ctx._signal_abort()
            for listener in self._apply_listeners:
                listener(self._generation)
            return self._generation

    def claim_receipts(self) -> list:
        """Hand out (once) the receipt timestamps of batches applied since
        the last claim; the epoch loop uses them for restart-latency stats."""
        with self._lock:
            receipts, self._unclaimed_receipts = self._unclaimed_receipts, []
        return receipts


def apply_update(batch: UpdateBatch, registry: Registry) -> int:
    """Apply a batch directly (no coalescing), aborting the running epoch."""
    return registry.apply(batch)


class EpochContext:
    """Everything a compute function sees of one epoch.

    `abort_requested` is a plain attribute so polling it stays around 40 ns;
    `abort_cell` is a one-byte array that compiled kernels can poll per row
    without touching the interpreter.
    """

    __slots__ = (
        "epoch",
        "values",
        "abort_requested",
        "abort_cell",
        "started_at",
        "abort_at",
        "_cleanups",
        "_next_hook_id",
        "_ended",
        "_checked",
        "_warned",
        "__weakref__",
    )

    def __init__(self, epoch: int, values: Mapping[str, Any]):
        self.epoch = epoch
        self.values = values
        self.abort_requested = False
        self.abort_cell = np.zeros(1, dtype=np.uint8)
        self.started_at = time.perf_counter()
        self.abort_at: Optional[float] = None
        self._cleanups: list = []
        self._next_hook_id = 0
        self._ended = False
        self._checked = False
        self._warned = False

    def _signal_abort(self):
        # idempotent: the false->true transition happens at most once
        if not self.abort_requested:
            self.abort_at = time.perf_counter()
            self.abort_requested = True
            self.abort_cell[0] = 1

    def should_abort(self) -> bool:
        if not self._checked:
            self._checked = True
        return self.abort_requested

    def register_cleanup(self, hook: Callable[[], None]) -> int:
        if self._ended:
            raise LifecycleError("epoch already ended")
        hook_id = self._next_hook_id
        self._next_hook_id += 1
        self._cleanups.append((hook_id, hook))
        return hook_id

    def _run_cleanups(self):
        if self._ended:
            return
        self._ended = True
        # reverse registration order; a failing hook must not skip the rest
        for _, hook in reversed(self._cleanups):
            try:
                hook()
            except Exception:
                log.exception("cleanup hook failed (epoch %d)", self.epoch)
        self._cleanups.clear()


def should_abort(ctx: EpochContext) -> bool:
    """True iff an update has been applied since the epoch started.

    Wait-free: a single attribute read, no locks taken.
    """
    if not ctx._checked:
        ctx._checked = True
    return ctx.abort_requested


@dataclass(frozen=True)
class SteerEvent:
    kind: str
    ts: float
    fields: Mapping[str, Any]


class SteeringEngine:
    """Owns the tick thread and the epoch loop around a compute function."""

    def __init__(self, registry: Registry, tick: TickConfig = TickConfig()):
        self.registry = registry
        self._tick = tick
        self._queue: list = []
        self._queue_lock = threading.Lock()
        self._wake = threading.Event()       # wakes the epoch loop
        self._tick_wake = threading.Event()  # interrupts the ticker's wait
        self._stop = threading.Event()
        self._ticker: Optional[threading.Thread] = None
        self.events: list = []
        self._event_subscribers: list = []
        self.tick_observer: Optional[Callable[[float], None]] = None
        registry.on_apply(lambda gen: self._wake.set())

    # -- configuration ------------------------------------------------

    def set_tick(self, config: TickConfig) -> TickConfig:
        if config.interval_ms <= 0:
            raise ValueError("tick interval must be positive")
        previous = self._tick
        self._tick = config
        self._tick_wake.set()  # re-arm the ticker with the new interval
        return previous

    @property
    def tick(self) -> TickConfig:
        return self._tick

    # -- update intake ------------------------------------------------

    def submit(self, batch: UpdateBatch):
        """Queue a batch; the next tick coalesces and applies everything
        queued since the previous tick as one batch (one restart)."""
        with self._queue_lock:
            self._queue.append(batch)

    def apply_update(self, batch: UpdateBatch) -> int:
        """Apply immediately, bypassing the tick queue."""
        return self.registry.apply(batch)

    # -- events ---------------------------------------------------------

    def subscribe(self, callback: Callable[[SteerEvent], None]):
        self._event_subscribers.append(callback)

    def _emit(self, kind: str, **fields):
        ev = SteerEvent(kind, time.perf_counter(), fields)
        self.events.append(ev)
        log.debug("%s %s", kind, fields)
        for cb in self._event_subscribers:
            try:
                cb(ev)
            except Exception:
                log.exception("event subscriber failed")

    # -- the tick ---------------------------------------------------------

    def _drain_queue(self) -> Optional[UpdateBatch]:
        with self._queue_lock:
            if not self._queue:
                return None
            batches, self._queue = self._queue, []
        return UpdateBatch.merge(batches)

    def _tick_loop(self):
        deadline = time.perf_counter()
        while not self._stop.is_set():
            cfg = self._tick
            if not cfg.enabled:
                self._tick_wake.clear()
                self._tick_wake.wait(0.5)
                deadline = time.perf_counter()
                continue
            # absolute deadlines keep the cadence independent of work time
            deadline += cfg.interval_ms / 1000.0
            now = time.perf_counter()
            if deadline > now:
                self._tick_wake.clear()
                self._tick_wake.wait(deadline - now)
            else:
                deadline = now  # overran; do not try to catch up
            if self._stop.is_set():
                return
            if self._tick is not cfg:
                deadline = time.perf_counter()  # interval changed, re-arm
            now = time.perf_counter()
            if self.tick_observer is not None:
                self.tick_observer(now)
            merged = self._drain_queue()
            if merged is not None:
                try:
                    self.registry.apply(merged)
                except BatchRejected as e:
                    log.warning("batch rejected: %s", e)
            self._watchdog(now)

    def _watchdog(self, now: float):
        ctx = self.registry._active_ctx
        if ctx is None or ctx._warned or ctx._ended:
            return
        limit = WATCHDOG_TICKS * self._tick.interval_ms / 1000.0
        if ctx.abort_requested and ctx.abort_at is not None:
            if now - ctx.abort_at > limit:
                ctx._warned = True
                self._emit("watchdog_warning", epoch=ctx.epoch,
                           reason="abort not honored")
                log.warning("epoch %d has not honored an abort for over "
                            "%d tick intervals", ctx.epoch, WATCHDOG_TICKS)
        elif not ctx._checked and now - ctx.started_at > limit:
            ctx._warned = True
            self._emit("watchdog_warning", epoch=ctx.epoch,
                       reason="no abort check observed")
            log.warning("epoch %d has never checked for abort in over "
                        "%d tick intervals", ctx.epoch, WATCHDOG_TICKS)

    # -- the epoch loop -----------------------------------------------

    def run_steered(self, compute: Callable[[EpochContext], Any],
                    stop: Optional[threading.Event] = None):
        """Run `compute` in an epoch loop until `stop` is set.

        Each pass snapshots the registry, runs compute under a fresh
        EpochContext, runs the cleanup hooks, and either restarts right away
        (abort) or blocks until the next applied update (normal completion).
        """
        if stop is None:
            stop = threading.Event()
        self._stop.clear()
        self.registry.seal()
        if self._tick.enabled and self._ticker is None:
            self._ticker = threading.Thread(
                target=self._tick_loop, name="steer-tick", daemon=True)
            self._ticker.start()
        try:
            while not stop.is_set():
                snap = self.registry.snapshot()
                ctx = EpochContext(snap.generation, snap.values())
                started = ctx.started_at
                receipts = self.registry.claim_receipts()
                self.registry.attach_context(ctx)
                self._emit(
                    "epoch_start", epoch=ctx.epoch,
                    restart_latency_us=[(started - r) * 1e6 for r in receipts])
                try:
                    result = compute(ctx)
                finally:
                    self.registry.detach_context(ctx)
                    ctx._run_cleanups()
                if stop.is_set():
                    return
                if ctx.abort_requested:
                    latency = (time.perf_counter() - ctx.abort_at) * 1e6
                    self._emit("epoch_abort", epoch=ctx.epoch,
                               latency_us=latency)
                    continue  # apply already advanced the registry
                iterations = getattr(result, "iterations", None)
                if iterations is None and isinstance(result, int):
                    iterations = result
                self._emit("epoch_complete", epoch=ctx.epoch,
                           iterations=iterations)
                # quiescent: wait for the next applied update (or stop)
                while not stop.is_set():
                    self._wake.clear()
                    if self.registry.generation > ctx.epoch:
                        break
                    self._wake.wait(0.5)
        finally:
            self.shutdown()

    def run_in_thread(self, compute, stop: threading.Event) -> threading.Thread:
        t = threading.Thread(
            target=self.run_steered, args=(compute, stop),
            name="steer-epochs", daemon=True)
        t.start()
        return t

    def shutdown(self):
        self._stop.set()
        self._tick_wake.set()
        self._wake.set()
        if self._ticker is not None:
            self._ticker.join(timeout=2)
            self._ticker = None
