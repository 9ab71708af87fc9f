import gc
import random
import threading
import time
import weakref

import numpy as np
import pytest

from steerkit.errors import BatchRejected, LifecycleError, RegistrationError
from steerkit.steering import (
    EpochContext,
    Registry,
    SteeringEngine,
    TickConfig,
    UpdateBatch,
    VarKind,
    apply_update,
    should_abort,
)


def make_registry(**vars_):
    reg = Registry()
    for name, (kind, initial) in vars_.items():
        reg.register(name, kind, initial)
    return reg


# -- registry ---------------------------------------------------------------

def test_register_all_kinds_and_read_back():
    reg = Registry()
    h_int = reg.register("count", VarKind.INT, 3)
    h_float = reg.register("tol", VarKind.FLOAT, 2)  # int ok for FLOAT
    h_bool = reg.register("on", VarKind.BOOL, True)
    h_point = reg.register("spot", VarKind.POINT2D, (0.25, 0.5))
    h_blob = reg.register("scene", VarKind.BLOB, "border 10\n")
    assert h_int.get() == 3
    assert h_float.get() == 2.0 and isinstance(h_float.get(), float)
    assert h_bool.get() is True
    assert h_point.get() == (0.25, 0.5)
    assert h_blob.get() == b"border 10\n"
    assert all(h.epoch == 0 for h in (h_int, h_float, h_bool, h_point, h_blob))


def test_register_rejects_bad_input():
    reg = Registry()
    reg.register("x", VarKind.INT, 1)
    with pytest.raises(RegistrationError):
        reg.register("x", VarKind.INT, 2)  # duplicate
    with pytest.raises(RegistrationError):
        reg.register("y", "int", 1)  # kind must be a VarKind
    with pytest.raises(RegistrationError):
        reg.register("z", VarKind.INT, 1.5)  # bad initial
    with pytest.raises(RegistrationError):
        reg.register("b", VarKind.BOOL, 1)  # int is not bool
    reg.seal()
    with pytest.raises(RegistrationError):
        reg.register("late", VarKind.INT, 1)


def test_kind_names_round_trip():
    for kind in VarKind:
        assert VarKind.from_name(kind.name.lower()) == kind
    with pytest.raises(RegistrationError):
        VarKind.from_name("quaternion")


def test_apply_bumps_generations_and_var_epochs():
    reg = make_registry(a=(VarKind.INT, 0), b=(VarKind.INT, 0))
    assert reg.generation == 0
    gen = reg.apply(UpdateBatch([("a", 5)]))
    assert gen == 1
    assert reg.value("a") == 5 and reg.value("b") == 0
    snap = reg.snapshot()
    assert snap.vars["a"].epoch == 1
    assert snap.vars["b"].epoch == 0
    reg.apply(UpdateBatch([("a", 6), ("b", 7)]))
    assert reg.generation == 2
    assert reg.snapshot().vars["a"].epoch == 2


def test_apply_empty_batch_is_noop():
    reg = make_registry(a=(VarKind.INT, 0))
    assert reg.apply(UpdateBatch([])) == 0
    assert reg.generation == 0


def test_apply_rejection_is_atomic():
    reg = make_registry(a=(VarKind.INT, 1), b=(VarKind.INT, 2))
    with pytest.raises(BatchRejected):
        reg.apply(UpdateBatch([("a", 10), ("nope", 1)]))
    with pytest.raises(BatchRejected):
        reg.apply(UpdateBatch([("a", 10), ("b", "wrong kind")]))
    assert reg.generation == 0
    assert reg.value("a") == 1 and reg.value("b") == 2


def test_snapshot_is_isolated_from_later_updates():
    reg = make_registry(a=(VarKind.INT, 1))
    before = reg.snapshot()
    reg.apply(UpdateBatch([("a", 99)]))
    assert before.vars["a"].value == 1
    assert before.values() == {"a": 1}
    assert reg.snapshot().vars["a"].value == 99


def test_concurrent_readers_never_see_partial_batches():
    reg = make_registry(a=(VarKind.INT, 0), b=(VarKind.INT, 1000))
    stop = threading.Event()
    violations = []

    def reader():
        while not stop.is_set():
            vals = reg.snapshot().values()
            if vals["a"] + vals["b"] != 1000:
                violations.append(vals)
                return

    threads = [threading.Thread(target=reader) for _ in range(4)]
    for t in threads:
        t.start()
    rng = random.Random(4242)
    for _ in range(4000):
        k = rng.randrange(1001)
        reg.apply(UpdateBatch([("a", k), ("b", 1000 - k)]))
    stop.set()
    for t in threads:
        t.join(timeout=5)
    assert violations == []
    assert reg.generation == 4000


def test_merge_last_writer_wins_and_keeps_receipts():
    b1 = UpdateBatch([("a", 1), ("b", 2)], received_at=10.0)
    b2 = UpdateBatch([("a", 3)], received_at=11.0)
    b3 = UpdateBatch([("c", 4), ("a", 5)], received_at=9.5)
    merged = UpdateBatch.merge([b1, b2, b3])
    assert dict(merged.updates) == {"a": 5, "b": 2, "c": 4}
    assert merged.received_at == 9.5
    assert sorted(merged.coalesced_from) == [9.5, 10.0, 11.0]


def test_apply_update_signals_running_epoch():
    reg = make_registry(a=(VarKind.INT, 0))
    reg.seal()
    ctx = EpochContext(reg.generation, reg.snapshot().values())
    reg.attach_context(ctx)
    assert not should_abort(ctx)
    apply_update(UpdateBatch([("a", 1)]), reg)
    assert should_abort(ctx)
    assert ctx.abort_cell[0] == 1
    assert ctx.abort_at is not None
    reg.detach_context(ctx)


# -- epoch context -----------------------------------------------------------

def test_cleanup_hooks_run_in_reverse_order():
    ctx = EpochContext(0, {})
    order = []
    ctx.register_cleanup(lambda: order.append("first"))
    ctx.register_cleanup(lambda: order.append("second"))
    ctx.register_cleanup(lambda: order.append("third"))
    ctx._run_cleanups()
    assert order == ["third", "second", "first"]
    with pytest.raises(LifecycleError):
        ctx.register_cleanup(lambda: None)


def test_failing_cleanup_does_not_skip_the_rest():
    ctx = EpochContext(0, {})
    order = []
    ctx.register_cleanup(lambda: order.append("inner"))
    ctx.register_cleanup(lambda: 1 / 0)
    ctx.register_cleanup(lambda: order.append("outer"))
    ctx._run_cleanups()
    assert order == ["outer", "inner"]


def test_should_abort_is_cheap():
    ctx = EpochContext(0, {})
    n = 1_000_000
    t0 = time.perf_counter()
    for _ in range(n):
        should_abort(ctx)
    per_call = (time.perf_counter() - t0) / n
    assert per_call < 5e-7, f"should_abort costs {per_call * 1e9:.0f} ns"


# -- engine ------------------------------------------------------------------

def engine_with(reg, interval_ms=5.0, enabled=True):
    return SteeringEngine(reg, TickConfig(interval_ms, enabled))


def events_of(engine, kind):
    return [e for e in engine.events if e.kind == kind]


def test_set_tick_swaps_and_returns_previous():
    engine = engine_with(make_registry(), interval_ms=5.0)
    prev = engine.set_tick(TickConfig(interval_ms=1.0))
    assert prev.interval_ms == 5.0
    assert engine.tick.interval_ms == 1.0
    with pytest.raises(ValueError):
        TickConfig(interval_ms=0)
    with pytest.raises(ValueError):
        TickConfig(interval_ms=-3)


def test_submitted_batches_coalesce_in_the_queue():
    engine = engine_with(make_registry(a=(VarKind.INT, 0)), enabled=False)
    for k in range(100):
        engine.submit(UpdateBatch([("a", k)], received_at=float(k)))
    merged = engine._drain_queue()
    assert dict(merged.updates) == {"a": 99}
    assert len(merged.coalesced_from) == 100
    assert engine._drain_queue() is None


def test_ticker_applies_queued_updates():
    reg = make_registry(a=(VarKind.INT, 0))
    engine = engine_with(reg, interval_ms=5.0)
    stop = threading.Event()

    def compute(ctx):
        while not should_abort(ctx) and not stop.is_set():
            time.sleep(0.001)
        return 0

    def receipts():
        starts = events_of(engine, "epoch_start")
        return sum(len(e.fields["restart_latency_us"]) for e in starts)

    t = engine.run_in_thread(compute, stop)
    try:
        engine.submit(UpdateBatch([("a", 41)]))
        engine.submit(UpdateBatch([("a", 42)]))
        # wait for the restarted epoch to claim the receipts; stopping any
        # earlier races the engine out of the epoch_start that carries them
        deadline = time.time() + 2
        while receipts() < 2 and time.time() < deadline:
            time.sleep(0.005)
        assert reg.value("a") == 42
    finally:
        stop.set()
        t.join(timeout=5)
    # back-to-back submissions coalesce (a tick boundary between the two
    # calls is possible, so allow the split) and no receipt is lost
    assert reg.generation in (1, 2)
    assert receipts() == 2


def run_epochs(reg, engine, n_aborts, on_epoch=None):
    """Drive the engine through n_aborts abort-restart cycles by direct
    applies, handshaking with the compute function per epoch."""
    started = threading.Event()
    stop = threading.Event()

    def compute(ctx):
        if on_epoch is not None:
            on_epoch(ctx)
        started.set()
        while not should_abort(ctx) and not stop.is_set():
            time.sleep(0)
        return 0

    t = engine.run_in_thread(compute, stop)
    for k in range(n_aborts):
        assert started.wait(timeout=10)
        started.clear()
        engine.apply_update(UpdateBatch([("a", k)]))
    assert started.wait(timeout=10)  # the post-abort epoch is running
    stop.set()
    t.join(timeout=10)
    assert not t.is_alive()
    return engine


def test_epochs_restart_on_abort_and_stay_monotonic():
    reg = make_registry(a=(VarKind.INT, 0))
    engine = engine_with(reg, enabled=False)
    seen = []
    run_epochs(reg, engine, 5, on_epoch=lambda ctx: seen.append(ctx.epoch))
    assert seen == sorted(seen)
    assert len(set(seen)) == len(seen)
    assert seen[0] == 0 and seen[-1] == 5
    assert len(events_of(engine, "epoch_abort")) == 5
    # each abort latency was measured from the apply
    for ev in events_of(engine, "epoch_abort"):
        assert ev.fields["latency_us"] >= 0


def test_abort_storm_leaks_no_contexts_and_runs_every_hook_once():
    reg = make_registry(a=(VarKind.INT, 0))
    engine = engine_with(reg, enabled=False)
    refs = []
    hook_runs = []

    def on_epoch(ctx):
        refs.append(weakref.ref(ctx))
        epoch = ctx.epoch
        ctx.register_cleanup(lambda: hook_runs.append((epoch, "a")))
        ctx.register_cleanup(lambda: hook_runs.append((epoch, "b")))

    run_epochs(reg, engine, 300, on_epoch=on_epoch)
    assert len(refs) == 301  # initial epoch plus one per abort
    # every epoch ran both hooks exactly once, LIFO
    per_epoch = {}
    for epoch, tag in hook_runs:
        per_epoch.setdefault(epoch, []).append(tag)
    assert all(tags == ["b", "a"] for tags in per_epoch.values())
    assert len(per_epoch) == 301
    del engine, reg
    gc.collect()
    alive = [r for r in refs if r() is not None]
    assert len(alive) <= 2, f"{len(alive)} epoch contexts still alive"


def test_quiescent_engine_restarts_on_update():
    reg = make_registry(a=(VarKind.INT, 0))
    engine = engine_with(reg, enabled=False)
    stop = threading.Event()
    epochs = []
    ran = threading.Event()

    def compute(ctx):
        epochs.append(ctx.epoch)
        ran.set()
        return 7

    t = engine.run_in_thread(compute, stop)
    try:
        assert ran.wait(timeout=5)
        ran.clear()
        time.sleep(0.2)
        assert epochs == [0]  # quiescent: no update, no re-run
        engine.apply_update(UpdateBatch([("a", 1)]))
        assert ran.wait(timeout=5)
        assert epochs == [0, 1]
        completes = events_of(engine, "epoch_complete")
        assert completes and completes[0].fields["iterations"] == 7
    finally:
        stop.set()
        engine.apply_update(UpdateBatch([("a", 2)]))  # unblock the wait
        t.join(timeout=5)


def test_watchdog_flags_unhonored_abort():
    reg = make_registry(a=(VarKind.INT, 0))
    engine = engine_with(reg, interval_ms=1.0)  # limit: 100 ticks = 0.1 s
    stop = threading.Event()
    first = {"done": False}

    def compute(ctx):
        if not first["done"]:
            first["done"] = True
            deadline = time.perf_counter() + 0.4
            while time.perf_counter() < deadline:  # ignore the abort
                time.sleep(0.01)
        else:
            stop.set()
        return 0

    t = engine.run_in_thread(compute, stop)
    time.sleep(0.05)
    engine.apply_update(UpdateBatch([("a", 1)]))
    t.join(timeout=10)
    warnings = events_of(engine, "watchdog_warning")
    assert len(warnings) == 1
    assert warnings[0].fields["reason"] == "abort not honored"


def test_watchdog_flags_epoch_that_never_checks():
    reg = make_registry(a=(VarKind.INT, 0))
    engine = engine_with(reg, interval_ms=1.0)
    stop = threading.Event()

    def compute(ctx):
        time.sleep(0.3)  # never calls should_abort
        stop.set()
        return 0

    t = engine.run_in_thread(compute, stop)
    t.join(timeout=10)
    warnings = events_of(engine, "watchdog_warning")
    assert len(warnings) == 1
    assert warnings[0].fields["reason"] == "no abort check observed"


def test_watchdog_stays_quiet_for_a_responsive_epoch():
    reg = make_registry(a=(VarKind.INT, 0))
    engine = engine_with(reg, interval_ms=1.0)
    stop = threading.Event()

    def compute(ctx):
        deadline = time.perf_counter() + 0.3
        while time.perf_counter() < deadline:
            if should_abort(ctx):
                return 0
            time.sleep(0.005)
        stop.set()
        return 0

    t = engine.run_in_thread(compute, stop)
    t.join(timeout=10)
    assert events_of(engine, "watchdog_warning") == []


def test_tick_cadence_holds_under_compute_load():
    from steerkit.heat import SolverConfig, gauss_seidel_sweep, rasterize
    from steerkit.heat import Scenario, solve

    scenario = Scenario.parse("border 10\nsource 1 0.3 0.4 100\n")
    gauss_seidel_sweep(rasterize(scenario, 16, 16))  # compile outside timing

    reg = make_registry(a=(VarKind.INT, 0))
    engine = engine_with(reg, interval_ms=5.0)
    ticks = []
    engine.tick_observer = ticks.append
    stop = threading.Event()

    def compute(ctx):
        grid = rasterize(scenario, 150, 150)
        solve(grid, SolverConfig(max_iter=100_000, tolerance=1e-12),
              abort_check=lambda: stop.is_set())
        return 0

    t = engine.run_in_thread(compute, stop)
    time.sleep(2.0)
    stop.set()
    t.join(timeout=10)
    gaps = np.diff(ticks)
    assert len(gaps) > 200
    p99 = float(np.percentile(gaps, 99))
    assert p99 <= 0.010, f"p99 tick gap {p99 * 1e3:.2f} ms"
