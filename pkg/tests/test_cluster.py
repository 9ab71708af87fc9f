import random
import threading
import time

import numpy as np
import pytest

from steerkit.cluster import (
    Band,
    ClusterBackend,
    EpochSpec,
    WorkerTopology,
    assemble_field,
    find_stragglers,
    parallel_solve,
    partition,
    plan_broadcast,
    relay_targets,
)
from steerkit.cluster import wire
from steerkit.errors import ConsistencyError, ProtocolError
from steerkit.heat import SolverConfig, jacobi_sweep, rasterize, solve_jacobi
from steerkit.steering import EpochContext


# -- band partition -----------------------------------------------------


def test_partition_even_split():
    bands = partition(300, 4)
    assert bands == [Band(0, 75), Band(75, 75), Band(150, 75), Band(225, 75)]


def test_partition_remainder_goes_to_low_ranks():
    assert [b.rows for b in partition(10, 3)] == [4, 3, 3]
    assert [b.start for b in partition(10, 3)] == [0, 4, 7]


def test_partition_single_worker_owns_everything():
    assert partition(64, 1) == [Band(0, 64)]


def test_partition_rejects_bad_counts():
    with pytest.raises(ValueError):
        partition(10, 11)
    with pytest.raises(ValueError):
        partition(10, 0)


def test_partition_covers_grid_contiguously():
    rng = random.Random(401)
    for _ in range(200):
        height = rng.randint(1, 500)
        count = rng.randint(1, height)
        bands = partition(height, count)
        assert len(bands) == count
        assert bands[0].start == 0
        assert bands[-1].stop == height
        for a, b in zip(bands, bands[1:]):
            assert a.stop == b.start
        sizes = [b.rows for b in bands]
        assert max(sizes) - min(sizes) <= 1
        assert sizes == sorted(sizes, reverse=True)


# -- broadcast tree -----------------------------------------------------


def test_tree_parents_precede_children():
    for count in range(1, 40):
        topo = WorkerTopology.build(count, count, fanout=3)
        for rank in range(1, count):
            parent = topo.parent(rank)
            assert parent is not None and parent < rank
            assert rank in topo.children(parent)
    assert WorkerTopology.build(8, 8, fanout=4).parent(0) is None


def test_single_worker_broadcast_needs_no_messages():
    report = plan_broadcast(WorkerTopology.build(1, 1, fanout=4))
    assert report.messages == 0
    assert report.delivered == (0,)


def test_sixteen_workers_fanout_four():
    report = plan_broadcast(WorkerTopology.build(16, 16, fanout=4))
    assert report.messages == 15
    assert report.max_sends == 4
    assert report.depth == 2
    assert sorted(report.delivered) == list(range(16))


def test_five_workers_fanout_four():
    topo = WorkerTopology.build(5, 5, fanout=4)
    report = plan_broadcast(topo)
    assert report.messages == 4
    # worst case is two relay rounds even though this shape needs one
    assert topo.depth == 2
    assert report.depth <= topo.depth


def test_broadcast_cost_is_workers_minus_one():
    rng = random.Random(402)
    for count in range(1, 65):
        fanout = rng.randint(2, 6)
        report = plan_broadcast(WorkerTopology.build(count, count, fanout))
        assert report.messages == count - 1
        assert sorted(report.delivered) == list(range(count))
        assert report.max_sends <= max(fanout, 1)
        assert report.depth <= WorkerTopology.build(count, count, fanout).depth


def test_relay_targets_follow_tree_children():
    topo = WorkerTopology.build(16, 16, fanout=4)
    assert relay_targets(topo, 0) == [1, 2, 3, 4]
    assert relay_targets(topo, 1) == [5, 6, 7, 8]
    assert relay_targets(topo, 5) == []


def test_dead_child_is_skipped_and_its_children_adopted():
    topo = WorkerTopology.build(16, 16, fanout=4)
    # rank 1's children are 5..8; with 1 dead they become rank 0's problem
    assert relay_targets(topo, 0, frozenset({1})) == [5, 6, 7, 8, 2, 3, 4]
    report = plan_broadcast(topo, dead={1})
    assert report.unreachable == (1,)
    assert sorted(report.delivered) == [r for r in range(16) if r != 1]
    assert report.messages == 14


def test_adoption_recurses_through_dead_chains():
    topo = WorkerTopology.build(21, 21, fanout=4)
    # 1 and its child 5 both dead: 5's children (ranks 21..) do not exist,
    # so 0 inherits 6, 7, 8 directly
    assert relay_targets(topo, 0, frozenset({1, 5})) == [6, 7, 8, 2, 3, 4]


def test_every_survivor_still_delivered_once():
    rng = random.Random(403)
    for _ in range(100):
        count = rng.randint(2, 48)
        fanout = rng.randint(2, 5)
        dead = set(rng.sample(range(count), rng.randint(0, count // 3)))
        topo = WorkerTopology.build(count, count, fanout)
        report = plan_broadcast(topo, dead=dead)
        alive = [r for r in range(count) if r not in dead]
        assert sorted(report.delivered) == alive
        assert report.unreachable == tuple(sorted(dead))


# -- internal wire format -------------------------------------------------


def _roundtrip(msg):
    blob = wire.encode(msg)
    reader = wire.FrameReader()
    msgs, frames = reader.feed(blob)
    assert frames == [blob]
    assert len(msgs) == 1
    return msgs[0]


def test_wire_roundtrips_every_message_type():
    rng = np.random.default_rng(404)
    row = rng.normal(size=12)
    samples = [
        wire.Register(band_start=25, band_rows=25, relay_port=43210),
        wire.Setup(rank=2, worker_count=4, fanout=4, width=80, height=100,
                   relay_ports=(40001, 40002, 40003, 40004)),
        wire.EpochStart(7, 80, 100, 5000, 1e-4, "border 10\n"),
        wire.EpochStart(8, 12, 12, 10, 0.5, "border 0\n",
                        warm_field=rng.normal(size=(12, 12))),
        wire.EpochReady(epoch=7, relays=3),
        wire.SweepReport(7, 19, 0.125, row, row[::-1].copy()),
        wire.Verdict(7, 19, wire.CONTINUE, ghost_top=row, ghost_bottom=None),
        wire.Verdict(7, 19, wire.CONTINUE, None, row),
        wire.Verdict(7, 19, wire.DONE),
        wire.Verdict(3, 0, wire.ABORT),
        wire.Gather(epoch=7),
        wire.BandData(7, 19, 25, 3, 12, rng.normal(size=36)),
        wire.Halt(),
    ]
    for msg in samples:
        assert _roundtrip(msg) == msg


def test_wire_reader_handles_arbitrary_chunking():
    rng = np.random.default_rng(405)
    pyrng = random.Random(405)
    msgs = [wire.EpochStart(1, 30, 30, 100, 1e-3, "border 5\n"),
            wire.EpochReady(1, 0),
            wire.SweepReport(1, 0, 2.5, rng.normal(size=30),
                             rng.normal(size=30)),
            wire.Halt()]
    blob = b"".join(wire.encode(m) for m in msgs)
    for _ in range(50):
        reader = wire.FrameReader()
        out = []
        i = 0
        while i < len(blob):
            j = min(len(blob), i + pyrng.randint(1, 37))
            got, frames = reader.feed(blob[i:j])
            for m, f in zip(got, frames):
                assert wire.encode(m) == f  # relayed bytes stay verbatim
            out.extend(got)
            i = j
        assert out == msgs


def test_wire_rejects_foreign_bytes():
    reader = wire.FrameReader()
    with pytest.raises(ProtocolError):
        reader.feed(b"GET / HTTP/1.1\r\n\r\n")
    reader = wire.FrameReader()
    blob = bytearray(wire.encode(wire.Gather(1)))
    blob[6] = 0xEE  # unknown frame type
    with pytest.raises(ProtocolError):
        reader.feed(bytes(blob))


# -- field assembly -------------------------------------------------------


def _band_message(rank, band, width, value, epoch=3, sweep=11):
    data = np.full(band.rows * width, value, dtype=np.float64)
    return wire.BandData(epoch, sweep, band.start, band.rows, width, data)


def test_assemble_orders_bands_by_rank():
    bands = partition(10, 4)
    got = {rank: _band_message(rank, band, 6, float(rank))
           for rank, band in enumerate(bands)}
    field = assemble_field(got, bands, (10, 6), expect_epoch=3,
                           expect_sweep=11)
    assert field.shape == (10, 6)
    assert field.size == 60
    for rank, band in enumerate(bands):
        assert (field[band.start:band.stop] == rank).all()


def test_assemble_refuses_mixed_epochs():
    bands = partition(10, 2)
    got = {0: _band_message(0, bands[0], 6, 0.0, epoch=3),
           1: _band_message(1, bands[1], 6, 1.0, epoch=4)}
    with pytest.raises(ConsistencyError):
        assemble_field(got, bands, (10, 6))


def test_assemble_refuses_mixed_sweeps():
    bands = partition(10, 2)
    got = {0: _band_message(0, bands[0], 6, 0.0, sweep=11),
           1: _band_message(1, bands[1], 6, 1.0, sweep=12)}
    with pytest.raises(ConsistencyError):
        assemble_field(got, bands, (10, 6))


def test_assemble_refuses_wrong_band_geometry():
    bands = partition(10, 2)
    got = {0: _band_message(0, bands[0], 6, 0.0),
           1: _band_message(1, Band(4, 6), 6, 1.0)}  # overlaps rank 0
    with pytest.raises(ConsistencyError):
        assemble_field(got, bands, (10, 6))


# -- straggler detection --------------------------------------------------


def test_stragglers_need_a_fleet():
    assert find_stragglers({0: 5.0}) == []
    assert find_stragglers({}) == []


def test_straggler_is_ten_times_median():
    times = {0: 0.010, 1: 0.011, 2: 0.009, 3: 0.200}
    assert find_stragglers(times) == [3]
    times[3] = 0.05  #5x: slow but tolerated
    assert find_stragglers(times) == []


# -- partition invariance (the property the cluster rides on) -------------


def test_band_sweeps_reproduce_the_full_sweep_bitwise():
    rng = np.random.default_rng(406)
    for _ in range(25):
        height = int(rng.integers(4, 40))
        width = int(rng.integers(3, 30))
        old = rng.normal(scale=50.0, size=(height, width))
        constrained = (rng.random((height, width)) < 0.2).astype(np.uint8)
        full = old.copy()
        change_full = jacobi_sweep(old, full, constrained)
        for count in (2, 3, 5, height):
            if count > height:
                continue
            banded = old.copy()
            changes = []
            for band in partition(height, count):
                lo = max(band.start - 1, 0)
                hi = min(band.stop + 1, height)
                changes.append(jacobi_sweep(old[lo:hi], banded[lo:hi],
                                            constrained[lo:hi]))
            assert np.array_equal(full, banded)
            assert max(changes) == change_full


# -- live fleets ----------------------------------------------------------

GRID = 40
CONFIG = SolverConfig(max_iter=250, tolerance=1e-12)


@pytest.fixture(scope="module", autouse=True)
def warm_kernel_cache(reference_scenario):
    # compile once in this process so spawned workers load from the disk
    # cache instead of compiling concurrently
    grid = rasterize(reference_scenario, 8, 8)
    jacobi_sweep(grid.data, grid.data.copy(), grid.constrained)


@pytest.fixture(scope="module")
def serial_field(reference_scenario):
    grid = rasterize(reference_scenario, GRID, GRID)
    result = solve_jacobi(grid, CONFIG)
    return result, grid.data


def test_one_worker_matches_serial_solve_bitwise(reference_scenario,
                                                 serial_field):
    result, field = serial_field
    got, grid = parallel_solve(reference_scenario, GRID, GRID, CONFIG,
                               worker_count=1)
    assert got.iterations == result.iterations
    assert got.converged == result.converged
    assert np.array_equal(grid, field)


@pytest.mark.parametrize("count", [2, 4])
def test_more_workers_change_nothing(reference_scenario, serial_field,
                                     count):
    _, field = serial_field
    _, grid = parallel_solve(reference_scenario, GRID, GRID, CONFIG,
                             worker_count=count)
    assert np.array_equal(grid, field)


def test_live_relay_counts_match_the_tree(reference_scenario):
    # fanout 2 over 9 workers forces multi-hop relaying: 0 -> 1,2 -> 3..6 ...
    backend = ClusterBackend(worker_count=9, fanout=2)
    try:
        backend.start(GRID, GRID)
        spec = EpochSpec(GRID, GRID, reference_scenario.format(), 50, 1e-12)
        outcome = backend.run_epoch(EpochContext(1, {}), spec)
        assert outcome.iterations == 50
        assert backend.last_broadcast.relays == 8
    finally:
        backend.shutdown()


def test_injected_update_restarts_the_whole_fleet(reference_scenario):
    moved = reference_scenario.with_entity("heat_source", "move", 1,
                                           0.25, 0.25, 80.0)
    backend = ClusterBackend(worker_count=4)
    try:
        backend.start(70, 70)
        ctx = EpochContext(1, {})
        threading.Timer(1.2, ctx._signal_abort).start()
        out1 = backend.run_epoch(
            ctx, EpochSpec(70, 70, reference_scenario.format(), 10**6, 0.0))
        assert out1.aborted
        # every worker joins the new epoch; the gather inside run_epoch
        # would raise ConsistencyError if any rank were still on epoch 1
        out2 = backend.run_epoch(
            EpochContext(2, {}), EpochSpec(70, 70, moved.format(), 40, 1e-12))
        assert not out2.aborted
        assert out2.epoch == 2
        assert out2.iterations == 40
    finally:
        backend.shutdown()
    serial = rasterize(moved, 70, 70)
    solve_jacobi(serial, SolverConfig(max_iter=40, tolerance=1e-12))
    assert np.array_equal(serial.data, out2.grid)
