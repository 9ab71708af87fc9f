"""Row-band partitioning and the worker broadcast tree.

Everything here is pure arithmetic shared by the coordinator, the workers,
and the tests: which rows a worker owns, who relays an update to whom, and
what a broadcast costs.  The coordinator hands each update frame to worker 0
once; the workers fan it out along a k-ary tree among themselves, so the
W - 1 relay messages are spread over the tree instead of burdening one
sender.  A worker never relays to more than `fanout` peers.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Optional, Tuple


@dataclass(frozen=True)
class Band:
    """A contiguous run of grid rows owned by one worker."""

    start: int
    rows: int

    @property
    def stop(self) -> int:
        return self.start + self.rows


def partition(height: int, worker_count: int) -> List[Band]:
    """Split `height` rows into `worker_count` contiguous bands.

    Bands cover the rows exactly, in order, and differ in size by at most
    one; the leftover rows go to the lowest-ranked workers.
    """
    if worker_count < 1:
        raise ValueError("worker count must be at least 1")
    if worker_count > height:
        raise ValueError(
            f"cannot split {height} rows across {worker_count} workers")
    base, extra = divmod(height, worker_count)
    bands = []
    start = 0
    for rank in range(worker_count):
        rows = base + (1 if rank < extra else 0)
        bands.append(Band(start, rows))
        start += rows
    return bands


@dataclass(frozen=True)
class WorkerTopology:
    """Band assignment plus the relay tree for one worker fleet."""

    worker_count: int
    fanout: int
    bands: Tuple[Band, ...]

    @classmethod
    def build(cls, height: int, worker_count: int,
              fanout: int = 4) -> "WorkerTopology":
        if fanout < 2:
            raise ValueError("fanout must be at least 2")
        return cls(worker_count, fanout, tuple(partition(height, worker_count)))

    def parent(self, rank: int) -> Optional[int]:
        """Relay parent in the tree; None for rank 0 (fed by the coordinator)."""
        self._check(rank)
        if rank == 0:
            return None
        return (rank - 1) // self.fanout

    def children(self, rank: int) -> List[int]:
        """Ranks this worker relays to.  Parent ids are always smaller than
        child ids, so each level of the tree is already informed when it
        starts sending."""
        self._check(rank)
        first = rank * self.fanout + 1
        return list(range(first, min(first + self.fanout, self.worker_count)))

    def neighbors(self, rank: int) -> Tuple[Optional[int], Optional[int]]:
        """Band neighbours (above, below) for halo exchange."""
        self._check(rank)
        above = rank - 1 if rank > 0 else None
        below = rank + 1 if rank < self.worker_count - 1 else None
        return above, below

    @property
    def depth(self) -> int:
        """Relay rounds needed in the worst case: ceil(log_fanout W).

        The realized hop count of a given fleet can be smaller (a ragged
        last level sits higher up), never larger.
        """
        d = 0
        reach = 1
        while reach < self.worker_count:
            reach *= self.fanout
            d += 1
        return d

    def _check(self, rank: int):
        if not 0 <= rank < self.worker_count:
            raise ValueError(f"rank {rank} out of range")


def relay_targets(topology: WorkerTopology, rank: int,
                  dead: FrozenSet[int] = frozenset()) -> List[int]:
    """Who `rank` forwards an update to, skipping over dead peers.

    A dead child's own children are taken over by this node (their
    grandparent), recursively, so the subtree below a failure keeps
    receiving updates.
    """
    out: List[int] = []
    for c in topology.children(rank):
        if c in dead:
            out.extend(relay_targets(topology, c, dead))
        else:
            out.append(c)
    return out


@dataclass(frozen=True)
class DeliveryReport:
    """Outcome of one broadcast: who got it, what it cost."""

    messages: int                 # relay sends; the seeding hand-off excluded
    delivered: Tuple[int, ...]    # ranks in receive order
    unreachable: Tuple[int, ...]  # dead ranks skipped over
    max_sends: int                # busiest sender, coordinator included
    depth: int                    # realized hops below worker 0


def plan_broadcast(topology: WorkerTopology,
                   dead: Iterable[int] = ()) -> DeliveryReport:
    """Walk one broadcast through the tree and account for it.

    Every delivery costs one send; the coordinator's hand-off that seeds the
    tree is not counted as a relay message, which leaves exactly W - 1
    messages for a healthy fleet of W workers.  The same routing rule the
    real workers use (relay_targets) drives the walk, so instrumented counts
    from live runs can be checked against this plan.
    """
    deadset = frozenset(dead)
    entry = ([0] if 0 not in deadset
             else relay_targets(topology, 0, deadset))
    order: List[int] = []
    hops: Dict[int, int] = {}
    sends: Dict[object, int] = {}
    queue: deque = deque()
    for dst in entry:
        sends["coordinator"] = sends.get("coordinator", 0) + 1
        queue.append((dst, 0))
    while queue:
        rank, hop = queue.popleft()
        order.append(rank)
        hops[rank] = hop
        for dst in relay_targets(topology, rank, deadset):
            sends[rank] = sends.get(rank, 0) + 1
            queue.append((dst, hop + 1))
    deliveries = len(order)
    return DeliveryReport(
        messages=max(0, deliveries - 1),
        delivered=tuple(order),
        unreachable=tuple(sorted(deadset & set(range(topology.worker_count)))),
        max_sends=max(sends.values(), default=0),
        depth=max(hops.values(), default=0),
    )
