"""Band-parallel solver backend.

The grid is split into horizontal bands, one per worker process. A
coordinator drives all workers through the same sweep sequence in
lockstep; because each sweep reads only the previous sweep's values,
the assembled result is identical to the serial solver bit for bit,
for any worker count.
"""

from .coordinator import (
    BroadcastStats,
    ClusterBackend,
    EpochOutcome,
    EpochSpec,
    FrameSnapshot,
    assemble_field,
    find_stragglers,
    parallel_solve,
)
from .topology import (
    Band,
    DeliveryReport,
    WorkerTopology,
    partition,
    plan_broadcast,
    relay_targets,
)

__all__ = [
    "Band",
    "BroadcastStats",
    "ClusterBackend",
    "DeliveryReport",
    "EpochOutcome",
    "EpochSpec",
    "FrameSnapshot",
    "WorkerTopology",
    "assemble_field",
    "find_stragglers",
    "parallel_solve",
    "partition",
    "plan_broadcast",
    "relay_targets",
]
