"""Computational steering for iterative solvers.

Register the parameters a user may touch, wrap the solver in the epoch loop,
and updates arriving over the wire interrupt and restart it within a bounded
latency.  Ships with a steerable 2D heat-conduction demo, an
interaction-driven grid hierarchy, a multi-worker back end, and a static
phase scheduler for octree task trees.
"""

from .bench import BenchReport, BenchSettings, benchmark_overhead
from .config import ServerConfig, load_config, parse_config
from .errors import (
    BatchRejected,
    ConsistencyError,
    LifecycleError,
    ProtocolError,
    RegistrationError,
    ScriptFailure,
    StartupError,
    SteerkitError,
    ThresholdBreach,
)
from .heat import (
    BoundaryPoint,
    Grid,
    HeatSource,
    Scenario,
    SolveResult,
    SolverConfig,
    gauss_seidel_sweep,
    rasterize,
    residual_norm,
    solve,
)
from .hierarchy import (
    InteractionClock,
    LevelPolicy,
    LevelSpec,
    choose_level,
    level_error,
    prolong,
    prolong_field,
    restrict,
    restrict_field,
)
from .scheduling import (
    Schedule,
    TaskNode,
    TaskTree,
    assign_phases,
    build_priority_lists,
    complete_octree,
    naive_level_schedule,
    parse_tree,
    phase_fullness,
    processing_order,
    schedule_tree,
    split_task,
    validate,
)
from .script import Script, Transcript, run_script
from .server import SteeringServer
from .steering import (
    EpochContext,
    Registry,
    RegistrySnapshot,
    SteerableVar,
    SteeringEngine,
    TickConfig,
    UpdateBatch,
    VarHandle,
    VarKind,
    apply_update,
    should_abort,
)
from .web import WebGateway

__version__ = "0.1.0"
