"""Steering overhead measurement: the reference solve with the tick thread
at several intervals against the same solve with no instrumentation at all.

The workload is a fixed sweep budget on the packaged reference scenario, so
every sample does identical arithmetic; only the steering machinery differs.
Samples are interleaved round-robin across settings to keep slow machine
drift (thermal, frequency scaling) out of the ratios, and the median of the
repetitions is compared.  Timing brackets the solve call alone; engine setup
and teardown happen outside the clock.
"""

from __future__ import annotations

import json
import statistics
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .errors import ThresholdBreach
from .heat import Scenario, SolverConfig, rasterize, solve
from .steering import Registry, SteeringEngine, TickConfig

DISABLED = "disabled"

# bounds enforced with --enforce, in percent over the disabled baseline
DEFAULT_LIMITS = {5.0: 10.0, 1.0: 15.0}


@dataclass(frozen=True)
class BenchSettings:
    grid: int = 300
    sweeps: int = 1200
    repetitions: int = 5
    duration: float = 30.0
    ticks: Tuple[float, ...] = (1.0, 2.0, 5.0)
    scenario_text: Optional[str] = None

    def __post_init__(self):
        if self.duration < 30.0:
            raise ValueError("benchmark duration must be at least 30 s")
        if self.repetitions < 1 or self.sweeps < 1 or self.grid < 3:
            raise ValueError("benchmark settings out of range")


@dataclass
class BenchReport:
    settings: BenchSettings
    solves_per_sample: int
    samples: Dict[str, List[float]]  # setting label -> per-sample seconds
    medians: Dict[str, float] = field(default_factory=dict)
    overhead_pct: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.medians:
            self.medians = {k: statistics.median(v)
                            for k, v in self.samples.items()}
        if not self.overhead_pct:
            base = self.medians[DISABLED]
            self.overhead_pct = {
                k: 100.0 * (m / base - 1.0)
                for k, m in self.medians.items() if k != DISABLED}

    def as_dict(self) -> dict:
        return {
            "grid": self.settings.grid,
            "sweeps_per_solve": self.settings.sweeps,
            "solves_per_sample": self.solves_per_sample,
            "repetitions": self.settings.repetitions,
            "samples_s": self.samples,
            "median_s": self.medians,
            "baseline_s": self.medians[DISABLED],
            "overhead_pct": self.overhead_pct,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def render_text(self) -> str:
        lines = [
            f"steering overhead, {self.settings.grid}x{self.settings.grid} "
            f"reference scenario, {self.settings.sweeps} sweeps/solve, "
            f"{self.solves_per_sample} solves/sample, "
            f"median of {self.settings.repetitions}",
            f"  {DISABLED:>8s}  {self.medians[DISABLED]:8.3f} s  (baseline)",
        ]
        for label in self._tick_labels():
            lines.append(f"  {label:>8s}  {self.medians[label]:8.3f} s  "
                         f"{self.overhead_pct[label]:+6.2f}%")
        return "\n".join(lines)

    def _tick_labels(self) -> List[str]:
        return [_tick_label(t) for t in sorted(self.settings.ticks)]


def _tick_label(tick_ms: float) -> str:
    return f"{tick_ms:g}ms"


def _reference_scenario(settings: BenchSettings) -> Scenario:
    if settings.scenario_text is not None:
        return Scenario.parse(settings.scenario_text)
    from importlib import resources
    text = resources.files("steerkit.data").joinpath(
        "reference.scn").read_text()
    return Scenario.parse(text)


class _Workload:
    """One benchmark sample: a fixed number of full-budget solves."""

    def __init__(self, scenario: Scenario, settings: BenchSettings,
                 solves: int):
        self.scenario = scenario
        self.grid = settings.grid
        # a tolerance no residual reaches, so every solve runs the full budget
        self.config = SolverConfig(max_iter=settings.sweeps, tolerance=1e-300)
        self.solves = solves

    def run(self, abort_check) -> float:
        total = 0.0
        for _ in range(self.solves):
            grid = rasterize(self.scenario, self.grid, self.grid)
            began = time.perf_counter()
            result = solve(grid, self.config, abort_check=abort_check)
            total += time.perf_counter() - began
            if result.iterations != self.config.max_iter:
                raise RuntimeError("benchmark solve ended early; "
                                   "the workload is not comparable")
        return total

    def sample_disabled(self) -> float:
        return self.run(None)

    def sample_steered(self, tick_ms: float) -> float:
        registry = Registry()
        engine = SteeringEngine(registry, TickConfig(interval_ms=tick_ms))
        stop = threading.Event()
        out: List[float] = []

        def compute(ctx):
            out.append(self.run(ctx.should_abort))
            stop.set()
            return 0

        engine.run_steered(compute, stop)
        return out[0]


def benchmark_overhead(settings: BenchSettings = BenchSettings(),
                       progress=None) -> BenchReport:
    """Run the full measurement matrix and return the report.

    progress, if given, is called with a one-line string after each sample.
    """
    scenario = _reference_scenario(settings)
    warm = _Workload(scenario, settings, solves=1)
    began = time.perf_counter()
    warm.sample_disabled()  # JIT warmup, also calibrates the solve cost
    est_solve = time.perf_counter() - began

    setting_count = len(settings.ticks) + 1
    total_samples = setting_count * settings.repetitions
    per_sample = settings.duration / total_samples
    solves = max(1, round(per_sample / max(est_solve, 1e-9)))
    workload = _Workload(scenario, settings, solves)

    labels = [DISABLED] + [_tick_label(t) for t in sorted(settings.ticks)]
    samples: Dict[str, List[float]] = {label: [] for label in labels}
    for rep in range(settings.repetitions):
        samples[DISABLED].append(workload.sample_disabled())
        if progress:
            progress(f"rep {rep + 1}/{settings.repetitions} {DISABLED}: "
                     f"{samples[DISABLED][-1]:.3f} s")
        for tick in sorted(settings.ticks):
            label = _tick_label(tick)
            samples[label].append(workload.sample_steered(tick))
            if progress:
                progress(f"rep {rep + 1}/{settings.repetitions} {label}: "
                         f"{samples[label][-1]:.3f} s")
    return BenchReport(settings, solves, samples)


def enforce(report: BenchReport,
            limits: Dict[float, float] = None) -> None:
    """Raise ThresholdBreach if any bounded tick setting is over its limit."""
    limits = DEFAULT_LIMITS if limits is None else limits
    breaches = []
    for tick_ms, limit in sorted(limits.items()):
        label = _tick_label(tick_ms)
        measured = report.overhead_pct.get(label)
        if measured is None:
            continue
        if measured > limit:
            breaches.append(f"tick {label}: {measured:+.2f}% exceeds "
                            f"the {limit:.0f}% bound")
    if breaches:
        raise ThresholdBreach("; ".join(breaches))
