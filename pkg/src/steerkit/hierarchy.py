"""Grid-resolution laddering driven by interaction frequency.

While the user interacts rapidly, solving happens on coarse grids; after the
interaction goes quiet the level climbs back up one step at a time, each
finer solve seeded by interpolating the converged coarser one (the multilevel
initial guess).  Transfer operators are deliberately simple: injection down,
bilinear up.
"""

from __future__ import annotations

import statistics
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .heat import Grid, Scenario, rasterize

CLOCK_WINDOW = 8


@dataclass(frozen=True)
class LevelSpec:
    """Resolution ladder, coarsest first; every step exactly doubles."""

    resolutions: tuple = ((75, 75), (150, 150), (300, 300))

    def __post_init__(self):
        if len(self.resolutions) < 1:
            raise ValueError("at least one level is required")
        for (cw, ch), (fw, fh) in zip(self.resolutions, self.resolutions[1:]):
            if fw != 2 * cw or fh != 2 * ch:
                raise ValueError(
                    f"level {fw}x{fh} does not double {cw}x{ch}")

    @property
    def finest(self) -> int:
        return len(self.resolutions) - 1

    @property
    def coarsest(self) -> int:
        return 0

    def dims(self, index: int):
        return self.resolutions[index]

    @staticmethod
    def parse(text: str) -> "LevelSpec":
        """Parse "75x75,150x150,300x300"."""
        resolutions = []
        for part in text.split(","):
            try:
                w, h = part.strip().split("x")
                resolutions.append((int(w), int(h)))
            except ValueError:
                raise ValueError(f"bad resolution: {part.strip()!r}") from None
        return LevelSpec(tuple(resolutions))

    def format(self) -> str:
        return ",".join(f"{w}x{h}" for w, h in self.resolutions)


class InteractionClock:
    """Ring of the most recent user-update timestamps."""

    def __init__(self, window: int = CLOCK_WINDOW):
        self._recent = deque(maxlen=window)

    def observe(self, ts: float):
        # the clock only ever moves forward
        if self._recent and ts < self._recent[-1]:
            ts = self._recent[-1]
        self._recent.append(ts)

    def last(self) -> Optional[float]:
        return self._recent[-1] if self._recent else None

    def median_gap(self) -> Optional[float]:
        """Median inter-update gap in seconds; None with fewer than two
        timestamps on record."""
        if len(self._recent) < 2:
            return None
        gaps = [b - a for a, b in zip(self._recent, list(self._recent)[1:])]
        return statistics.median(gaps)

    def __len__(self):
        return len(self._recent)


@dataclass(frozen=True)
class LevelPolicy:
    tau_fast_ms: float = 500.0
    tau_idle_ms: float = 2000.0

    def __post_init__(self):
        if not (0 < self.tau_fast_ms < self.tau_idle_ms):
            raise ValueError("need tau_idle > tau_fast > 0")


def choose_level(clock: InteractionClock, policy: LevelPolicy,
                 spec: LevelSpec, current: int, now: float) -> int:
    """Pick the level for the next epoch.

    Idle long enough promotes one step toward finest; rapid interaction drops
    straight to coarsest; otherwise the level stays put.  The idle rule is
    checked first: the clock keeps old timestamps forever, so a burst's small
    median gap must not pin the level down after the user goes quiet.  A lone
    update (median undefined) counts as rapid, so a single click demotes and
    then recovers stepwise.
    """
    if not (0 <= current <= spec.finest):
        raise ValueError(f"level index {current} out of range")
    last = clock.last()
    if last is None or (now - last) * 1000.0 >= policy.tau_idle_ms:
        return min(current + 1, spec.finest)
    gap = clock.median_gap()
    gap_ms = 0.0 if gap is None else gap * 1000.0
    if gap_ms < policy.tau_fast_ms:
        return spec.coarsest
    return current


def restrict_field(fine: np.ndarray) -> np.ndarray:
    """Injection: coarse (i, j) samples fine (2i, 2j)."""
    fh, fw = fine.shape
    if fh % 2 or fw % 2:
        raise ValueError("fine dimensions must be even")
    return fine[::2, ::2].copy()


def prolong_field(coarse: np.ndarray, fine_dims) -> np.ndarray:
    """Bilinear interpolation of a coarse field onto the fine grid.

    Fine node r sits at coarse coordinate r/2, which makes prolongation the
    exact right inverse of injection (fine node 2i reproduces coarse node i)
    and keeps it exact on linear fields; the outermost fine row and column
    extrapolate the last coarse interval."""
    fw, fh = fine_dims
    ch, cw = coarse.shape
    if fw != 2 * cw or fh != 2 * ch:
        raise ValueError(
            f"fine dims {fw}x{fh} must double coarse {cw}x{ch}")
    ys = np.arange(fh) * 0.5
    xs = np.arange(fw) * 0.5
    yi = np.clip(np.floor(ys).astype(np.int64), 0, ch - 2)
    xi = np.clip(np.floor(xs).astype(np.int64), 0, cw - 2)
    wy = (ys - yi)[:, None]
    wx = (xs - xi)[None, :]
    c00 = coarse[np.ix_(yi, xi)]
    c01 = coarse[np.ix_(yi, xi + 1)]
    c10 = coarse[np.ix_(yi + 1, xi)]
    c11 = coarse[np.ix_(yi + 1, xi + 1)]
    return ((1 - wy) * (1 - wx) * c00 + (1 - wy) * wx * c01
            + wy * (1 - wx) * c10 + wy * wx * c11)


def restrict(fine: Grid, scenario: Scenario) -> Grid:
    """Carry a fine solution down one level.  The constrained mask is
    re-derived by rasterizing the scenario at the coarse resolution, never by
    downsampling the mask; constrained cells keep their Dirichlet values."""
    field = restrict_field(fine.data)
    ch, cw = field.shape
    coarse = rasterize(scenario, cw, ch)
    keep = coarse.constrained.astype(bool)
    field[keep] = coarse.data[keep]
    return Grid(field, coarse.constrained)


def prolong(coarse: Grid, fine_dims, scenario: Scenario) -> Grid:
    """Interpolate a coarse solution up one level as an initial guess; the
    fine grid's constrained cells are overwritten with their Dirichlet
    values afterward."""
    field = prolong_field(coarse.data, fine_dims)
    fw, fh = fine_dims
    fine = rasterize(scenario, fw, fh)
    keep = fine.constrained.astype(bool)
    field[keep] = fine.data[keep]
    return Grid(field, fine.constrained)


def level_error(coarse_solution: Grid, fine_solution: Grid) -> float:
    """Relative 2-norm difference between a coarse solution (interpolated all
    the way up) and the fine solution, over the fine grid's unconstrained
    cells."""
    field = coarse_solution.data
    target = fine_solution.data.shape  # (h, w)
    while field.shape != target:
        h, w = field.shape
        if h > target[0]:
            raise ValueError("first grid must be the coarser one")
        field = prolong_field(field, (2 * w, 2 * h))
    free = ~fine_solution.constrained.astype(bool)
    ref = np.linalg.norm(fine_solution.data[free])
    if ref == 0.0:
        raise ValueError("fine solution is zero on unconstrained cells")
    return float(np.linalg.norm(field[free] - fine_solution.data[free]) / ref)
