"""Static phase scheduling for octree-shaped task trees.

Tasks depend on their children (children run first).  The heuristic walks a
priority list ordered by dependency tier, then branch load, then task size
(max-min), splits oversized tasks into equal shares against a reference unit
cost, and packs shares round-robin into the earliest dependency-respecting
phase with free processor slots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

MAX_CHILDREN = 8


@dataclass
class TaskNode:
    id: int
    parent: Optional[int]
    est_flops: float
    children: list = field(default_factory=list)
    tree_level: int = 0      # root = 0
    branch_load: float = 0.0  # est_flops summed over the whole subtree


class TaskTree:
    def __init__(self, nodes: Dict[int, TaskNode], root: int):
        self.nodes = nodes
        self.root = root
        self.depth = 1 + max(n.tree_level for n in nodes.values())

    @staticmethod
    def build(triples) -> "TaskTree":
        """Construct from (id, parent, est_flops) triples and derive levels,
        children, and branch loads.  Validates tree shape."""
        nodes: Dict[int, TaskNode] = {}
        root = None
        for node_id, parent, est in triples:
            if node_id in nodes:
                raise ValueError(f"duplicate node id {node_id}")
            if est <= 0:
                raise ValueError(f"node {node_id}: est_flops must be positive")
            nodes[node_id] = TaskNode(node_id, parent, float(est))
            if parent is None:
                if root is not None:
                    raise ValueError("more than one root")
                root = node_id
        if root is None:
            raise ValueError("no root node")
        for node in nodes.values():
            if node.parent is not None:
                if node.parent not in nodes:
                    raise ValueError(
                        f"node {node.id}: unknown parent {node.parent}")
                nodes[node.parent].children.append(node.id)
        for node in nodes.values():
            node.children.sort()
            if len(node.children) > MAX_CHILDREN:
                raise ValueError(
                    f"node {node.id} has {len(node.children)} children "
                    f"(limit {MAX_CHILDREN})")
        # levels by BFS; anything unreached means a cycle or a stray subtree
        order = [root]
        seen = {root}
        for node_id in order:
            node = nodes[node_id]
            for child in node.children:
                if child in seen:
                    raise ValueError("cycle detected")
                nodes[child].tree_level = node.tree_level + 1
                seen.add(child)
                order.append(child)
        if len(seen) != len(nodes):
            raise ValueError("disconnected nodes present")
        for node_id in reversed(order):
            node = nodes[node_id]
            node.branch_load = node.est_flops + sum(
                nodes[c].branch_load for c in node.children)
        return TaskTree(nodes, root)


def processing_order(node: TaskNode, depth: int) -> int:
    """Dependency tier of a node: depth - tree_level - 1 (leaves of a full
    tree sit at tier 0 and run first, the root runs last)."""
    if not (0 <= node.tree_level <= depth - 1):
        raise ValueError(
            f"tree level {node.tree_level} out of range for depth {depth}")
    return depth - node.tree_level - 1


def build_priority_lists(tree: TaskTree) -> List[int]:
    """Task ids in assignment order: ascending dependency tier, then heaviest
    branch first, then biggest task first (max-min), id as the final
    deterministic tie-break."""
    return sorted(
        tree.nodes,
        key=lambda i: (
            processing_order(tree.nodes[i], tree.depth),
            -tree.nodes[i].branch_load,
            -tree.nodes[i].est_flops,
            i,
        ),
    )


def split_task(task: TaskNode, unit_cost: float, max_shares: int) -> List[float]:
    """Equal shares, one per unit of estimated work, capped at max_shares."""
    if unit_cost <= 0:
        raise ValueError("unit_cost must be positive")
    if max_shares < 1:
        raise ValueError("max_shares must be at least 1")
    s = min(math.ceil(task.est_flops / unit_cost), max_shares)
    return [1.0 / s] * s


@dataclass
class Phase:
    index: int
    # processor id -> (task id, share fraction); one share per processor
    slots: Dict[int, Tuple[int, float]] = field(default_factory=dict)


@dataclass
class Schedule:
    phases: List[Phase]
    processor_count: int
    unit_cost: float
    # task id -> est_flops, captured so fullness can weight shares by cost
    task_costs: Dict[int, float] = field(default_factory=dict)


def default_unit_cost(tree: TaskTree) -> float:
    """Median leaf cost: the reference 'unit task' when none is given."""
    leaves = sorted(n.est_flops for n in tree.nodes.values() if not n.children)
    return leaves[len(leaves) // 2]


def assign_phases(priority: List[int], tree: TaskTree, processors: int,
                  unit_cost: Optional[float] = None) -> Schedule:
    """Pack task shares into phases.

    Each share goes into the earliest phase that is strictly later than every
    phase holding any share of the task's children and still has a free
    processor; a new phase opens when none qualifies.  Processor slots are
    picked round-robin so work spreads instead of piling onto processor 0.
    """
    if processors < 1:
        raise ValueError("need at least one processor")
    if unit_cost is None:
        unit_cost = default_unit_cost(tree)
    phases: List[Phase] = []
    last_phase_of: Dict[int, int] = {}
    cursor = 0
    for task_id in priority:
        task = tree.nodes[task_id]
        floor = 0
        for child in task.children:
            floor = max(floor, last_phase_of[child] + 1)
        shares = split_task(task, unit_cost, processors)
        # shares go share-by-share into the earliest free slots; waiting for
        # a phase with room for all of them at once can skip single-slot
        # gaps and lengthen the schedule
        p = floor
        for share in shares:
            while True:
                while p >= len(phases):
                    phases.append(Phase(len(phases)))
                if len(phases[p].slots) < processors:
                    break
                p += 1
            slot = phases[p].slots
            proc = cursor % processors
            while proc in slot:
                proc = (proc + 1) % processors
            slot[proc] = (task_id, share)
            cursor = proc + 1
            last_phase_of[task_id] = p
    costs = {i: n.est_flops for i, n in tree.nodes.items()}
    return Schedule(phases, processors, unit_cost, costs)


def schedule_tree(tree: TaskTree, processors: int,
                  unit_cost: Optional[float] = None) -> Schedule:
    return assign_phases(build_priority_lists(tree), tree, processors,
                         unit_cost)


def naive_level_schedule(tree: TaskTree, processors: int,
                         unit_cost: Optional[float] = None) -> Schedule:
    """Baseline: levels strictly one after another (deepest first), same
    splitting rule, no mixing of levels inside a phase."""
    if unit_cost is None:
        unit_cost = default_unit_cost(tree)
    phases: List[Phase] = []
    cursor = 0
    for level in range(tree.depth - 1, -1, -1):
        ids = sorted(i for i, n in tree.nodes.items() if n.tree_level == level)
        start = len(phases)
        for task_id in ids:
            p = start
            for share in split_task(tree.nodes[task_id], unit_cost,
                                    processors):
                while True:
                    while p >= len(phases):
                        phases.append(Phase(len(phases)))
                    if len(phases[p].slots) < processors:
                        break
                    p += 1
                slot = phases[p].slots
                proc = cursor % processors
                while proc in slot:
                    proc = (proc + 1) % processors
                slot[proc] = (task_id, share)
                cursor = proc + 1
    costs = {i: n.est_flops for i, n in tree.nodes.items()}
    return Schedule(phases, processors, unit_cost, costs)


def validate(schedule: Schedule, tree: TaskTree) -> Optional[str]:
    """Check dependency ordering, share summation, and slot sanity.
    Returns None when the schedule is consistent, else the first violation."""
    totals: Dict[int, float] = {i: 0.0 for i in tree.nodes}
    first_phase: Dict[int, int] = {}
    last_phase: Dict[int, int] = {}
    for phase in schedule.phases:
        if len(phase.slots) > schedule.processor_count:
            return f"phase {phase.index}: more slots than processors"
        for proc, (task_id, share) in phase.slots.items():
            if not (0 <= proc < schedule.processor_count):
                return f"phase {phase.index}: bad processor id {proc}"
            if task_id not in tree.nodes:
                return f"phase {phase.index}: unknown task {task_id}"
            if share <= 0 or share > 1:
                return f"task {task_id}: share {share} out of range"
            totals[task_id] += share
            first_phase.setdefault(task_id, phase.index)
            last_phase[task_id] = phase.index
    for task_id, total in totals.items():
        if abs(total - 1.0) > 1e-9:
            return f"task {task_id}: shares sum to {total}, not 1"
    for node in tree.nodes.values():
        for child in node.children:
            if last_phase[child] >= first_phase[node.id]:
                return (f"task {node.id} starts in phase "
                        f"{first_phase[node.id]} but child {child} ends in "
                        f"phase {last_phase[child]}")
    return None


def phase_fullness(schedule: Schedule) -> Tuple[List[float], float]:
    """Per-phase utilization and the aggregate mean.

    A slot's cost is its share of the task's estimated work; a phase's
    capacity is P times its heaviest slot (the heaviest slot paces the
    phase), so utilization is occupied work over pacing capacity."""
    per_phase = []
    for phase in schedule.phases:
        if not phase.slots:
            per_phase.append(0.0)
            continue
        costs = [share * schedule.task_costs[task_id]
                 for (task_id, share) in phase.slots.values()]
        per_phase.append(sum(costs)
                         / (schedule.processor_count * max(costs)))
    aggregate = sum(per_phase) / len(per_phase) if per_phase else 0.0
    return per_phase, aggregate


def phase_occupancy(schedule: Schedule) -> Tuple[List[float], float]:
    """Per-phase fraction of busy processors and the aggregate mean: the
    occupancy-chart view of fullness, blind to slot costs.  Two schedules of
    the same tree hold the same share multiset, so on this measure the one
    with fewer phases is the fuller one."""
    per_phase = [len(phase.slots) / schedule.processor_count
                 for phase in schedule.phases]
    aggregate = sum(per_phase) / len(per_phase) if per_phase else 0.0
    return per_phase, aggregate


def complete_octree(depth: int, cost: float = 1.0) -> TaskTree:
    """Full tree with 8 children per node, ids in breadth-first order."""
    if depth < 1:
        raise ValueError("depth must be at least 1")
    triples = [(0, None, cost)]
    next_id = 1
    frontier = [0]
    for _ in range(depth - 1):
        new_frontier = []
        for parent in frontier:
            for _ in range(8):
                triples.append((next_id, parent, cost))
                new_frontier.append(next_id)
                next_id += 1
        frontier = new_frontier
    return TaskTree.build(triples)


def parse_tree(text: str) -> TaskTree:
    """Parse `node <id> <parent|-> <est_flops>` lines.  Blank lines and
    `#` comments are ignored; errors name the offending line."""
    triples = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4 or parts[0] != "node":
            raise ValueError(f"tree line {lineno}: expected "
                             f"'node <id> <parent|-> <est_flops>'")
        try:
            node_id = int(parts[1])
            parent = None if parts[2] == "-" else int(parts[2])
            est = float(parts[3])
        except ValueError:
            raise ValueError(f"tree line {lineno}: bad number") from None
        triples.append((node_id, parent, est))
    try:
        return TaskTree.build(triples)
    except ValueError as e:
        raise ValueError(f"tree file: {e}") from None


def format_tree(tree: TaskTree) -> str:
    lines = []
    for node_id in sorted(tree.nodes):
        node = tree.nodes[node_id]
        parent = "-" if node.parent is None else str(node.parent)
        lines.append(f"node {node_id} {parent} {node.est_flops:g}")
    return "\n".join(lines) + "\n"


def format_schedule(schedule: Schedule) -> str:
    """Render the phase table plus a fullness summary."""
    lines = ["phase processor task share"]
    for phase in schedule.phases:
        for proc in sorted(phase.slots):
            task_id, share = phase.slots[proc]
            lines.append(f"{phase.index} {proc} {task_id} {share:g}")
    per_phase, aggregate = phase_fullness(schedule)
    lines.append("")
    lines.append(f"phases: {len(schedule.phases)}  processors: "
                 f"{schedule.processor_count}  unit_cost: "
                 f"{schedule.unit_cost:g}")
    lines.append("fullness per phase: "
                 + " ".join(f"{u:.3f}" for u in per_phase))
    lines.append(f"aggregate fullness: {aggregate:.3f}")
    return "\n".join(lines) + "\n"


def fullness_csv(schedule: Schedule) -> str:
    """Plot data for an occupancy chart, one row per phase."""
    per_phase, aggregate = phase_fullness(schedule)
    lines = ["phase,busy_processors,fullness"]
    for phase, utilization in zip(schedule.phases, per_phase):
        lines.append(f"{phase.index},{len(phase.slots)},{utilization:.6f}")
    lines.append(f"aggregate,,{aggregate:.6f}")
    return "\n".join(lines) + "\n"
