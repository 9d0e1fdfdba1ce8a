"""Energy-feasible path enumeration and the individual driver's problem.

A path is energy-feasible when the battery state stays inside
``[0, capacity]`` after every arc, starting from the class's initial charge
(charge arcs carry negative traversal energy, so they raise the state).
Feasibility depends only on the arc sequence, never on congestion, so the
per-class path sets are enumerated once up front and reused by every
system-level solver.

Enumeration is an exhaustive depth-first search over the extended graph,
loop-free in base-node space (a station gadget counts as one node), pruned
as soon as a prefix violates the battery bounds.  The driver's cost-minimal
plan is then an exact argmin over the enumerated set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .transport import ArcKind, ExtendedGraph, arc_money_cost, arc_time_cost

#: Slack for battery-bound comparisons; charge options and arc energies are
#: short decimals whose sums accumulate float noise.
ENERGY_EPS = 1e-9


class PathExplosionError(RuntimeError):
    """Enumeration exceeded the configured path-count cap."""


class InfeasibleClassError(ValueError):
    """A vehicle class has no feasible origin-destination path."""


@dataclass(frozen=True)
class Path:
    """Ordered arc sequence with its cached energy profile."""

    arcs: tuple[str, ...]
    energies: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.arcs) != len(self.energies):
            raise ValueError("arc and energy sequences differ in length")

    @property
    def length(self) -> int:
        return len(self.arcs)

    def charge_states(self, initial_charge: float) -> tuple[float, ...]:
        """Battery state after each arc, starting from ``initial_charge``."""
        states = initial_charge - np.cumsum(self.energies) if self.energies else np.array([])
        return tuple(float(s) for s in states)


@dataclass(frozen=True)
class VehicleClass:
    """Origin-destination cluster with shared battery parameters."""

    id: str
    origin: str
    destination: str
    demand_rate: float
    initial_charge: float = 0.0
    battery_capacity: float = 0.0
    kind: str = "ev"

    def __post_init__(self) -> None:
        if self.kind not in ("ev", "icev"):
            raise ValueError(f"class {self.id}: kind must be 'ev' or 'icev'")
        if self.demand_rate < 0:
            raise ValueError(f"class {self.id}: negative demand rate")
        if self.kind == "ev" and not 0 <= self.initial_charge <= self.battery_capacity:
            raise ValueError(f"class {self.id}: initial charge outside [0, capacity]")


@dataclass(frozen=True)
class PathSet:
    """Feasible paths of one class plus the arc-path incidence matrix."""

    class_id: str
    vehicle_class: VehicleClass
    paths: tuple[Path, ...]
    incidence: np.ndarray
    graph: ExtendedGraph

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    @property
    def is_empty(self) -> bool:
        return not self.paths


def is_energy_feasible(path: Path | Sequence[float], initial_charge: float, capacity: float) -> bool:
    """Check the battery-bound condition along every prefix of ``path``.

    Accepts a :class:`Path` or a bare energy sequence.  The empty path is
    feasible by the precondition ``0 <= initial_charge <= capacity``.
    """
    energies = path.energies if isinstance(path, Path) else tuple(path)
    state = initial_charge
    for e in energies:
        state -= e
        if state < -ENERGY_EPS or state > capacity + ENERGY_EPS:
            return False
    return True


def _incidence(graph: ExtendedGraph, paths: Sequence[Path]) -> np.ndarray:
    A = np.zeros((graph.n_arcs, len(paths)))
    for k, p in enumerate(paths):
        for aid in p.arcs:
            A[graph.arc_pos[aid], k] = 1.0
    return A


def enumerate_feasible_paths(
    graph: ExtendedGraph,
    vclass: VehicleClass,
    max_paths: int = 200_000,
) -> PathSet:
    """Enumerate every loop-free feasible path of ``vclass`` on ``graph``.

    EV classes search the full extended graph under the battery-bound
    predicate; ICEV classes are restricted to road and bypass arcs.  Paths
    come back in lexicographic order of their arc-id sequences.  Raises
    :class:`PathExplosionError` past ``max_paths`` candidates.
    """
    if vclass.origin not in graph.exit_node or vclass.destination not in graph.entry_node:
        raise KeyError(f"class {vclass.id}: origin or destination not in graph")
    start = graph.exit_node[vclass.origin]
    goal = graph.entry_node[vclass.destination]
    is_ev = vclass.kind == "ev"
    cap = vclass.battery_capacity

    allowed = np.ones(graph.n_arcs, dtype=bool)
    if not is_ev:
        for i, a in enumerate(graph.arcs):
            allowed[i] = a.kind in (ArcKind.ROAD, ArcKind.BYPASS)

    found: list[Path] = []

    def dfs(node: str, charge: float, visited: frozenset[str], arcs: list[str], energies: list[float]) -> None:
        if len(found) > max_paths:
            raise PathExplosionError(
                f"class {vclass.id}: more than {max_paths} feasible paths; "
                "raise max_paths or simplify the scenario"
            )
        if node == goal and arcs:
            found.append(Path(tuple(arcs), tuple(energies)))
            return
        for i in graph.out_arcs.get(node, ()):
            if not allowed[i]:
                continue
            arc = graph.arcs[i]
            nxt_base = graph.base_of[arc.head]
            cur_base = graph.base_of[node]
            if nxt_base != cur_base and nxt_base in visited:
                continue
            nxt_charge = charge - arc.energy
            if is_ev and not (-ENERGY_EPS <= nxt_charge <= cap + ENERGY_EPS):
                continue
            arcs.append(arc.id)
            energies.append(arc.energy)
            dfs(
                arc.head,
                nxt_charge,
                visited if nxt_base == cur_base else visited | {nxt_base},
                arcs,
                energies,
            )
            arcs.pop()
            energies.pop()

    base_start = graph.base_of[start]
    dfs(start, vclass.initial_charge, frozenset({base_start}), [], [])

    # Optional origin charging: the same search prefixed with one charge arc.
    if is_ev:
        for aid in graph.origin_prefix_arcs.get(vclass.origin, ()):
            arc = graph.arc(aid)
            charge0 = vclass.initial_charge - arc.energy
            if not (-ENERGY_EPS <= charge0 <= cap + ENERGY_EPS):
                continue
            dfs(start, charge0, frozenset({base_start}), [arc.id], [arc.energy])

    found.sort(key=lambda p: p.arcs)
    return PathSet(
        class_id=vclass.id,
        vehicle_class=vclass,
        paths=tuple(found),
        incidence=_incidence(graph, found),
        graph=graph,
    )


def path_cost(
    path: Path,
    graph: ExtendedGraph,
    arc_flows: Mapping[str, float] | np.ndarray,
    prices_per_kwh: Mapping[str, float],
    tolls: Mapping[str, float] | None,
    gamma: float,
) -> float:
    """Generalized cost of one path: summed time plus money over its arcs."""
    total = 0.0
    for aid in path.arcs:
        arc = graph.arc(aid)
        flow = arc_flows[graph.arc_pos[aid]] if isinstance(arc_flows, np.ndarray) else arc_flows.get(aid, 0.0)
        total += arc_time_cost(arc, float(flow), gamma)
        total += arc_money_cost(arc, prices_per_kwh, tolls, graph.bus_map)
    return total


def solve_espp(
    pathset: PathSet,
    arc_flows: Mapping[str, float] | np.ndarray,
    prices_per_kwh: Mapping[str, float],
    tolls: Mapping[str, float] | None,
    gamma: float,
) -> tuple[int, float]:
    """Pick the cost-minimizing path for one driver of the class.

    Returns ``(path index, cost)``; ties break toward the lowest index.
    """
    if pathset.is_empty:
        raise InfeasibleClassError(f"class {pathset.class_id} has no feasible paths")
    best_k = 0
    best_cost = float("inf")
    for k, p in enumerate(pathset.paths):
        c = path_cost(p, pathset.graph, arc_flows, prices_per_kwh, tolls, gamma)
        if c < best_cost - 1e-15:
            best_k, best_cost = k, c
    return best_k, best_cost
