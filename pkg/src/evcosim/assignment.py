"""System-level flow solvers: social CTAP, user equilibrium, marginal tolls.

Both problems are convex quadratics over the product of per-class path-flow
simplices (arc latencies are affine).  The social problem minimizes total
cost ``lambda' s(lambda) + p' d``; the equilibrium problem minimizes the
Beckmann potential of the price-modified arc costs plus tolls.  They share
one engine:

* Frank-Wolfe with all-or-nothing directions and exact quadratic line
  search, giving a certified relative optimality gap from the linearization
  lower bound;
* an exact restricted-QP polish on the support discovered by Frank-Wolfe
  (an active-set loop over small KKT systems), so returned flows sit on the
  optimal face to machine precision rather than at a sublinear-rate iterate.

Tie-breaking is always lowest path index; identical inputs give identical
flows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .espp import PathSet
from .transport import ArcKind, ExtendedGraph

KWH_PER_MWH = 1000.0


class AssignmentConvergenceError(RuntimeError):
    """Solver failed to reach the requested optimality gap."""


@dataclass(frozen=True, eq=False)
class DemandMap:
    """Matrix mapping extended-arc flows to nodal charging demand in MWh.

    Entries are the positive purchased kWh divided by 1000 on charge-amount
    columns (traversal energy on those arcs is negative; demand must be a
    nonnegative load), zero elsewhere.
    """

    buses: tuple[str, ...]
    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=float)
        if np.any(m < 0):
            raise ValueError("demand map entries must be nonnegative")
        m = m.copy()
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)


def build_demand_map(graph: ExtendedGraph, buses: Sequence[str]) -> DemandMap:
    bus_pos = {b: i for i, b in enumerate(buses)}
    M = np.zeros((len(buses), graph.n_arcs))
    for j, arc in enumerate(graph.arcs):
        if arc.kind is ArcKind.CHARGE:
            bus = graph.station_bus(arc.station)
            if bus not in bus_pos:
                raise KeyError(f"station {arc.station!r} mapped to unknown bus {bus!r}")
            M[bus_pos[bus], j] = arc.charge_amount / KWH_PER_MWH
    return DemandMap(buses=tuple(buses), matrix=M)


def flows_to_arc_flow(pathsets: Sequence[PathSet], flows: Mapping[str, np.ndarray]) -> np.ndarray:
    """Aggregate per-class path flows into arc flows via the incidences."""
    n_arcs = pathsets[0].graph.n_arcs
    lam = np.zeros(n_arcs)
    for ps in pathsets:
        f = np.asarray(flows[ps.class_id], dtype=float)
        if f.shape != (ps.n_paths,):
            raise ValueError(f"class {ps.class_id}: flow vector shape {f.shape} != ({ps.n_paths},)")
        if np.any(f < -1e-12):
            raise ValueError(f"class {ps.class_id}: negative path flow")
        if ps.n_paths:
            lam += ps.incidence @ f
    return lam


def arc_flow_to_demand(demand_map: DemandMap, arc_flows: np.ndarray) -> np.ndarray:
    """Nodal charging demand ``d = M @ lambda`` in MWh per epoch."""
    return demand_map.matrix @ np.asarray(arc_flows, dtype=float)


@dataclass(eq=False)
class FlowState:
    """Solver output: path flows, induced arc flows and demand, diagnostics."""

    path_flows: dict[str, np.ndarray]
    arc_flows: np.ndarray
    demand: np.ndarray
    objective: float
    relative_gap: float
    iterations: int
    converged: bool
    equilibrium_residual: float = 0.0


def _price_vector(prices, demand_map: DemandMap) -> np.ndarray:
    if isinstance(prices, Mapping):
        return np.array([float(prices.get(b, 0.0)) for b in demand_map.buses])
    p = np.asarray(prices, dtype=float)
    if p.shape != (len(demand_map.buses),):
        raise ValueError(f"price vector shape {p.shape} != ({len(demand_map.buses)},)")
    return p


def _toll_vector(graph: ExtendedGraph, tolls) -> np.ndarray:
    if tolls is None:
        return np.zeros(graph.n_arcs)
    if isinstance(tolls, Mapping):
        out = np.zeros(graph.n_arcs)
        for aid, v in tolls.items():
            out[graph.arc_pos[aid]] = float(v)
        return out
    t = np.asarray(tolls, dtype=float)
    if t.shape != (graph.n_arcs,):
        raise ValueError(f"toll vector shape {t.shape} != ({graph.n_arcs},)")
    return t


def _time_coefficients(graph: ExtendedGraph, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    c0 = np.array([gamma * a.free_flow_time for a in graph.arcs])
    c1 = np.array([gamma * a.slope for a in graph.arcs])
    return c0, c1


def _base_money(graph: ExtendedGraph) -> np.ndarray:
    return np.array(
        [a.toll if a.kind in (ArcKind.ROAD, ArcKind.ENTRANCE) else 0.0 for a in graph.arcs]
    )


@dataclass(eq=False)
class _Quadratic:
    """min over path flows of sum_a Q_a lambda_a^2 + lin_a lambda_a."""

    graph: ExtendedGraph
    pathsets: tuple[PathSet, ...]
    Q: np.ndarray
    lin: np.ndarray

    def objective(self, lam: np.ndarray) -> float:
        return float(lam @ (self.Q * lam + self.lin))

    def gradient(self, lam: np.ndarray) -> np.ndarray:
        return 2.0 * self.Q * lam + self.lin


def _initial_flows(prob: _Quadratic, warm: Mapping[str, np.ndarray] | None) -> dict[str, np.ndarray]:
    flows: dict[str, np.ndarray] = {}
    grad = prob.gradient(np.zeros(prob.graph.n_arcs))
    for ps in prob.pathsets:
        m = ps.vehicle_class.demand_rate
        if warm is not None and ps.class_id in warm and len(warm[ps.class_id]) == ps.n_paths:
            f = np.maximum(np.asarray(warm[ps.class_id], dtype=float), 0.0)
            s = f.sum()
            flows[ps.class_id] = f * (m / s) if s > 0 else _aon(ps, grad, m)
        else:
            flows[ps.class_id] = _aon(ps, grad, m)
    return flows


def _aon(ps: PathSet, grad: np.ndarray, mass: float) -> np.ndarray:
    f = np.zeros(ps.n_paths)
    if ps.n_paths and mass > 0:
        costs = ps.incidence.T @ grad
        f[int(np.argmin(costs))] = mass
    return f


def _frank_wolfe(
    prob: _Quadratic,
    flows: dict[str, np.ndarray],
    tol: float,
    max_iter: int,
    trace: list | None,
) -> tuple[dict[str, np.ndarray], float, int]:
    lam = flows_to_arc_flow(prob.pathsets, flows)
    gap_rel = np.inf
    it = 0
    while it < max_iter:
        it += 1
        grad = prob.gradient(lam)
        obj = prob.objective(lam)
        lam_target = np.zeros_like(lam)
        gap = 0.0
        best: dict[str, int] = {}
        for ps in prob.pathsets:
            if not ps.n_paths or ps.vehicle_class.demand_rate == 0:
                continue
            costs = ps.incidence.T @ grad
            k = int(np.argmin(costs))
            best[ps.class_id] = k
            m = ps.vehicle_class.demand_rate
            lam_target += m * ps.incidence[:, k]
            gap += float(flows[ps.class_id] @ costs) - m * float(costs[k])
        gap_rel = gap / (1.0 + abs(obj))
        if trace is not None:
            trace.append((it, obj, gap_rel))
        if gap_rel <= tol:
            break
        delta = lam_target - lam
        slope = float(grad @ delta)
        curv = float(np.sum(prob.Q * delta * delta))
        if curv <= 0:
            t = 1.0 if slope < 0 else 0.0
        else:
            t = min(max(-slope / (2.0 * curv), 0.0), 1.0)
        if t <= 0:
            break
        for ps in prob.pathsets:
            if ps.class_id not in best:
                continue
            f = flows[ps.class_id]
            f *= 1.0 - t
            f[best[ps.class_id]] += t * ps.vehicle_class.demand_rate
        lam = (1.0 - t) * lam + t * lam_target
    return flows, gap_rel, it


def _polish(prob: _Quadratic, flows: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Exact solve of the quadratic restricted to (and grown from) the support."""
    sets = [ps for ps in prob.pathsets if ps.n_paths and ps.vehicle_class.demand_rate > 0]
    if not sets:
        return flows
    support: dict[str, list[int]] = {}
    for ps in sets:
        f = flows[ps.class_id]
        m = ps.vehicle_class.demand_rate
        keep = [k for k in range(ps.n_paths) if f[k] > 1e-10 * m]
        support[ps.class_id] = keep or [0]

    for _ in range(120):
        cols = []
        owners = []
        for ps in sets:
            for k in support[ps.class_id]:
                cols.append(ps.incidence[:, k])
                owners.append(ps.class_id)
        B = np.column_stack(cols)
        nS = B.shape[1]
        nQcls = len(sets)
        E = np.zeros((nQcls, nS))
        masses = np.zeros(nQcls)
        for qi, ps in enumerate(sets):
            masses[qi] = ps.vehicle_class.demand_rate
            for j, owner in enumerate(owners):
                if owner == ps.class_id:
                    E[qi, j] = 1.0
        K = np.zeros((nS + nQcls, nS + nQcls))
        K[:nS, :nS] = 2.0 * (B.T * prob.Q) @ B
        K[:nS, nS:] = -E.T
        K[nS:, :nS] = E
        rhs = np.concatenate([-(B.T @ prob.lin), masses])
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        fS = sol[:nS]
        nu = sol[nS:]

        # An inconsistent system means the support holds paths that differ
        # along a zero-curvature direction with unequal cost: the costlier
        # one cannot stay active, and its excess is flow-independent.
        sys_resid = float(np.linalg.norm(K @ sol - rhs)) / (1.0 + float(np.linalg.norm(rhs)))
        if sys_resid > 1e-10:
            lam = B @ np.maximum(fS, 0.0)
            grad = prob.gradient(lam)
            dropped = False
            worst_excess, worst_owner, worst_local = 0.0, None, -1
            for ps in sets:
                sup = support[ps.class_id]
                if len(sup) < 2:
                    continue
                costs = ps.incidence[:, sup].T @ grad
                excess = float(costs.max() - costs.min())
                if excess > worst_excess:
                    worst_excess = excess
                    worst_owner = ps.class_id
                    worst_local = int(np.argmax(costs))
            if worst_owner is not None and worst_excess > 1e-12:
                support[worst_owner].pop(worst_local)
                dropped = True
            if dropped:
                continue

        neg = np.where(fS < -1e-11 * (1.0 + masses.max()))[0]
        if len(neg):
            worst = int(neg[np.argmin(fS[neg])])
            owner = owners[worst]
            if len(support[owner]) > 1:
                # index of this column within its class's support list
                local = [j for j, o in enumerate(owners) if o == owner].index(worst)
                support[owner].pop(local)
                continue
        lam = B @ np.maximum(fS, 0.0)
        grad = prob.gradient(lam)
        grew = False
        for qi, ps in enumerate(sets):
            costs = ps.incidence.T @ grad
            k = int(np.argmin(costs))
            if k not in support[ps.class_id] and costs[k] < nu[qi] - 1e-11 * (1.0 + abs(nu[qi])):
                support[ps.class_id].append(k)
                support[ps.class_id].sort()
                grew = True
        if grew:
            continue
        out = {ps.class_id: np.zeros(ps.n_paths) for ps in prob.pathsets}
        j = 0
        for ps in sets:
            for k in support[ps.class_id]:
                out[ps.class_id][k] = max(float(fS[j]), 0.0)
                j += 1
            s = out[ps.class_id].sum()
            if s > 0:
                out[ps.class_id] *= ps.vehicle_class.demand_rate / s
        return out
    return flows


def _certify(prob: _Quadratic, flows: dict[str, np.ndarray], tol: float) -> float:
    """Max relative excess of a used path's cost over its class minimum."""
    lam = flows_to_arc_flow(prob.pathsets, flows)
    grad = prob.gradient(lam)
    worst = 0.0
    for ps in prob.pathsets:
        m = ps.vehicle_class.demand_rate
        if not ps.n_paths or m == 0:
            continue
        costs = ps.incidence.T @ grad
        cmin = float(costs.min())
        used = flows[ps.class_id] > 1e-9 * m
        if used.any():
            worst = max(worst, float((costs[used].max() - cmin) / (1.0 + abs(cmin))))
    return worst


def _solve(
    prob: _Quadratic,
    demand_map: DemandMap,
    tol: float,
    max_iter: int,
    warm: Mapping[str, np.ndarray] | None,
    trace: list | None,
    polish: bool = True,
) -> FlowState:
    for ps in prob.pathsets:
        if ps.is_empty and ps.vehicle_class.demand_rate > 0:
            raise AssignmentConvergenceError(f"class {ps.class_id} has an empty path set")
    flows = _initial_flows(prob, warm)
    total_iters = 0
    gap = np.inf
    if not polish:
        flows, gap, total_iters = _frank_wolfe(prob, flows, tol, max_iter, trace)
        if gap > tol:
            raise AssignmentConvergenceError(
                f"assignment gap {gap:.3e} above tolerance {tol:.1e} after {total_iters} iterations"
            )
        lam = flows_to_arc_flow(prob.pathsets, flows)
        return FlowState(
            path_flows=flows,
            arc_flows=lam,
            demand=arc_flow_to_demand(demand_map, lam),
            objective=prob.objective(lam),
            relative_gap=float(gap),
            iterations=total_iters,
            converged=True,
            equilibrium_residual=_certify(prob, flows, tol),
        )
    for _round in range(12):
        flows, gap, it = _frank_wolfe(prob, flows, max(tol, 1e-8), max_iter, trace)
        total_iters += it
        flows = _polish(prob, flows)
        lam = flows_to_arc_flow(prob.pathsets, flows)
        grad = prob.gradient(lam)
        obj = prob.objective(lam)
        gap = 0.0
        for ps in prob.pathsets:
            if not ps.n_paths or ps.vehicle_class.demand_rate == 0:
                continue
            costs = ps.incidence.T @ grad
            gap += float(flows[ps.class_id] @ costs) - ps.vehicle_class.demand_rate * float(costs.min())
        gap /= 1.0 + abs(obj)
        if gap <= tol:
            break
    converged = gap <= tol
    if not converged:
        raise AssignmentConvergenceError(
            f"assignment gap {gap:.3e} above tolerance {tol:.1e} after {total_iters} iterations"
        )
    lam = flows_to_arc_flow(prob.pathsets, flows)
    return FlowState(
        path_flows=flows,
        arc_flows=lam,
        demand=arc_flow_to_demand(demand_map, lam),
        objective=prob.objective(lam),
        relative_gap=float(gap),
        iterations=total_iters,
        converged=converged,
        equilibrium_residual=_certify(prob, flows, tol),
    )


def _default_demand_map(graph: ExtendedGraph, demand_map: DemandMap | None) -> DemandMap:
    if demand_map is not None:
        return demand_map
    buses = tuple(sorted(set(graph.bus_map.values())))
    return build_demand_map(graph, buses)


def solve_ctap(
    graph: ExtendedGraph,
    pathsets: Sequence[PathSet],
    prices,
    gamma: float,
    tol: float = 1e-6,
    *,
    demand_map: DemandMap | None = None,
    max_iter: int = 20_000,
    warm_start: Mapping[str, np.ndarray] | None = None,
    trace: list | None = None,
    polish: bool = True,
) -> FlowState:
    """Socially optimal charge-and-traffic assignment at fixed prices.

    Minimizes ``lambda' s(lambda) + p' M lambda`` over the path-flow
    polytope (``prices`` in $/MWh, keyed or ordered by the demand-map
    buses).  Tolls are transfers and do not enter the social objective.
    """
    dm = _default_demand_map(graph, demand_map)
    p = _price_vector(prices, dm)
    c0, c1 = _time_coefficients(graph, gamma)
    prob = _Quadratic(
        graph=graph,
        pathsets=tuple(pathsets),
        Q=c1,
        lin=c0 + dm.matrix.T @ p,
    )
    return _solve(prob, dm, tol, max_iter, warm_start, trace, polish=polish)


def solve_user_equilibrium(
    graph: ExtendedGraph,
    pathsets: Sequence[PathSet],
    prices,
    tolls,
    gamma: float,
    tol: float = 1e-6,
    *,
    demand_map: DemandMap | None = None,
    max_iter: int = 20_000,
    warm_start: Mapping[str, np.ndarray] | None = None,
    trace: list | None = None,
    polish: bool = True,
) -> FlowState:
    """Wardrop user equilibrium under posted prices and tolls.

    Minimizes the Beckmann potential of the modified arc costs
    ``s + M'p`` plus base and imposed tolls; at the solution every used
    path of a class attains the class's minimal generalized cost.
    """
    dm = _default_demand_map(graph, demand_map)
    p = _price_vector(prices, dm)
    t = _toll_vector(graph, tolls)
    c0, c1 = _time_coefficients(graph, gamma)
    prob = _Quadratic(
        graph=graph,
        pathsets=tuple(pathsets),
        Q=0.5 * c1,
        lin=c0 + dm.matrix.T @ p + _base_money(graph) + t,
    )
    return _solve(prob, dm, tol, max_iter, warm_start, trace, polish=polish)


def compute_marginal_tolls(graph: ExtendedGraph, arc_flows: np.ndarray, gamma: float) -> np.ndarray:
    """Externality toll per arc: flow times the latency derivative.

    For affine latencies this is ``gamma * slope * lambda``; fixed-time
    arcs (charge amounts, bypasses) get zero.  Entrance arcs receive their
    congestion mark-up through the same formula.
    """
    lam = np.asarray(arc_flows, dtype=float)
    if np.any(lam < -1e-12):
        raise ValueError("negative arc flow")
    _, c1 = _time_coefficients(graph, gamma)
    return c1 * np.maximum(lam, 0.0)
