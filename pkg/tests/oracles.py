"""Independent oracles used to cross-check the solvers.

These deliberately re-derive results through different algorithms than the
package: plain recursive enumeration for path sets, and exhaustive
active-set enumeration for dispatch.  Keep them simple and slow.
"""

from __future__ import annotations

import itertools

import numpy as np

from evcosim.power import PowerNetwork, compute_ptdf
from evcosim.transport import ArcKind, ExtendedGraph


def recursive_path_oracle(graph: ExtendedGraph, vclass) -> list[tuple[str, ...]]:
    """All loop-free feasible arc sequences, by naive recursion.

    Feasibility is re-derived from prefix sums of the arc energies rather
    than calling the package predicate.
    """
    start = graph.exit_node[vclass.origin]
    goal = graph.entry_node[vclass.destination]
    is_ev = vclass.kind == "ev"
    out: list[tuple[str, ...]] = []

    def feasible(energies: list[float]) -> bool:
        if not is_ev:
            return True
        state = vclass.initial_charge
        for e in energies:
            state -= e
            if state < -1e-9 or state > vclass.battery_capacity + 1e-9:
                return False
        return True

    def walk(node: str, arcs: list[str], energies: list[float], seen: set[str]) -> None:
        if node == goal and arcs:
            if feasible(energies):
                out.append(tuple(arcs))
            return
        for i in graph.out_arcs.get(node, ()):
            arc = graph.arcs[i]
            if not is_ev and arc.kind not in (ArcKind.ROAD, ArcKind.BYPASS):
                continue
            nxt = graph.base_of[arc.head]
            cur = graph.base_of[node]
            if nxt != cur and nxt in seen:
                continue
            walk(
                arc.head,
                arcs + [arc.id],
                energies + [arc.energy],
                seen if nxt == cur else seen | {nxt},
            )

    walk(start, [], [], {graph.base_of[start]})
    if is_ev:
        for aid in graph.origin_prefix_arcs.get(vclass.origin, ()):
            arc = graph.arc(aid)
            walk(start, [arc.id], [arc.energy], {graph.base_of[start]})
    return sorted(out)


def active_set_dispatch_oracle(network: PowerNetwork, d: np.ndarray):
    """Dispatch by brute-force enumeration of KKT active sets.

    Tries every combination of binding line directions and generator box
    states, solves the equality-constrained stationarity system, and keeps
    the feasible KKT point.  Returns ``(g, gamma, mu, prices, objective)``.
    """
    H = compute_ptdf(network)
    c = network.line_limits()
    w = np.asarray(d, dtype=float) + network.baseload
    n = network.n_buses
    n_dirs = H.shape[0]
    a, b = network.cost_a, network.cost_b
    best = None

    for states in itertools.product((-1, 0, 1), repeat=n):
        states = np.array(states)
        free = states == 0
        g_fixed = np.where(states < 0, network.g_min, network.g_max)
        for active_size in range(n_dirs + 1):
            for active in itertools.combinations(range(n_dirs), active_size):
                HA = H[list(active)] if active else np.zeros((0, n))
                m = 1 + len(active)
                K = np.zeros((m, m))
                rhs = np.zeros(m)
                inv2a = np.where(free, 1.0 / (2 * a), 0.0)
                K[0, 0] = inv2a.sum()
                if active:
                    K[0, 1:] = HA @ inv2a
                rhs[0] = w.sum() - g_fixed[~free].sum() + float(inv2a @ b)
                for r_i in range(len(active)):
                    K[1 + r_i, 0] = float(HA[r_i] @ inv2a)
                    K[1 + r_i, 1:] = HA @ (inv2a * HA[r_i])
                    rhs[1 + r_i] = (
                        float(HA[r_i] @ w)
                        - c[active[r_i]]
                        - float(HA[r_i][~free] @ g_fixed[~free])
                        + float(HA[r_i] @ (inv2a * b))
                    )
                try:
                    sol = np.linalg.solve(K, rhs)
                except np.linalg.LinAlgError:
                    continue
                gamma = sol[0]
                muA = sol[1:]
                p = gamma + (HA.T @ muA if active else 0.0)
                g = np.where(free, (p - b) / (2 * a), g_fixed)
                # consistency of the guessed state with the multipliers
                if np.any(muA < -1e-9):
                    continue
                if np.any(g[free] < network.g_min[free] - 1e-9) or np.any(
                    g[free] > network.g_max[free] + 1e-9
                ):
                    continue
                marg = 2 * a * g + b
                if np.any((states < 0) & (network.g_max > network.g_min) & (p > marg + 1e-9)):
                    continue
                if np.any((states > 0) & (network.g_max > network.g_min) & (p < marg - 1e-9)):
                    continue
                if abs(float(np.sum(w - g))) > 1e-8 * (1 + abs(w.sum())):
                    continue
                flows = H @ (w - g)
                if np.any(flows - c > 1e-8 * (1 + np.abs(c))):
                    continue
                if active and np.any(np.abs(flows[list(active)] - c[list(active)]) > 1e-7 * (1 + np.abs(c[list(active)]))):
                    continue
                obj = network.generation_cost(g)
                mu = np.zeros(n_dirs)
                for k_i, idx in enumerate(active):
                    mu[idx] = muA[k_i]
                cand = (g, float(gamma), mu, gamma + H.T @ mu, obj)
                if best is None or obj < best[4] - 1e-12:
                    best = cand
    return best
