"""Operating schemes for the coupled networks and their instrumentation.

Three schemes share one trace format:

* ``solve_social_optimum`` -- the joint transport+generation optimum, used
  as the reference oracle by everything else.  A dual-decomposition phase
  with diminishing steps and primal averaging localizes the solution; an
  exact active-set polish on the joint KKT system then certifies it to
  solver precision (subgradient averaging alone cannot reach certification
  tolerances in finite time).
* ``run_greedy_pricing`` -- the myopic scheme: the power side prices
  yesterday's demand, the transport side treats prices as given.  Detects
  the resulting price/demand cycles by hashing quantized states.
* ``run_dual_decomposition`` -- the collaborative protocol with a constant
  step: prices are rebuilt each round from the balance and congestion
  duals, both sides best-respond, duals move along the projected
  subgradient.  Per-round primal infeasibility is recorded together with
  the ``3 D / (alpha sqrt(k))`` analytic bound and, optionally, the cost of
  reserves procured against that bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .assignment import (
    FlowState,
    solve_ctap,
)
from .power import (
    DispatchInfeasibleError,
    PowerNetwork,
    compute_ptdf,
    economic_dispatch,
    generator_best_response,
)
from .scenario import Scenario


class CoordinationConvergenceError(RuntimeError):
    """A coordination scheme failed to reach its certification target."""


class StepSizeError(RuntimeError):
    """Dual iterates grew beyond the divergence guard; step size too large."""


def transport_cost(graph, arc_flows: np.ndarray, gamma: float) -> float:
    """Total congestion cost ``lambda' s(lambda)`` (time only, no transfers)."""
    lam = np.asarray(arc_flows, dtype=float)
    c0 = np.array([gamma * a.free_flow_time for a in graph.arcs])
    c1 = np.array([gamma * a.slope for a in graph.arcs])
    return float(lam @ (c0 + c1 * lam))


def primal_infeasibility(
    d: np.ndarray, u: np.ndarray, g: np.ndarray, H: np.ndarray, c: np.ndarray
) -> tuple[float, np.ndarray]:
    """Exact balance and flow infeasibility of one record: ``(a, w)``."""
    eta = np.asarray(d) + np.asarray(u) - np.asarray(g)
    return abs(float(np.sum(eta))), H @ eta - c


def infeasibility_norm(a: float, w: np.ndarray) -> float:
    """Scalar infeasibility: l2 norm of the balance gap and positive flow violations."""
    wp = np.maximum(w, 0.0)
    return float(math.sqrt(a * a + float(wp @ wp)))


def infeasibility_bound(k: int, alpha: float, dual_distance: float) -> float:
    """Uniform primal-infeasibility bound ``3 D / (alpha sqrt(k))``."""
    if k < 1:
        raise ValueError("bound undefined at k = 0")
    if alpha <= 0:
        raise ValueError("step size must be positive")
    if dual_distance < 0:
        raise ValueError("dual distance must be nonnegative")
    return 3.0 * dual_distance / (alpha * math.sqrt(k))


@dataclass(eq=False)
class TraceRow:
    k: int
    prices: np.ndarray
    gamma_bal: float
    mu: np.ndarray
    arc_flows: np.ndarray
    demand: np.ndarray
    g: np.ndarray
    balance_infeasibility: float
    flow_violation: np.ndarray
    infeasibility_l2: float
    itso_objective: float
    ipso_objective: float
    combined_objective: float
    dual_objective: float = float("nan")
    bound: float = float("nan")
    reserve_cost: float = float("nan")
    dispatch_feasible: bool = True


@dataclass(eq=False)
class CoordinationTrace:
    scheme: str
    rows: list[TraceRow] = field(default_factory=list)
    bus_ids: tuple[str, ...] = ()
    line_ids: tuple[str, ...] = ()
    arc_ids: tuple[str, ...] = ()

    def header(self) -> list[str]:
        cols = ["iteration", "gamma_bal"]
        cols += [f"p_{b}" for b in self.bus_ids]
        cols += [f"mu_{l}" for l in self.line_ids]
        cols += [f"d_{b}" for b in self.bus_ids]
        cols += [f"g_{b}" for b in self.bus_ids]
        cols += [f"flow_{a}" for a in self.arc_ids]
        cols += [
            "balance_infeasibility",
            "max_flow_violation",
            "infeasibility_l2",
            "bound",
            "itso_objective",
            "ipso_objective",
            "combined_objective",
            "dual_objective",
            "reserve_cost",
            "dispatch_feasible",
        ]
        return cols

    def to_csv(self, path) -> None:
        def fmt(x: float) -> str:
            return repr(float(x))

        lines = [",".join(self.header())]
        for r in self.rows:
            vals = [str(r.k), fmt(r.gamma_bal)]
            vals += [fmt(v) for v in r.prices]
            vals += [fmt(v) for v in r.mu]
            vals += [fmt(v) for v in r.demand]
            vals += [fmt(v) for v in r.g]
            vals += [fmt(v) for v in r.arc_flows]
            vals += [
                fmt(r.balance_infeasibility),
                fmt(float(np.max(r.flow_violation, initial=0.0))),
                fmt(r.infeasibility_l2),
                fmt(r.bound),
                fmt(r.itso_objective),
                fmt(r.ipso_objective),
                fmt(r.combined_objective),
                fmt(r.dual_objective),
                fmt(r.reserve_cost),
                "1" if r.dispatch_feasible else "0",
            ]
            lines.append(",".join(vals))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def _scatter(values: np.ndarray, idx: Sequence[int], size: int) -> np.ndarray:
    out = np.zeros(size)
    for k, i in enumerate(idx):
        out[i] = values[k]
    return out


def _line_dir_ids(network: PowerNetwork) -> tuple[str, ...]:
    fwd = [f"{ln.id}:fwd" for ln in network.lines]
    rev = [f"{ln.id}:rev" for ln in network.lines]
    return tuple(fwd + rev)


@dataclass(eq=False)
class SocialOptimum:
    """Joint optimum of the coupled problem with its certified duals."""

    flow_state: FlowState
    g: np.ndarray
    gamma_bal: float
    mu: np.ndarray
    prices: np.ndarray
    objective: float
    kkt_residual: float


def _joint_kkt_residual(
    scenario: Scenario,
    H: np.ndarray,
    c: np.ndarray,
    flows: Mapping[str, np.ndarray],
    lam: np.ndarray,
    g: np.ndarray,
    gamma: float,
    mu: np.ndarray,
) -> float:
    net = scenario.network
    gam_t = scenario.params.gamma
    d = scenario.demand_map.matrix @ lam
    eta = d + net.baseload - g
    prices = gamma + H.T @ mu

    scale_w = 1.0 + abs(float(np.sum(d + net.baseload)))
    scale_c = 1.0 + float(np.max(np.abs(c), initial=0.0))
    scale_p = 1.0 + float(np.max(np.abs(prices)))

    r = abs(float(np.sum(eta))) / scale_w
    slack = c - H @ eta
    r = max(r, float(np.max(-slack, initial=0.0)) / scale_c)
    r = max(r, float(np.max(np.abs(mu * slack), initial=0.0)) / (scale_c * scale_p))
    if np.any(mu < -1e-12):
        r = max(r, float(np.max(-mu)))

    marg = net.marginal_cost(g)
    at_lo = g <= net.g_min + 1e-12
    at_hi = g >= net.g_max - 1e-12
    stat = np.abs(marg - prices)
    stat[at_lo] = np.maximum(prices - marg, 0.0)[at_lo]
    stat[at_hi] = np.maximum(marg - prices, 0.0)[at_hi]
    stat[at_lo & at_hi] = 0.0
    r = max(r, float(np.max(stat)) / scale_p)

    c0 = np.array([gam_t * a.free_flow_time for a in scenario.graph.arcs])
    c1 = np.array([gam_t * a.slope for a in scenario.graph.arcs])
    grad = 2.0 * c1 * lam + c0 + scenario.demand_map.matrix.T @ prices
    for ps in scenario.pathsets:
        m = ps.vehicle_class.demand_rate
        if not ps.n_paths or m == 0:
            continue
        costs = ps.incidence.T @ grad
        cmin = float(costs.min())
        used = flows[ps.class_id] > 1e-9 * m
        if used.any():
            r = max(r, float((costs[used].max() - cmin) / (1.0 + abs(cmin))))
    return r


def _joint_polish(
    scenario: Scenario,
    H: np.ndarray,
    c: np.ndarray,
    support: dict[str, list[int]],
    active: list[int],
    gstate: np.ndarray,
    max_rounds: int = 250,
):
    """Active-set solve of the joint KKT system on a growing support.

    Returns ``(flows, g, gamma, mu_full, nu)`` or None when the
    combinatorial loop fails to settle.
    """
    net = scenario.network
    gam_t = scenario.params.gamma
    M = scenario.demand_map.matrix
    sets = [ps for ps in scenario.pathsets if ps.n_paths and ps.vehicle_class.demand_rate > 0]
    if not sets:
        return None
    c0 = np.array([gam_t * a.free_flow_time for a in scenario.graph.arcs])
    c1 = np.array([gam_t * a.slope for a in scenario.graph.arcs])
    a2, b = 2.0 * net.cost_a, net.cost_b
    nB = net.n_buses
    masses = {ps.class_id: ps.vehicle_class.demand_rate for ps in sets}
    mass_scale = max(masses.values())
    seen_states: set = set()

    for _ in range(max_rounds):
        state_key = (
            tuple((cid, tuple(s)) for cid, s in sorted(support.items())),
            tuple(sorted(active)),
            tuple(int(x) for x in gstate),
        )
        if state_key in seen_states:
            return None
        seen_states.add(state_key)

        cols, owners = [], []
        for ps in sets:
            for k in support[ps.class_id]:
                cols.append(ps.incidence[:, k])
                owners.append(ps.class_id)
        B = np.column_stack(cols)
        MB = M @ B
        nS = B.shape[1]
        free = gstate == 0
        freeidx = np.where(free)[0]
        nF = len(freeidx)
        nA = len(active)
        nQ = len(sets)
        HA = H[active] if nA else np.zeros((0, nB))
        cA = c[active] if nA else np.zeros(0)
        g_fixed = np.where(gstate < 0, net.g_min, net.g_max)

        N = nS + nF + 1 + nA + nQ
        iG = nS
        iGam = nS + nF
        iMu = iGam + 1
        iNu = iMu + nA
        K = np.zeros((N, N))
        rhs = np.zeros(N)

        # path stationarity
        K[:nS, :nS] = 2.0 * (B.T * c1) @ B
        K[:nS, iGam] = MB.T @ np.ones(nB)
        if nA:
            K[:nS, iMu:iNu] = MB.T @ HA.T
        for j, owner in enumerate(owners):
            qi = next(i for i, ps in enumerate(sets) if ps.class_id == owner)
            K[j, iNu + qi] = -1.0
        rhs[:nS] = -(B.T @ c0)

        # generator stationarity on the free set
        for r, v in enumerate(freeidx):
            K[iG + r, iG + r] = a2[v]
            K[iG + r, iGam] = -1.0
            if nA:
                K[iG + r, iMu:iNu] = -HA[:, v]
            rhs[iG + r] = -b[v]

        # balance
        K[iGam, :nS] = np.ones(nB) @ MB
        for r, v in enumerate(freeidx):
            K[iGam, iG + r] = -1.0
        rhs[iGam] = -float(np.sum(net.baseload)) + float(np.sum(g_fixed[~free]))

        # active lines
        for r in range(nA):
            K[iMu + r, :nS] = HA[r] @ MB
            for rr, v in enumerate(freeidx):
                K[iMu + r, iG + rr] = -HA[r, v]
            rhs[iMu + r] = cA[r] - float(HA[r] @ net.baseload) + float(HA[r][~free] @ g_fixed[~free])

        # class conservation
        for qi, ps in enumerate(sets):
            for j, owner in enumerate(owners):
                if owner == ps.class_id:
                    K[iNu + qi, j] = 1.0
            rhs[iNu + qi] = masses[ps.class_id]

        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        fS = sol[:nS]
        gF = sol[iG:iGam]
        gamma = float(sol[iGam])
        muA = sol[iMu:iNu]
        nu = sol[iNu:]

        # inconsistent system: a zero-curvature path direction with unequal
        # cost is trapped in the support; drop the costlier path
        sys_resid = float(np.linalg.norm(K @ sol - rhs)) / (1.0 + float(np.linalg.norm(rhs)))
        if sys_resid > 1e-10:
            lam_tmp = B @ np.maximum(fS, 0.0)
            p_tmp = float(sol[iGam]) + H.T @ _scatter(muA, active, len(c))
            grad_tmp = 2.0 * c1 * lam_tmp + c0 + M.T @ p_tmp
            worst_excess, worst_owner, worst_local = 0.0, None, -1
            for ps in sets:
                sup = support[ps.class_id]
                if len(sup) < 2:
                    continue
                costs = ps.incidence[:, sup].T @ grad_tmp
                excess = float(costs.max() - costs.min())
                if excess > worst_excess:
                    worst_excess = excess
                    worst_owner = ps.class_id
                    worst_local = int(np.argmax(costs))
            if worst_owner is not None and worst_excess > 1e-12:
                support[worst_owner].pop(worst_local)
                continue

        g = g_fixed.copy()
        g[freeidx] = gF
        mu_full = np.zeros(len(c))
        for r, li in enumerate(active):
            mu_full[li] = muA[r]
        prices = gamma + H.T @ mu_full

        # one modification per round, worst first
        neg = np.where(fS < -1e-10 * (1.0 + mass_scale))[0]
        droppable = [j for j in neg if len(support[owners[j]]) > 1]
        if droppable:
            worst = min(droppable, key=lambda j: fS[j])
            owner = owners[worst]
            local = [j for j, o in enumerate(owners) if o == owner].index(worst)
            support[owner].pop(local)
            continue
        if nA and np.min(muA) < -1e-10:
            active.pop(int(np.argmin(muA)))
            continue
        out_lo = free & (g < net.g_min - 1e-11 * (1 + np.abs(net.g_min)))
        out_hi = free & (g > net.g_max + 1e-11 * (1 + np.abs(net.g_max)))
        if out_lo.any() or out_hi.any():
            lows = np.where(out_lo, net.g_min - g, -np.inf)
            highs = np.where(out_hi, g - net.g_max, -np.inf)
            if np.max(lows) >= np.max(highs):
                gstate[int(np.argmax(lows))] = -1
            else:
                gstate[int(np.argmax(highs))] = 1
            continue
        marg_lo = a2 * net.g_min + b
        marg_hi = a2 * net.g_max + b
        pinned = net.g_max - net.g_min <= 1e-12
        wrong_lo = (gstate < 0) & ~pinned & (prices > marg_lo + 1e-10 * (1 + np.abs(prices)))
        wrong_hi = (gstate > 0) & ~pinned & (prices < marg_hi - 1e-10 * (1 + np.abs(prices)))
        if wrong_lo.any() or wrong_hi.any():
            lows = np.where(wrong_lo, prices - marg_lo, -np.inf)
            highs = np.where(wrong_hi, marg_hi - prices, -np.inf)
            if np.max(lows) >= np.max(highs):
                gstate[int(np.argmax(lows))] = 0
            else:
                gstate[int(np.argmax(highs))] = 0
            continue
        lam = B @ np.maximum(fS, 0.0)
        eta = M @ lam + net.baseload - g
        flows_pow = H @ eta
        viol = flows_pow - c
        cand = [i for i in range(len(c)) if i not in active and viol[i] > 1e-10 * (1 + abs(c[i]))]
        if cand:
            active.append(max(cand, key=lambda i: viol[i]))
            continue
        grad = 2.0 * c1 * lam + c0 + M.T @ prices
        grew = False
        for qi, ps in enumerate(sets):
            costs = ps.incidence.T @ grad
            k = int(np.argmin(costs))
            if k not in support[ps.class_id] and costs[k] < nu[qi] - 1e-10 * (1.0 + abs(nu[qi])):
                support[ps.class_id].append(k)
                support[ps.class_id].sort()
                grew = True
        if grew:
            continue

        flows = {ps.class_id: np.zeros(ps.n_paths) for ps in scenario.pathsets}
        j = 0
        for ps in sets:
            for k in support[ps.class_id]:
                flows[ps.class_id][k] = max(float(fS[j]), 0.0)
                j += 1
            s = flows[ps.class_id].sum()
            if s > 0:
                flows[ps.class_id] *= masses[ps.class_id] / s
        mu_full = np.maximum(mu_full, 0.0)
        return flows, g, gamma, mu_full, nu
    return None


def solve_social_optimum(scenario: Scenario, tol: float = 1e-6) -> SocialOptimum:
    """Joint minimizer of transport plus generation cost, KKT-certified.

    Runs the dual-decomposition protocol with diminishing steps
    ``alpha / sqrt(k)`` and primal averaging to localize the optimum, then
    certifies it exactly through the joint active-set polish.
    """
    net = scenario.network
    H = compute_ptdf(net)
    c = net.line_limits()
    params = scenario.params
    gam_t = scenario.params.gamma
    M = scenario.demand_map.matrix

    gamma = params.initial_gamma
    mu = np.full(len(c), params.initial_mu, dtype=float)
    warm = None
    phase_iters = params.so_dual_iters

    for attempt in range(3):
        fbar: dict[str, np.ndarray] = {}
        gbar = np.zeros(net.n_buses)
        count = 0
        for k in range(1, phase_iters + 1):
            step = params.alpha / math.sqrt(k)
            prices = gamma + H.T @ mu
            fs = solve_ctap(
                scenario.graph,
                scenario.pathsets,
                prices,
                gam_t,
                tol=max(params.inner_tol, 1e-10),
                demand_map=scenario.demand_map,
                warm_start=warm,
            )
            warm = fs.path_flows
            g = generator_best_response(net, prices)
            eta = fs.demand + net.baseload - g
            gamma += step * float(np.sum(eta))
            mu = np.maximum(mu + step * (H @ eta - c), 0.0)
            for cid, f in fs.path_flows.items():
                fbar[cid] = fbar.get(cid, 0.0) + f
            gbar += g
            count += 1
        for cid in fbar:
            fbar[cid] = fbar[cid] / count
        gbar /= count

        support: dict[str, list[int]] = {}
        for ps in scenario.pathsets:
            if not ps.n_paths or ps.vehicle_class.demand_rate == 0:
                continue
            m = ps.vehicle_class.demand_rate
            keep = [k for k in range(ps.n_paths) if fbar[ps.class_id][k] > 1e-9 * m]
            support[ps.class_id] = keep or [0]
        lam_bar = np.zeros(scenario.graph.n_arcs)
        for ps in scenario.pathsets:
            if ps.n_paths:
                lam_bar += ps.incidence @ fbar[ps.class_id]
        eta_bar = M @ lam_bar + net.baseload - gbar
        flows_pow = H @ eta_bar
        active = sorted(
            {i for i in range(len(c)) if mu[i] > 1e-8 or flows_pow[i] > c[i] - 1e-9 * (1 + abs(c[i]))}
        )
        gstate = np.zeros(net.n_buses, dtype=int)
        gstate[gbar <= net.g_min + 1e-12] = -1
        gstate[gbar >= net.g_max - 1e-12] = 1

        result = _joint_polish(scenario, H, c, support, list(active), gstate)
        if result is not None:
            flows, g, gamma_star, mu_star, _nu = result
            lam = np.zeros(scenario.graph.n_arcs)
            for ps in scenario.pathsets:
                if ps.n_paths:
                    lam += ps.incidence @ flows[ps.class_id]
            resid = _joint_kkt_residual(scenario, H, c, flows, lam, g, gamma_star, mu_star)
            if resid <= tol:
                prices = gamma_star + H.T @ mu_star
                d = M @ lam
                fs = FlowState(
                    path_flows=flows,
                    arc_flows=lam,
                    demand=d,
                    objective=transport_cost(scenario.graph, lam, gam_t) + float(prices @ d),
                    relative_gap=resid,
                    iterations=phase_iters,
                    converged=True,
                )
                return SocialOptimum(
                    flow_state=fs,
                    g=g,
                    gamma_bal=gamma_star,
                    mu=mu_star,
                    prices=prices,
                    objective=transport_cost(scenario.graph, lam, gam_t) + net.generation_cost(g),
                    kkt_residual=resid,
                )
        phase_iters *= 2
    raise CoordinationConvergenceError(
        "social optimum could not be certified at the requested tolerance"
    )


@dataclass(eq=False)
class CycleReport:
    found: bool
    period: int = 0
    start: int = 0
    phase_objectives: tuple[float, ...] = ()

    def __str__(self) -> str:
        if not self.found:
            return "no cycle detected"
        objs = ", ".join(f"{v:.6g}" for v in self.phase_objectives)
        return f"period-{self.period} cycle from iteration {self.start} (objectives: {objs})"


@dataclass(eq=False)
class GreedyResult:
    trace: CoordinationTrace
    cycle: CycleReport
    outcome: str


def run_greedy_pricing(scenario: Scenario, max_iters: int | None = None) -> GreedyResult:
    """Alternate myopic pricing and assignment, watching for cycles.

    The power operator prices the previous round's demand; the transport
    operator assigns at those prices.  States are quantized (prices to
    1e-4 $/MWh, demands to 1e-3 MWh) and hashed; a repeat is a cycle.  A
    dispatch infeasibility is an outcome (recorded with the shed-load
    interpretation), not a crash.
    """
    net = scenario.network
    params = scenario.params
    H = compute_ptdf(net)
    c = net.line_limits()
    max_iters = max_iters if max_iters is not None else params.greedy_max_iters

    trace = CoordinationTrace(
        scheme="greedy",
        bus_ids=net.buses,
        line_ids=_line_dir_ids(net),
        arc_ids=tuple(a.id for a in scenario.graph.arcs),
    )
    prices = np.full(net.n_buses, params.initial_price, dtype=float)
    gamma_bal, mu = params.initial_price, np.zeros(len(c))
    warm = None
    seen: dict = {}
    cycle = CycleReport(found=False)
    outcome = "no-cycle"

    for i in range(max_iters):
        fs = solve_ctap(
            scenario.graph,
            scenario.pathsets,
            prices,
            params.gamma,
            tol=max(params.inner_tol, 1e-10),
            demand_map=scenario.demand_map,
            warm_start=warm,
        )
        warm = fs.path_flows
        d = fs.demand
        t_cost = transport_cost(scenario.graph, fs.arc_flows, params.gamma)
        try:
            disp = economic_dispatch(net, d, H=H)
        except DispatchInfeasibleError as exc:
            a_act, w_act = primal_infeasibility(d, net.baseload, np.zeros(net.n_buses), H, c)
            trace.rows.append(
                TraceRow(
                    k=i,
                    prices=prices,
                    gamma_bal=gamma_bal,
                    mu=mu,
                    arc_flows=fs.arc_flows,
                    demand=d,
                    g=np.full(net.n_buses, np.nan),
                    balance_infeasibility=a_act,
                    flow_violation=w_act,
                    infeasibility_l2=infeasibility_norm(a_act, w_act),
                    itso_objective=fs.objective,
                    ipso_objective=float("nan"),
                    combined_objective=float("nan"),
                    dispatch_feasible=False,
                )
            )
            outcome = f"infeasible-dispatch (load shed; minimal violation {exc.max_violation:.4g} MWh)"
            break

        a_act, w_act = primal_infeasibility(d, net.baseload, disp.g, H, c)
        trace.rows.append(
            TraceRow(
                k=i,
                prices=prices,
                gamma_bal=gamma_bal,
                mu=mu,
                arc_flows=fs.arc_flows,
                demand=d,
                g=disp.g,
                balance_infeasibility=a_act,
                flow_violation=w_act,
                infeasibility_l2=infeasibility_norm(a_act, w_act),
                itso_objective=fs.objective,
                ipso_objective=disp.objective,
                combined_objective=t_cost + disp.objective,
            )
        )
        key = (
            tuple(np.round(prices, 4).tolist()),
            tuple(np.round(d, 3).tolist()),
        )
        if key in seen:
            start = seen[key]
            period = i - start
            if period <= params.cycle_max_period:
                cycle = CycleReport(
                    found=True,
                    period=period,
                    start=start,
                    phase_objectives=tuple(
                        trace.rows[start + t].combined_objective for t in range(period)
                    ),
                )
                outcome = f"cycle period {period}"
                break
        seen[key] = i
        prices = disp.prices
        gamma_bal, mu = disp.gamma_bal, disp.mu

    return GreedyResult(trace=trace, cycle=cycle, outcome=outcome)


def run_dual_decomposition(
    scenario: Scenario,
    alpha: float | None = None,
    max_iters: int | None = None,
    tol: float = 0.0,
    *,
    social_optimum: SocialOptimum | None = None,
    dual_bound: float | None = None,
    reserve_overlay: bool = False,
    divergence_factor: float = 1e4,
) -> CoordinationTrace:
    """Constant-step collaborative pricing with infeasibility instrumentation.

    When ``tol > 0`` and a social-optimum reference is given, stops once the
    combined objective is within ``tol`` (relative) of the reference.  With
    ``reserve_overlay`` the per-iteration reserve procurement against the
    analytic bound is recorded (requires ``dual_bound``).
    """
    net = scenario.network
    params = scenario.params
    alpha = params.alpha if alpha is None else alpha
    max_iters = params.max_iters if max_iters is None else max_iters
    if alpha <= 0:
        raise ValueError("step size must be positive")
    if reserve_overlay and dual_bound is None:
        raise ValueError("reserve overlay requires a dual-distance bound")

    H = compute_ptdf(net)
    c = net.line_limits()
    trace = CoordinationTrace(
        scheme="dual-decomposition",
        bus_ids=net.buses,
        line_ids=_line_dir_ids(net),
        arc_ids=tuple(a.id for a in scenario.graph.arcs),
    )

    gamma = params.initial_gamma
    mu = np.full(len(c), params.initial_mu, dtype=float)
    dual_norm0 = math.hypot(gamma, float(np.linalg.norm(mu)))
    guard = divergence_factor * (1.0 + dual_norm0 + (dual_bound or 0.0))

    if reserve_overlay:
        from . import reserves as reserves_mod

    for k in range(max_iters):
        prices = gamma + H.T @ mu
        fs = solve_ctap(
            scenario.graph,
            scenario.pathsets,
            prices,
            params.gamma,
            tol=params.inner_tol,
            demand_map=scenario.demand_map,
            polish=False,
        )
        g = generator_best_response(net, prices)
        d = fs.demand
        a_act, w_act = primal_infeasibility(d, net.baseload, g, H, c)
        t_cost = transport_cost(scenario.graph, fs.arc_flows, params.gamma)
        gen_cost = net.generation_cost(g)
        dual_obj = (
            fs.objective
            + (gen_cost - float(prices @ g))
            + gamma * float(np.sum(net.baseload))
            + float(mu @ (H @ net.baseload - c))
        )
        bound = (
            infeasibility_bound(k, alpha, dual_bound)
            if (dual_bound is not None and k >= 1)
            else float("nan")
        )
        reserve_cost = float("nan")
        if reserve_overlay and k >= 1:
            xi = np.full(net.n_buses, params.reserve_price)
            cone = reserves_mod.sample_dual_cone(
                net, params.overlay_cone_samples, seed=params.seed + 7919 * k, H=H
            )
            eta_min, eta_max = reserves_mod.default_eta_box(net, scenario.d_min, scenario.d_max)
            unc = reserves_mod.sample_uncertainty_set(
                net,
                bound,
                bound,
                eta_min,
                eta_max,
                params.overlay_uncertainty_samples,
                seed=params.seed + 104729 * k,
                H=H,
            )
            plan = reserves_mod.procure_reserves(xi, cone, unc, H=H, c=c)
            reserve_cost = plan.cost

        trace.rows.append(
            TraceRow(
                k=k,
                prices=prices,
                gamma_bal=gamma,
                mu=mu.copy(),
                arc_flows=fs.arc_flows,
                demand=d,
                g=g,
                balance_infeasibility=a_act,
                flow_violation=w_act,
                infeasibility_l2=infeasibility_norm(a_act, w_act),
                itso_objective=fs.objective,
                ipso_objective=gen_cost,
                combined_objective=t_cost + gen_cost,
                dual_objective=dual_obj,
                bound=bound,
                reserve_cost=reserve_cost,
            )
        )

        if (
            tol > 0
            and social_optimum is not None
            and abs(t_cost + gen_cost - social_optimum.objective)
            <= tol * abs(social_optimum.objective)
        ):
            break

        eta = d + net.baseload - g
        gamma = gamma + alpha * float(np.sum(eta))
        mu = np.maximum(mu + alpha * (H @ eta - c), 0.0)
        if math.hypot(gamma, float(np.linalg.norm(mu))) > guard:
            raise StepSizeError(
                f"dual iterates exceeded the divergence guard at iteration {k}; "
                f"reduce the step size (alpha={alpha})"
            )
    return trace
