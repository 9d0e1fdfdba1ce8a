"""DC power network model: PTDF, economic dispatch, locational prices.

Dispatch minimizes the total quadratic generation cost subject to generator
boxes, nodal balance, and directed line-flow limits under the DC
approximation.  The solver works on the dual: a closed-form balance-only
price found by breakpoint search, then a primal-dual active-set loop over
line constraints whose equality-KKT subproblems are small linear systems.
A projected dual-gradient pass backs it up on the rare instance where the
combinatorial loop stalls.  Duals are the product here, not a by-product:
prices are assembled as ``p = gamma * 1 + H^T mu`` and KKT residuals are
reported with the result.

Quantities are MWh per epoch; prices are $/MWh.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linprog


class DispatchInfeasibleError(RuntimeError):
    """No feasible generation mix exists for the requested demand."""

    def __init__(self, message: str, max_violation: float = float("nan")):
        super().__init__(message)
        self.max_violation = max_violation


class DispatchConvergenceError(RuntimeError):
    """The dispatch solver failed to certify KKT conditions."""


@dataclass(frozen=True)
class Line:
    id: str
    from_bus: str
    to_bus: str
    susceptance: float
    limit_fwd: float
    limit_rev: float

    def __post_init__(self) -> None:
        if self.susceptance <= 0:
            raise ValueError(f"line {self.id}: susceptance must be positive")
        if self.limit_fwd < 0 or self.limit_rev < 0:
            raise ValueError(f"line {self.id}: negative flow limit")
        if self.from_bus == self.to_bus:
            raise ValueError(f"line {self.id}: self-loop")


@dataclass(frozen=True, eq=False)
class PowerNetwork:
    """Connected grid with one merged quadratic-cost generator per bus.

    Buses without physical generation use ``g_min = g_max = 0``.  Cost is
    ``a g^2 + b g`` with ``a > 0`` per bus (strong convexity keeps the
    dispatch dual smooth and its optimal multipliers bounded).
    """

    buses: tuple[str, ...]
    lines: tuple[Line, ...]
    cost_a: np.ndarray
    cost_b: np.ndarray
    g_min: np.ndarray
    g_max: np.ndarray
    baseload: np.ndarray
    slack: str

    def __post_init__(self) -> None:
        n = len(self.buses)
        for name in ("cost_a", "cost_b", "g_min", "g_max", "baseload"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise ValueError(f"{name}: expected shape ({n},), got {arr.shape}")
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if np.any(self.cost_a <= 0):
            raise ValueError("cost_a must be strictly positive on every bus")
        if np.any(self.g_min > self.g_max):
            raise ValueError("g_min exceeds g_max")
        if np.any(self.baseload < 0):
            raise ValueError("negative baseload")
        if self.slack not in self.buses:
            raise ValueError(f"slack bus {self.slack!r} unknown")
        if not self._connected():
            raise ValueError("power network is not connected")

    def _connected(self) -> bool:
        if len(self.buses) == 1:
            return True
        adj: dict[str, set[str]] = {b: set() for b in self.buses}
        for ln in self.lines:
            adj[ln.from_bus].add(ln.to_bus)
            adj[ln.to_bus].add(ln.from_bus)
        seen = {self.buses[0]}
        stack = [self.buses[0]]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == len(self.buses)

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    def bus_index(self, bus: str) -> int:
        return self.buses.index(bus)

    def generation_cost(self, g: np.ndarray) -> float:
        return float(np.sum(self.cost_a * g * g + self.cost_b * g))

    def marginal_cost(self, g: np.ndarray) -> np.ndarray:
        return 2.0 * self.cost_a * g + self.cost_b

    def line_limits(self) -> np.ndarray:
        """Directed limit vector matching the PTDF row order (fwd then rev)."""
        fwd = np.array([ln.limit_fwd for ln in self.lines])
        rev = np.array([ln.limit_rev for ln in self.lines])
        return np.concatenate([fwd, rev])


@dataclass(frozen=True, eq=False)
class DispatchResult:
    g: np.ndarray
    gamma_bal: float
    mu: np.ndarray
    prices: np.ndarray
    kkt_residual: float
    binding: tuple[int, ...] = ()
    objective: float = 0.0

    def price_of(self, network: PowerNetwork) -> Mapping[str, float]:
        return {b: float(p) for b, p in zip(network.buses, self.prices)}


def compute_ptdf(network: PowerNetwork, slack: str | None = None) -> np.ndarray:
    """Directed PTDF mapping net withdrawals ``d + u - g`` to line flows.

    Rows are the forward line directions followed by the reverse ones, so
    ``H @ eta <= network.line_limits()`` covers both flow signs.  The slack
    column is identically zero.
    """
    slack = network.slack if slack is None else slack
    n = network.n_buses
    if slack not in network.buses:
        raise ValueError(f"slack bus {slack!r} unknown")
    s = network.bus_index(slack)
    lap = np.zeros((n, n))
    for ln in network.lines:
        i, j = network.bus_index(ln.from_bus), network.bus_index(ln.to_bus)
        lap[i, i] += ln.susceptance
        lap[j, j] += ln.susceptance
        lap[i, j] -= ln.susceptance
        lap[j, i] -= ln.susceptance
    keep = [k for k in range(n) if k != s]
    x = np.zeros((n, n))
    x[np.ix_(keep, keep)] = np.linalg.inv(lap[np.ix_(keep, keep)])
    fwd = np.zeros((len(network.lines), n))
    for li, ln in enumerate(network.lines):
        i, j = network.bus_index(ln.from_bus), network.bus_index(ln.to_bus)
        # theta = x @ (-eta); flow = b * (theta_i - theta_j)
        fwd[li] = -ln.susceptance * (x[i] - x[j])
    return np.vstack([fwd, -fwd])


def generator_best_response(network: PowerNetwork, prices: np.ndarray) -> np.ndarray:
    """Profit-maximizing output per bus at posted prices (closed form)."""
    p = np.asarray(prices, dtype=float)
    return np.clip((p - network.cost_b) / (2.0 * network.cost_a), network.g_min, network.g_max)


def _balance_price(network: PowerNetwork, total: float) -> float:
    """Exact uniform price clearing ``sum(g) = total`` ignoring lines.

    Breakpoint search over the piecewise-linear aggregate supply curve.
    """
    a, b = network.cost_a, network.cost_b
    lo_p = 2 * a * network.g_min + b
    hi_p = 2 * a * network.g_max + b
    bps = np.unique(np.concatenate([lo_p, hi_p]))

    def supply(price: float) -> float:
        return float(np.sum(np.clip((price - b) / (2 * a), network.g_min, network.g_max)))

    if total <= supply(bps[0]):
        return float(bps[0])
    if total >= supply(bps[-1]):
        return float(bps[-1])
    for lo, hi in zip(bps[:-1], bps[1:]):
        if supply(lo) <= total <= supply(hi):
            free = (lo_p < hi - 1e-15) & (hi_p > lo + 1e-15)
            inv = np.sum(1.0 / (2 * a[free]))
            fixed = supply(lo) - np.sum(np.clip((lo - b[free]) / (2 * a[free]), network.g_min[free], network.g_max[free]))
            if inv <= 0:
                return float(lo)
            return float(lo + (total - fixed - np.sum((lo - b[free]) / (2 * a[free]))) / inv)
    return float(bps[-1])


def _kkt_subproblem(
    network: PowerNetwork,
    w: np.ndarray,
    H: np.ndarray,
    c: np.ndarray,
    active: Sequence[int],
    gamma0: float,
) -> tuple[np.ndarray, float, np.ndarray] | None:
    """Solve dispatch with the given line constraints held at equality.

    Iterates on the generator clamp pattern; returns ``(g, gamma, mu_A)``
    or None if no consistent clamp pattern is found.
    """
    n = network.n_buses
    a, b = network.cost_a, network.cost_b
    HA = H[list(active)] if active else np.zeros((0, n))
    cA = c[list(active)] if active else np.zeros(0)
    total = float(np.sum(w))
    gamma, mu = gamma0, np.zeros(len(active))
    lo_state = np.zeros(n, dtype=int)  # -1 at g_min, +1 at g_max, 0 free

    for _ in range(4 * n + 8):
        p = gamma + (HA.T @ mu if len(active) else 0.0)
        g_unc = (p - b) / (2 * a)
        state = np.where(g_unc <= network.g_min, -1, np.where(g_unc >= network.g_max, 1, 0))
        free = state == 0
        g_fixed = np.where(state < 0, network.g_min, network.g_max)
        # Linear system in (gamma, mu_A) from balance + active lines,
        # with g_free = (gamma + HA^T mu - b)/(2a) on the free set.
        inv2a = np.zeros(n)
        inv2a[free] = 1.0 / (2 * a[free])
        J1 = np.empty((1 + len(active), 1 + len(active)))
        rhs = np.empty(1 + len(active))
        # balance row: sum(g_free) + sum(g_fixed) = total
        J1[0, 0] = np.sum(inv2a)
        if len(active):
            J1[0, 1:] = HA @ inv2a
        rhs[0] = total - float(np.sum(g_fixed[~free])) + float(np.sum(inv2a * b))
        # line rows: HA (w - g) = cA  ->  HA g = HA w - cA
        for r in range(len(active)):
            J1[1 + r, 0] = float(np.sum(HA[r] * inv2a))
            J1[1 + r, 1:] = HA @ (inv2a * HA[r])
            rhs[1 + r] = float(HA[r] @ w) - cA[r] - float(HA[r][~free] @ g_fixed[~free]) + float(np.sum(HA[r] * inv2a * b))
        sol, *_ = np.linalg.lstsq(J1, rhs, rcond=None)
        gamma = float(sol[0])
        mu = sol[1:]
        p = gamma + (HA.T @ mu if len(active) else 0.0)
        g = np.clip((p - b) / (2 * a), network.g_min, network.g_max)
        new_state = np.where((p - b) / (2 * a) <= network.g_min, -1,
                             np.where((p - b) / (2 * a) >= network.g_max, 1, 0))
        if np.array_equal(new_state, lo_state) or np.array_equal(new_state, state):
            resid = abs(np.sum(w - g) )
            line_resid = np.max(np.abs(HA @ (w - g) - cA)) if len(active) else 0.0
            if resid <= 1e-7 * (1 + abs(total)) and line_resid <= 1e-7 * (1 + np.max(np.abs(c), initial=1.0)):
                return g, gamma, mu
            return None
        lo_state = state
    return None


def _feasibility_lp(network: PowerNetwork, w: np.ndarray, H: np.ndarray, c: np.ndarray) -> float:
    """Minimal infinity-norm constraint violation over the generator box."""
    n = network.n_buses
    # variables: g (n), s (1); minimize s
    cost = np.zeros(n + 1)
    cost[-1] = 1.0
    rows = []
    rhs = []
    ones = np.ones(n)
    rows.append(np.concatenate([ones, [-1.0]]))
    rhs.append(float(np.sum(w)))
    rows.append(np.concatenate([-ones, [-1.0]]))
    rhs.append(-float(np.sum(w)))
    for r in range(H.shape[0]):
        rows.append(np.concatenate([-H[r], [-1.0]]))
        rhs.append(float(c[r] - H[r] @ w))
    bounds = [(lo, hi) for lo, hi in zip(network.g_min, network.g_max)] + [(0, None)]
    res = linprog(cost, A_ub=np.array(rows), b_ub=np.array(rhs), bounds=bounds, method="highs")
    if res.status != 0:
        return float("inf")
    return float(res.x[-1])


def _dual_gradient(
    network: PowerNetwork,
    w: np.ndarray,
    H: np.ndarray,
    c: np.ndarray,
    gamma: float,
    mu: np.ndarray,
    iters: int,
) -> tuple[float, np.ndarray]:
    """Accelerated projected gradient ascent on the dispatch dual."""
    a = network.cost_a
    J = np.vstack([np.ones((1, network.n_buses)), H])
    L = float(np.linalg.eigvalsh(J @ np.diag(1.0 / (2 * a)) @ J.T).max())
    step = 1.0 / max(L, 1e-12)
    y_g, y_m = gamma, mu.copy()
    t = 1.0
    prev_g, prev_m = gamma, mu.copy()
    for _ in range(iters):
        p = y_g + H.T @ y_m
        g = np.clip((p - network.cost_b) / (2 * a), network.g_min, network.g_max)
        eta = w - g
        grad_g = float(np.sum(eta))
        grad_m = H @ eta - c
        new_g = y_g + step * grad_g
        new_m = np.maximum(y_m + step * grad_m, 0.0)
        t_new = (1 + np.sqrt(1 + 4 * t * t)) / 2
        y_g = new_g + (t - 1) / t_new * (new_g - prev_g)
        y_m = np.maximum(new_m + (t - 1) / t_new * (new_m - prev_m), 0.0)
        prev_g, prev_m, t = new_g, new_m, t_new
    return prev_g, prev_m


def _residuals(
    network: PowerNetwork,
    w: np.ndarray,
    H: np.ndarray,
    c: np.ndarray,
    g: np.ndarray,
    gamma: float,
    mu: np.ndarray,
) -> float:
    p = gamma + H.T @ mu
    scale_w = 1.0 + abs(float(np.sum(w)))
    scale_c = 1.0 + float(np.max(np.abs(c), initial=0.0))
    scale_p = 1.0 + float(np.max(np.abs(p)))
    slack = c - H @ (w - g)
    r = abs(float(np.sum(w - g))) / scale_w
    r = max(r, float(np.max(-slack, initial=0.0)) / scale_c)
    r = max(r, float(np.max(np.abs(mu * slack), initial=0.0)) / (scale_c * scale_p))
    marg = network.marginal_cost(g)
    at_lo = g <= network.g_min + 1e-12
    at_hi = g >= network.g_max - 1e-12
    stat = np.abs(marg - p)
    stat[at_lo] = np.maximum(p - marg, 0.0)[at_lo]
    stat[at_hi] = np.maximum(marg - p, 0.0)[at_hi]
    stat[at_lo & at_hi] = 0.0  # pinned generator: any price is consistent
    r = max(r, float(np.max(stat)) / scale_p)
    r = max(r, float(np.max(np.maximum(network.g_min - g, g - network.g_max), initial=0.0)) / scale_w)
    return r


def economic_dispatch(
    network: PowerNetwork,
    d: np.ndarray | Mapping[str, float],
    tol: float = 1e-6,
    H: np.ndarray | None = None,
) -> DispatchResult:
    """Least-cost feasible dispatch for charging demand ``d`` with certified KKT.

    Raises :class:`DispatchInfeasibleError` (with the minimal achievable
    violation) when no feasible mix exists, and
    :class:`DispatchConvergenceError` when certification fails.
    """
    if isinstance(d, Mapping):
        dv = np.array([float(d.get(b, 0.0)) for b in network.buses])
    else:
        dv = np.asarray(d, dtype=float)
    if dv.shape != (network.n_buses,):
        raise ValueError(f"demand vector has shape {dv.shape}, expected ({network.n_buses},)")
    if np.any(dv < -1e-12):
        raise ValueError("negative charging demand")

    w = dv + network.baseload
    if H is None:
        H = compute_ptdf(network)
    c = network.line_limits()
    total = float(np.sum(w))
    if total > np.sum(network.g_max) + 1e-9 or total < np.sum(network.g_min) - 1e-9:
        gap = max(total - float(np.sum(network.g_max)), float(np.sum(network.g_min)) - total)
        raise DispatchInfeasibleError(
            f"total demand {total:.6g} outside aggregate generation range", gap
        )

    gamma0 = _balance_price(network, total)
    active: list[int] = []
    best: tuple[np.ndarray, float, np.ndarray] | None = None
    for _ in range(6 * len(c) + 20):
        sol = _kkt_subproblem(network, w, H, c, active, gamma0)
        if sol is None:
            break
        g, gamma, muA = sol
        # drop the most negative multiplier first
        if len(active) and np.min(muA) < -1e-10:
            active.pop(int(np.argmin(muA)))
            continue
        flows = H @ (w - g)
        viol = flows - c
        cand = [i for i in range(len(c)) if i not in active and viol[i] > 1e-10 * (1 + abs(c[i]))]
        if cand:
            active.append(max(cand, key=lambda i: viol[i]))
            continue
        best = (g, gamma, muA)
        break

    if best is None:
        # fall back: certify feasibility, then dual gradient + one more pass
        worst = _feasibility_lp(network, w, H, c)
        if worst > 1e-7 * (1 + abs(total)):
            raise DispatchInfeasibleError(
                f"dispatch infeasible; minimal violation {worst:.6g}", worst
            )
        gamma, mu_full = _dual_gradient(network, w, H, c, gamma0, np.zeros(len(c)), 20_000)
        active = [i for i in range(len(c)) if mu_full[i] > 1e-8]
        sol = _kkt_subproblem(network, w, H, c, active, gamma)
        if sol is not None:
            g, gamma, muA = sol
            if (not len(active) or np.min(muA) >= -1e-9) and np.max(H @ (w - g) - c, initial=0.0) <= 1e-8 * (1 + np.max(c, initial=1.0)):
                best = (g, gamma, muA)
        if best is None:
            p = gamma + H.T @ mu_full
            g = np.clip((p - network.cost_b) / (2 * network.cost_a), network.g_min, network.g_max)
            best = (g, gamma, mu_full[active] if active else np.zeros(0))

    g, gamma, muA = best
    mu = np.zeros(len(c))
    for k, i in enumerate(active):
        mu[i] = max(float(muA[k]), 0.0)
    prices = gamma + H.T @ mu
    resid = _residuals(network, w, H, c, g, gamma, mu)
    if resid > tol:
        raise DispatchConvergenceError(
            f"dispatch KKT residual {resid:.3e} exceeds tolerance {tol:.1e}"
        )
    slack = c - H @ (w - g)
    binding = tuple(i for i in range(len(c)) if mu[i] > 1e-9 or slack[i] <= 1e-9 * (1 + abs(c[i])))
    return DispatchResult(
        g=g,
        gamma_bal=float(gamma),
        mu=mu,
        prices=prices,
        kkt_residual=float(resid),
        binding=binding,
        objective=network.generation_cost(g),
    )


@dataclass(frozen=True)
class FeasibilityReport:
    ok: bool
    checked: int
    failures: tuple[tuple[str, float], ...]

    def __str__(self) -> str:
        if self.ok:
            return f"feasible on all {self.checked} sampled demand profiles"
        worst = ", ".join(f"{name} (violation {v:.4g})" for name, v in self.failures[:5])
        return f"infeasible demand profiles found: {worst}"


def validate_feasibility(
    network: PowerNetwork,
    d_min: np.ndarray,
    d_max: np.ndarray,
    grid: int = 3,
) -> FeasibilityReport:
    """Certify dispatch feasibility over the declared demand box.

    Checks every box corner (over buses with a nonzero range) plus a coarse
    interior grid; each check is an LP feasibility subproblem.
    """
    d_min = np.asarray(d_min, dtype=float)
    d_max = np.asarray(d_max, dtype=float)
    if np.any(d_min > d_max + 1e-12):
        raise ValueError("d_min exceeds d_max")
    H = compute_ptdf(network)
    c = network.line_limits()
    varying = [i for i in range(network.n_buses) if d_max[i] - d_min[i] > 1e-12]
    samples: list[tuple[str, np.ndarray]] = []
    if len(varying) <= 12:
        for mask in range(2 ** len(varying)):
            d = d_min.copy()
            tags = []
            for k, i in enumerate(varying):
                if mask >> k & 1:
                    d[i] = d_max[i]
                    tags.append(network.buses[i])
            samples.append(("corner[" + ",".join(tags) + "]", d))
    else:
        rng = np.random.default_rng(0)
        for s in range(2 ** 12):
            pick = rng.integers(0, 2, size=len(varying))
            d = d_min.copy()
            for k, i in enumerate(varying):
                if pick[k]:
                    d[i] = d_max[i]
            samples.append((f"corner-sample-{s}", d))
    for t in np.linspace(0.0, 1.0, max(grid, 2)):
        samples.append((f"grid-{t:.2f}", d_min + t * (d_max - d_min)))

    failures = []
    for name, d in samples:
        viol = _feasibility_lp(network, d + network.baseload, H, c)
        if viol > 1e-7 * (1 + float(np.sum(d + network.baseload))):
            failures.append((name, viol))
    return FeasibilityReport(ok=not failures, checked=len(samples), failures=tuple(failures))
