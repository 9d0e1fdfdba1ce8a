"""Reserve procurement for trial-and-error pricing.

While prices are tuned by observing demand, the balance and flow
constraints are transiently violated; the operator pre-procures nodal
reserve capacity ``r`` that can absorb any imbalance ``eta = d + u - g``
inside the uncertainty polytope implied by the per-iteration infeasibility
bounds.  The semi-infinite robust constraint (max over the uncertainty set
and the dual cone of a bilinear form) is replaced by finitely many sampled
linear cuts, turning procurement into a small LP; deployment against a
realized imbalance is an LP feasibility problem.

The dual-distance bound that scales the uncertainty set is estimated by a
seeded sweep of economic dispatches over the declared demand box (a
sampling stand-in for enumerating all reachable demand profiles), inflated
by a safety factor.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

from .power import PowerNetwork, compute_ptdf, economic_dispatch

CONE_IDENTITY_TOL = 1e-10


class UncertaintySetEmptyError(RuntimeError):
    """The sampled uncertainty polytope admits no point."""


class DegenerateSampleError(RuntimeError):
    """A cone sample makes the procurement LP infeasible."""


@dataclass(frozen=True, eq=False)
class UncertaintySample:
    eta: np.ndarray


@dataclass(frozen=True, eq=False)
class DualConeSample:
    theta1: float
    theta2: np.ndarray
    theta3: np.ndarray
    theta4: np.ndarray

    def identity_residual(self, H: np.ndarray) -> float:
        res = self.theta1 * np.ones(H.shape[1]) - H.T @ self.theta2 - self.theta3 + self.theta4
        return float(np.max(np.abs(res)))


@dataclass(eq=False)
class ReservePlan:
    r: np.ndarray
    cost: float
    n_cone_samples: int
    n_uncertainty_samples: int
    feasibility_residual: float
    complementarity_residual: float
    stationarity_residual: float
    cuts: tuple = ()

    @property
    def optimality_residual(self) -> float:
        return max(
            self.feasibility_residual,
            self.complementarity_residual,
            self.stationarity_residual,
        )


@dataclass(eq=False)
class DeployResult:
    feasible: bool
    y: np.ndarray | None
    max_violation: float


@dataclass(eq=False)
class AdequacyReport:
    fraction: float
    n_samples: int
    failures: tuple[int, ...]

    def __str__(self) -> str:
        return f"{self.fraction:.2%} of {self.n_samples} imbalance samples deployable"


def default_eta_box(
    network: PowerNetwork, d_min: np.ndarray, d_max: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Widest physically consistent imbalance box for the demand box."""
    u = network.baseload
    return (
        np.asarray(d_min, dtype=float) + u - network.g_max,
        np.asarray(d_max, dtype=float) + u - network.g_min,
    )


def estimate_dual_bound(
    network: PowerNetwork,
    d_min: np.ndarray,
    d_max: np.ndarray,
    samples: int = 200,
    seed: int = 0,
    safety: float = 1.5,
    H: np.ndarray | None = None,
    workers: int = 1,
) -> float:
    """Upper estimate of the optimal dual norm over the demand box.

    Sweeps dispatches over box corners, the center, and ``samples`` seeded
    uniform draws; returns ``safety * max ||(gamma, mu)||_2``.  The sweep is
    the desk-scale stand-in for enumerating every reachable demand profile.
    """
    d_min = np.asarray(d_min, dtype=float)
    d_max = np.asarray(d_max, dtype=float)
    if H is None:
        H = compute_ptdf(network)
    candidates: list[np.ndarray] = []
    varying = [i for i in range(network.n_buses) if d_max[i] - d_min[i] > 1e-15]
    if len(varying) <= 12:
        for mask in range(2 ** len(varying)):
            d = d_min.copy()
            for k, i in enumerate(varying):
                if mask >> k & 1:
                    d[i] = d_max[i]
            candidates.append(d)
    candidates.append(0.5 * (d_min + d_max))
    rng = np.random.default_rng(seed)
    for _ in range(samples):
        candidates.append(d_min + rng.random(network.n_buses) * (d_max - d_min))

    def dual_norm(d: np.ndarray) -> float:
        res = economic_dispatch(network, d, H=H)
        return math.hypot(res.gamma_bal, float(np.linalg.norm(res.mu)))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            norms = list(pool.map(dual_norm, candidates))
    else:
        norms = [dual_norm(d) for d in candidates]
    return safety * max(norms)


def _in_uncertainty_set(
    eta: np.ndarray,
    a_k: float,
    w_k: np.ndarray,
    eta_min: np.ndarray,
    eta_max: np.ndarray,
    H: np.ndarray,
    c: np.ndarray,
    tol: float = 1e-9,
) -> bool:
    if abs(float(np.sum(eta))) > a_k + tol:
        return False
    if np.any(eta < eta_min - tol) or np.any(eta > eta_max + tol):
        return False
    return bool(np.all(H @ eta - c <= w_k + tol))


def sample_uncertainty_set(
    network: PowerNetwork,
    a_k: float,
    w_k: float | np.ndarray,
    eta_min: np.ndarray,
    eta_max: np.ndarray,
    n_samples: int,
    seed: int = 0,
    H: np.ndarray | None = None,
) -> list[UncertaintySample]:
    """Seeded samples of the imbalance polytope.

    Box draws are shifted uniformly onto the balance band ``|1'eta| <= a_k``
    and rejected against the remaining constraints; box corners satisfying
    everything are included first.  Deterministic for a fixed seed.
    """
    if a_k < 0:
        raise ValueError("a_k must be nonnegative")
    if H is None:
        H = compute_ptdf(network)
    c = network.line_limits()
    n = network.n_buses
    eta_min = np.asarray(eta_min, dtype=float)
    eta_max = np.asarray(eta_max, dtype=float)
    wk = np.full(len(c), float(w_k)) if np.isscalar(w_k) else np.asarray(w_k, dtype=float)

    accepted: list[np.ndarray] = []

    def consider(eta: np.ndarray) -> bool:
        if _in_uncertainty_set(eta, a_k, wk, eta_min, eta_max, H, c):
            accepted.append(eta)
            return True
        return False

    varying = [i for i in range(n) if eta_max[i] - eta_min[i] > 1e-15]
    if len(varying) <= 12:
        for mask in range(2 ** len(varying)):
            eta = eta_min.copy()
            for k, i in enumerate(varying):
                if mask >> k & 1:
                    eta[i] = eta_max[i]
            if len(accepted) < n_samples:
                consider(eta)
    if len(accepted) < n_samples:
        consider(np.clip(np.zeros(n), eta_min, eta_max))
        consider(0.5 * (eta_min + eta_max))

    rng = np.random.default_rng(seed)
    budget = 400 * max(n_samples, 1)
    anchor = accepted[0] if accepted else None
    while len(accepted) < n_samples and budget > 0:
        budget -= 1
        eta = eta_min + rng.random(n) * (eta_max - eta_min)
        s = float(np.sum(eta))
        target = min(max(s, -a_k), a_k)
        eta = eta - (s - target) / n
        if consider(eta):
            anchor = anchor if anchor is not None else accepted[0]
            continue
        if anchor is not None:
            # walk toward a known-feasible point; the set is convex
            for t in (0.5, 0.8, 0.95):
                cand = (1 - t) * eta + t * anchor
                if consider(cand):
                    break
    if not accepted:
        raise UncertaintySetEmptyError(
            "no imbalance sample satisfies the uncertainty constraints"
        )
    while len(accepted) < n_samples:
        accepted.append(accepted[len(accepted) % max(len(accepted), 1)].copy())
    return [UncertaintySample(eta=e) for e in accepted[:n_samples]]


def _make_cone_point(theta1: float, theta2: np.ndarray, n: int, H: np.ndarray) -> DualConeSample | None:
    s = theta1 * np.ones(n) - H.T @ theta2
    theta3 = np.maximum(s, 0.0)
    theta4 = np.maximum(-s, 0.0)
    scale = max(abs(theta1), float(np.max(theta2, initial=0.0)),
                float(np.max(theta3, initial=0.0)), float(np.max(theta4, initial=0.0)))
    if scale < 1e-12:
        return None
    return DualConeSample(
        theta1=theta1 / scale,
        theta2=theta2 / scale,
        theta3=theta3 / scale,
        theta4=theta4 / scale,
    )


def sample_dual_cone(
    network: PowerNetwork,
    n_samples: int,
    seed: int = 0,
    H: np.ndarray | None = None,
) -> list[DualConeSample]:
    """Constructive seeded samples of the procurement dual cone.

    Draw ``theta1`` and nonnegative ``theta2``, split the residual of the
    defining identity into its positive and negative parts, and normalize
    to unit infinity norm (the cone is scale invariant in the procurement
    constraint); the zero point is skipped.  The binding cone points of
    the procurement LP are its extreme rays, which carry sparse ``theta2``,
    so deterministic balance and single-line rays come first and random
    draws use sparse supports.
    """
    if H is None:
        H = compute_ptdf(network)
    n = network.n_buses
    n_dirs = H.shape[0]
    rng = np.random.default_rng(seed)
    out: list[DualConeSample] = []

    def push(theta1: float, theta2: np.ndarray) -> None:
        if len(out) < n_samples:
            pt = _make_cone_point(theta1, theta2, n, H)
            if pt is not None:
                out.append(pt)

    # pure balance rays, then single-line rays paired with each theta1 sign
    push(1.0, np.zeros(n_dirs))
    push(-1.0, np.zeros(n_dirs))
    for f in range(n_dirs):
        for t1 in (0.0, 1.0, -1.0):
            push(t1, np.eye(n_dirs)[f])

    while len(out) < n_samples:
        support = int(rng.integers(0, 4))
        theta1 = float(rng.normal())
        theta2 = np.zeros(n_dirs)
        if support:
            idx = rng.choice(n_dirs, size=min(support, n_dirs), replace=False)
            theta2[idx] = np.abs(rng.normal(size=len(idx)))
        pt = _make_cone_point(theta1, theta2, n, H)
        if pt is not None:
            out.append(pt)
    return out


def separating_cone_point(
    eta: np.ndarray,
    r: np.ndarray,
    H: np.ndarray,
    c: np.ndarray,
) -> tuple[DualConeSample | None, float]:
    """Worst cone point for one imbalance at capacity ``r``.

    Maximizes the bilinear form over the cone capped at unit infinity norm
    (an LP); a strictly positive value certifies that ``eta`` cannot be
    absorbed and returns the violated cone point as a new cut.
    """
    n = len(r)
    n_dirs = H.shape[0]
    # variables: theta1, theta2 (n_dirs), theta3 (n), theta4 (n)
    cost = np.concatenate([[float(np.sum(eta))], -(H @ eta - c), r, r])
    A_eq = np.zeros((n, 1 + n_dirs + 2 * n))
    A_eq[:, 0] = 1.0
    A_eq[:, 1 : 1 + n_dirs] = -H.T
    A_eq[:, 1 + n_dirs : 1 + n_dirs + n] = -np.eye(n)
    A_eq[:, 1 + n_dirs + n :] = np.eye(n)
    bounds = [(-1, 1)] + [(0, 1)] * (n_dirs + 2 * n)
    res = linprog(cost, A_eq=A_eq, b_eq=np.zeros(n), bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"cone separation LP failed: {res.message}")
    value = -res.fun
    x = res.x
    point = DualConeSample(
        theta1=float(x[0]),
        theta2=x[1 : 1 + n_dirs],
        theta3=x[1 + n_dirs : 1 + n_dirs + n],
        theta4=x[1 + n_dirs + n :],
    )
    return point, float(value)


def _solve_procurement_lp(
    xi: np.ndarray,
    cone: Sequence[DualConeSample],
    sums: np.ndarray,
    flows: np.ndarray,
):
    rows = []
    rhs = []
    for th in cone:
        weight = th.theta3 + th.theta4
        worst = float(np.max(-th.theta1 * sums + flows @ th.theta2))
        if worst > 1e-12 and float(np.max(weight)) < 1e-14:
            raise DegenerateSampleError(
                "cone sample with zero reserve weight but positive imbalance term"
            )
        rows.append(-weight)
        rhs.append(-worst)
    A_ub = np.array(rows)
    b_ub = np.array(rhs)
    res = linprog(xi, A_ub=A_ub, b_ub=b_ub, bounds=[(0, None)] * len(xi), method="highs")
    if res.status == 2:
        raise DegenerateSampleError("reserve procurement LP infeasible")
    if res.status != 0:
        raise RuntimeError(f"reserve procurement LP failed: {res.message}")
    return res, A_ub, b_ub


def procure_reserves(
    xi: np.ndarray,
    dual_samples: Sequence[DualConeSample],
    uncertainty_samples: Sequence[UncertaintySample],
    H: np.ndarray,
    c: np.ndarray,
    refine_rounds: int = 12,
) -> ReservePlan:
    """Minimum-cost reserve capacity covering every sampled constraint.

    For each cone sample the binding uncertainty sample is the one
    maximizing the bilinear form, so the pairwise constraints reduce
    exactly to one cut per cone sample:
    ``r' (theta3 + theta4) >= max_j [-theta1 1'eta_j + (H eta_j - c)' theta2]``.
    Separation then adds the worst violated cone point per uncovered
    imbalance sample until every sampled imbalance is absorbable, so the
    plan is exact for the sampled uncertainty set (residual risk lives
    only in unsampled imbalances).  The LP optimum is certified from the
    returned duals.
    """
    xi = np.asarray(xi, dtype=float)
    if np.any(xi < 0):
        raise ValueError("reserve prices must be nonnegative")
    if not dual_samples or not uncertainty_samples:
        raise ValueError("sample sets must be non-empty")
    etas = np.stack([s.eta for s in uncertainty_samples])
    sums = etas.sum(axis=1)
    flows = etas @ H.T - c  # (J, n_linedirs)

    cone = list(dual_samples)
    res, A_ub, b_ub = _solve_procurement_lp(xi, cone, sums, flows)
    for _ in range(refine_rounds):
        r = np.maximum(res.x, 0.0)
        scale = 1.0 + float(np.max(np.abs(b_ub)))
        cuts = []
        worst_val = 0.0
        for j in range(len(etas)):
            point, value = separating_cone_point(etas[j], r, H, c)
            if value > 1e-9 * scale:
                cuts.append(point)
                worst_val = max(worst_val, value)
        if not cuts:
            break
        cone.extend(cuts)
        res, A_ub, b_ub = _solve_procurement_lp(xi, cone, sums, flows)

    r = np.maximum(res.x, 0.0)
    slack = b_ub - A_ub @ r
    y = res.ineqlin.marginals
    z = res.lower.marginals
    scale = 1.0 + float(np.max(np.abs(b_ub), initial=0.0))
    feas = float(np.max(-slack, initial=0.0)) / scale
    comp = float(np.max(np.abs(y * slack), initial=0.0)) / scale
    comp = max(comp, float(np.max(np.abs(z * r), initial=0.0)) / (1.0 + float(np.max(r, initial=0.0))))
    # HiGHS marginals are objective sensitivities to the RHS (<= 0 here)
    stat = float(np.max(np.abs(xi - A_ub.T @ y - z)))
    return ReservePlan(
        r=r,
        cost=float(xi @ r),
        n_cone_samples=len(cone),
        n_uncertainty_samples=len(uncertainty_samples),
        feasibility_residual=feas,
        complementarity_residual=comp,
        stationarity_residual=stat / (1.0 + float(np.max(np.abs(xi)))),
        cuts=tuple(cone),
    )


def deploy_reserve(
    network: PowerNetwork,
    eta: np.ndarray,
    r: np.ndarray,
    H: np.ndarray | None = None,
) -> DeployResult:
    """Find a reserve deployment absorbing the imbalance, or certify none exists.

    Solves the feasibility problem: ``1'y = 1'eta``, post-deployment line
    flows within limits, ``-r <= y <= r``.
    """
    if H is None:
        H = compute_ptdf(network)
    c = network.line_limits()
    eta = np.asarray(eta, dtype=float)
    r = np.asarray(r, dtype=float)
    if np.any(r < -1e-12):
        raise ValueError("reserve capacity must be nonnegative")
    n = network.n_buses
    res = linprog(
        np.zeros(n),
        A_ub=-H,
        b_ub=c - H @ eta,
        A_eq=np.ones((1, n)),
        b_eq=[float(np.sum(eta))],
        bounds=[(-ri, ri) for ri in r],
        method="highs",
    )
    if res.status == 2:
        return DeployResult(feasible=False, y=None, max_violation=float("nan"))
    if res.status != 0:
        raise RuntimeError(f"reserve deployment LP failed: {res.message}")
    y = res.x
    viol = max(
        abs(float(np.sum(y) - np.sum(eta))),
        float(np.max(H @ (eta - y) - c, initial=0.0)),
        float(np.max(np.abs(y) - r, initial=0.0)),
    )
    return DeployResult(feasible=True, y=y, max_violation=viol)


def verify_reserve_adequacy(
    network: PowerNetwork,
    r: np.ndarray,
    samples: Sequence[UncertaintySample],
    H: np.ndarray | None = None,
    workers: int = 1,
) -> AdequacyReport:
    """Fraction of fresh imbalance samples the procured capacity can absorb."""
    if H is None:
        H = compute_ptdf(network)

    def deployable(s: UncertaintySample) -> bool:
        return deploy_reserve(network, s.eta, r, H=H).feasible

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            flags = list(pool.map(deployable, samples))
    else:
        flags = [deployable(s) for s in samples]
    failures = [i for i, flag in enumerate(flags) if not flag]
    n = len(samples)
    return AdequacyReport(
        fraction=(n - len(failures)) / n if n else 1.0,
        n_samples=n,
        failures=tuple(failures),
    )
