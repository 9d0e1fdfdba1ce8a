"""Command-line interface: scenario runs, CSV emission, run reports.

Each invocation runs one command on one scenario file and writes its
documented CSV outputs plus a ``run_report.json`` into the output
directory.  CSV contents depend only on the scenario, overrides, and seed
(wall time and absolute paths live only in the report), so identical
inputs produce identical CSV digests.

Exit codes: 0 success, 2 usage, 3 scenario validation failure,
4 non-convergence or step-size divergence, 5 infeasibility outcomes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assignment import AssignmentConvergenceError, solve_ctap
from .coordination import (
    CoordinationConvergenceError,
    StepSizeError,
    run_dual_decomposition,
    run_greedy_pricing,
    solve_social_optimum,
    transport_cost,
)
from .power import (
    DispatchConvergenceError,
    DispatchInfeasibleError,
    compute_ptdf,
)
from .reserves import (
    DegenerateSampleError,
    UncertaintySetEmptyError,
    default_eta_box,
    estimate_dual_bound,
    procure_reserves,
    sample_dual_cone,
    sample_uncertainty_set,
    verify_reserve_adequacy,
)
from .scenario import Scenario, ScenarioError, apply_overrides, scenario_from_document

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_NONCONVERGENCE = 4
EXIT_INFEASIBLE = 5

COMMANDS = ("enumerate-paths", "social-optimum", "greedy", "dual-decomp", "reserves")


@dataclass
class RunReport:
    command: str
    scenario: str
    scenario_hash: str
    wall_time_s: float
    outputs: list[str] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def summary(self) -> str:
        bits = [f"{self.command} {self.scenario}"]
        for key, val in self.metrics.items():
            if isinstance(val, float):
                bits.append(f"{key}={val:.6g}")
            else:
                bits.append(f"{key}={val}")
        return " | ".join(bits)

    def write(self, path: Path) -> None:
        payload = {
            "command": self.command,
            "scenario": self.scenario,
            "scenario_hash": self.scenario_hash,
            "wall_time_s": self.wall_time_s,
            "outputs": self.outputs,
            "metrics": self.metrics,
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    lines = [",".join(header)] + [",".join(r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def _load(args) -> Scenario:
    path = Path(args.scenario)
    if not path.exists():
        raise ScenarioError(f"scenario file not found: {path}")
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(
            f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    overrides = dict(kv.split("=", 1) for kv in (args.set or []))
    if args.seed is not None:
        overrides["parameters.seed"] = str(args.seed)
    if getattr(args, "alpha", None) is not None:
        overrides["parameters.alpha"] = repr(args.alpha)
    if getattr(args, "iters", None) is not None:
        overrides["parameters.max_iters"] = str(args.iters)
    if getattr(args, "solver_tol", None) is not None:
        overrides["parameters.tol"] = repr(args.solver_tol)
    if overrides:
        document = apply_overrides(document, overrides)
    return scenario_from_document(document, name=path.stem)


def _cmd_enumerate_paths(args, out_dir: Path, report: RunReport) -> int:
    scn = _load(args)
    rows = []
    for ps in scn.pathsets:
        vc = ps.vehicle_class
        for k, p in enumerate(ps.paths):
            states = p.charge_states(vc.initial_charge)
            drawn = sum(e for e in p.energies if e < 0)
            rows.append(
                [
                    ps.class_id,
                    str(k),
                    "|".join(p.arcs),
                    _fmt(-drawn),
                    _fmt(min(states) if states else vc.initial_charge),
                    _fmt(max(states) if states else vc.initial_charge),
                ]
            )
    out = out_dir / "paths.csv"
    _write_csv(out, ["class", "path_index", "arcs", "energy_drawn_kwh", "min_soc_kwh", "max_soc_kwh"], rows)
    report.outputs.append(str(out))
    report.metrics["paths"] = len(rows)
    report.metrics["classes"] = len(scn.pathsets)
    report.metrics["paths_csv_sha256"] = _digest(out)
    return EXIT_OK


def _write_fw_trace(out_dir: Path, report: RunReport, scn, prices) -> None:
    rows = []
    solve_ctap(scn.graph, scn.pathsets, prices, scn.params.gamma,
               tol=scn.params.tol, demand_map=scn.demand_map, trace=rows)
    path = out_dir / "fw_trace.csv"
    _write_csv(path, ["iteration", "objective", "relative_gap"],
               [[str(i), _fmt(obj), _fmt(gap)] for i, obj, gap in rows])
    report.outputs.append(str(path))


def _cmd_social_optimum(args, out_dir: Path, report: RunReport) -> int:
    scn = _load(args)
    so = solve_social_optimum(scn, tol=scn.params.tol)
    if args.trace:
        _write_fw_trace(out_dir, report, scn, so.prices)

    flows_csv = out_dir / "flows.csv"
    _write_csv(
        flows_csv,
        ["arc", "kind", "flow"],
        [
            [a.id, a.kind.value, _fmt(so.flow_state.arc_flows[i])]
            for i, a in enumerate(scn.graph.arcs)
        ],
    )
    net = scn.network
    incident = {
        b: "|".join(
            did
            for ln, did in zip(
                list(net.lines) + list(net.lines),
                [f"{l.id}:fwd" for l in net.lines] + [f"{l.id}:rev" for l in net.lines],
            )
            if (ln.from_bus == b or ln.to_bus == b)
        )
        for b in net.buses
    }
    H = compute_ptdf(net)
    disp_rows = []
    binding_ids = set()
    line_dir_ids = [f"{l.id}:fwd" for l in net.lines] + [f"{l.id}:rev" for l in net.lines]
    slackv = net.line_limits() - H @ (so.flow_state.demand + net.baseload - so.g)
    for i, did in enumerate(line_dir_ids):
        if so.mu[i] > 1e-9 or slackv[i] <= 1e-9 * (1 + abs(net.line_limits()[i])):
            binding_ids.add(did)
    for i, b in enumerate(net.buses):
        mine = "|".join(d for d in incident[b].split("|") if d in binding_ids and d)
        disp_rows.append([b, _fmt(so.g[i]), _fmt(so.prices[i]), mine])
    disp_csv = out_dir / "dispatch.csv"
    _write_csv(disp_csv, ["bus", "g_mwh", "price_mwh", "binding_lines"], disp_rows)

    so_json = out_dir / "so.json"
    so_json.write_text(
        json.dumps(
            {
                "objective": so.objective,
                "transport_cost": transport_cost(scn.graph, so.flow_state.arc_flows, scn.params.gamma),
                "generation_cost": net.generation_cost(so.g),
                "gamma_bal": so.gamma_bal,
                "mu": so.mu.tolist(),
                "prices": dict(zip(net.buses, so.prices.tolist())),
                "demand": dict(zip(net.buses, so.flow_state.demand.tolist())),
                "g": dict(zip(net.buses, so.g.tolist())),
                "kkt_residual": so.kkt_residual,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    report.outputs += [str(flows_csv), str(disp_csv), str(so_json)]
    report.metrics["objective"] = so.objective
    report.metrics["kkt_residual"] = so.kkt_residual
    report.metrics["dispatch_csv_sha256"] = _digest(disp_csv)
    report.metrics["flows_csv_sha256"] = _digest(flows_csv)
    return EXIT_OK


def _cmd_greedy(args, out_dir: Path, report: RunReport) -> int:
    scn = _load(args)
    result = run_greedy_pricing(scn, max_iters=args.iters)
    if args.trace and result.trace.rows:
        _write_fw_trace(out_dir, report, scn, result.trace.rows[-1].prices)
    trace_csv = out_dir / "trace.csv"
    result.trace.to_csv(trace_csv)
    report.outputs.append(str(trace_csv))
    report.metrics["outcome"] = result.outcome
    report.metrics["iterations"] = len(result.trace.rows)
    report.metrics["cycle_period"] = result.cycle.period if result.cycle.found else 0
    if result.cycle.found:
        report.metrics["cycle_objectives"] = [float(v) for v in result.cycle.phase_objectives]
    report.metrics["trace_csv_sha256"] = _digest(trace_csv)
    return EXIT_OK


def _cmd_dual_decomp(args, out_dir: Path, report: RunReport) -> int:
    scn = _load(args)
    so = solve_social_optimum(scn, tol=scn.params.tol)
    dual_bound = estimate_dual_bound(
        scn.network,
        scn.d_min,
        scn.d_max,
        samples=scn.params.dual_bound_samples,
        seed=scn.params.seed,
        safety=scn.params.dual_bound_safety,
        workers=args.parallel_samples,
    )
    trace = run_dual_decomposition(
        scn,
        alpha=args.alpha,
        max_iters=args.iters,
        tol=args.tol if args.tol is not None else 0.0,
        social_optimum=so,
        dual_bound=dual_bound,
        reserve_overlay=args.reserve_overlay,
    )
    if args.trace and trace.rows:
        _write_fw_trace(out_dir, report, scn, trace.rows[-1].prices)
    trace_csv = out_dir / "trace.csv"
    trace.to_csv(trace_csv)
    last = trace.rows[-1]
    report.outputs.append(str(trace_csv))
    report.metrics["iterations"] = len(trace.rows)
    report.metrics["so_objective"] = so.objective
    report.metrics["dual_bound_estimate"] = dual_bound
    report.metrics["final_objective"] = last.combined_objective
    report.metrics["final_gap_rel"] = abs(last.combined_objective - so.objective) / abs(so.objective)
    report.metrics["final_infeasibility"] = last.infeasibility_l2
    report.metrics["trace_csv_sha256"] = _digest(trace_csv)
    return EXIT_OK


def _cmd_reserves(args, out_dir: Path, report: RunReport) -> int:
    scn = _load(args)
    net = scn.network
    H = compute_ptdf(net)
    c = net.line_limits()
    params = scn.params
    if args.a_k is not None and args.w_k is not None:
        a_k, w_k = args.a_k, args.w_k
        dual_bound = float("nan")
    else:
        if args.k is None:
            raise ScenarioError("reserves: give either --k or both --a-k and --w-k")
        dual_bound = estimate_dual_bound(
            net, scn.d_min, scn.d_max,
            samples=params.dual_bound_samples, seed=params.seed,
            safety=params.dual_bound_safety, H=H,
            workers=args.parallel_samples,
        )
        alpha = args.alpha if args.alpha is not None else params.alpha
        from .coordination import infeasibility_bound

        a_k = w_k = infeasibility_bound(args.k, alpha, dual_bound)

    eta_min, eta_max = default_eta_box(net, scn.d_min, scn.d_max)
    cone = sample_dual_cone(net, params.cone_samples, seed=params.seed, H=H)
    unc = sample_uncertainty_set(
        net, a_k, w_k, eta_min, eta_max, params.uncertainty_samples,
        seed=params.seed + 1, H=H,
    )
    xi = np.full(net.n_buses, params.reserve_price)
    plan = procure_reserves(xi, cone, unc, H=H, c=c)
    fresh = sample_uncertainty_set(
        net, a_k, w_k, eta_min, eta_max, params.adequacy_samples,
        seed=params.seed + 2, H=H,
    )
    adequacy = verify_reserve_adequacy(net, plan.r, fresh, H=H, workers=args.parallel_samples)

    reserves_csv = out_dir / "reserves.csv"
    _write_csv(
        reserves_csv,
        ["bus", "r_mwh", "xi_per_mwh", "cost"],
        [
            [b, _fmt(plan.r[i]), _fmt(xi[i]), _fmt(plan.r[i] * xi[i])]
            for i, b in enumerate(net.buses)
        ],
    )
    adequacy_csv = out_dir / "adequacy.csv"
    _write_csv(
        adequacy_csv,
        ["sample", "deployable"],
        [[str(i), "0" if i in adequacy.failures else "1"] for i in range(adequacy.n_samples)],
    )
    report.outputs += [str(reserves_csv), str(adequacy_csv)]
    report.metrics["a_k"] = float(a_k)
    report.metrics["w_k"] = float(w_k)
    report.metrics["dual_bound_estimate"] = dual_bound
    report.metrics["reserve_cost"] = plan.cost
    report.metrics["adequacy"] = adequacy.fraction
    report.metrics["lp_residual"] = plan.optimality_residual
    report.metrics["reserves_csv_sha256"] = _digest(reserves_csv)
    report.metrics["adequacy_csv_sha256"] = _digest(adequacy_csv)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evcosim",
        description="Coupled power-transportation co-simulation under EV charging",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, with_alpha=False, with_tol=True) -> None:
        p.add_argument("scenario", help="path to a .scn scenario file")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        p.add_argument("--out-dir", default="out", help="directory for CSV outputs")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a scenario document value (dotted path)")
        p.add_argument("--trace", action="store_true", help="emit per-iteration solver trace CSV")
        p.add_argument("--parallel-samples", type=int, default=1,
                       help="worker threads for sample sweeps")
        if with_alpha:
            p.add_argument("--alpha", type=float, default=None, help="dual step size")
        if with_tol:
            p.add_argument("--tol", dest="solver_tol", type=float, default=None,
                           help="override the scenario's certification tolerance")

    common(sub.add_parser("enumerate-paths", help="dump per-class feasible path sets"))
    common(sub.add_parser("social-optimum", help="solve the joint social optimum"))
    g = sub.add_parser("greedy", help="run the myopic pricing loop")
    common(g)
    g.add_argument("--iters", type=int, default=None, help="maximum iterations")
    d = sub.add_parser("dual-decomp", help="run collaborative dual-decomposition pricing")
    common(d, with_alpha=True, with_tol=False)
    d.add_argument("--iters", type=int, default=None, help="maximum iterations")
    d.add_argument("--tol", type=float, default=None,
                   help="relative stop tolerance vs the social optimum (default: run all iterations)")
    d.add_argument("--reserve-overlay", action="store_true",
                   help="procure reserves against the analytic bound each iteration")
    r = sub.add_parser("reserves", help="procure and verify reserve capacity")
    common(r, with_alpha=True)
    r.add_argument("--k", type=int, default=None, help="price-adjustment iteration index")
    r.add_argument("--a-k", type=float, default=None, help="explicit balance infeasibility bound")
    r.add_argument("--w-k", type=float, default=None, help="explicit flow infeasibility bound")
    return parser


_HANDLERS = {
    "enumerate-paths": _cmd_enumerate_paths,
    "social-optimum": _cmd_social_optimum,
    "greedy": _cmd_greedy,
    "dual-decomp": _cmd_dual_decomp,
    "reserves": _cmd_reserves,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = RunReport(
        command=args.command,
        scenario=Path(args.scenario).stem,
        scenario_hash="",
        wall_time_s=0.0,
    )
    start = time.perf_counter()
    try:
        try:
            scn_doc = json.loads(Path(args.scenario).read_text())
            blob = json.dumps(scn_doc, sort_keys=True, separators=(",", ":")).encode()
            report.scenario_hash = hashlib.sha256(blob).hexdigest()
        except Exception:
            pass
        code = _HANDLERS[args.command](args, out_dir, report)
    except ScenarioError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (AssignmentConvergenceError, CoordinationConvergenceError,
            DispatchConvergenceError, StepSizeError) as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (DispatchInfeasibleError, UncertaintySetEmptyError, DegenerateSampleError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    report.wall_time_s = time.perf_counter() - start
    report.write(out_dir / "run_report.json")
    report.outputs.append(str(out_dir / "run_report.json"))
    print(report.summary())
    return code


if __name__ == "__main__":
    sys.exit(main())
