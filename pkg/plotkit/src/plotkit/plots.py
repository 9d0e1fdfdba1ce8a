"""Publication-style figures from co-simulation traces.

Each plot is a pure function of its CSV inputs: the rendered PNG embeds
the sha256 of every input file (and the figure dimensions are fixed), so
regeneration on the same renderer version is byte-stable and the
provenance of a figure is checkable from the file itself.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .traces import TraceFormatError, read_reserves, read_trace

FIGSIZE = (6.4, 4.2)
DPI = 130


def _save(fig, out_path: str | Path, hashes: dict[str, str]) -> None:
    metadata = {f"evcosim:{name}": digest for name, digest in hashes.items()}
    metadata["Software"] = "plotkit"
    fig.savefig(out_path, dpi=DPI, metadata=metadata)
    plt.close(fig)


def plot_infeasibility(trace_csv: str | Path, out_png: str | Path) -> Path:
    """Log-log primal infeasibility per iteration, with the bound overlay.

    The analytic ``3 D / (alpha sqrt(k))`` curve is drawn when the trace
    carries a finite ``bound`` column (greedy traces do not).
    """
    trace = read_trace(trace_csv)
    k = trace.iterations
    infeas = trace.column("infeasibility_l2")
    mask = (k >= 1) & (infeas > 0)
    if not mask.any():
        raise TraceFormatError(f"{trace_csv}: no positive infeasibility rows to plot")

    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.loglog(k[mask], infeas[mask], lw=1.6, label="primal infeasibility")
    if trace.has_finite("bound"):
        bound = trace.column("bound")
        bmask = (k >= 1) & np.isfinite(bound)
        ax.loglog(k[bmask], bound[bmask], "--", lw=1.2, label="analytic bound")
    ax.set_xlabel("iteration")
    ax.set_ylabel(r"$\|(a_k, w_k^+)\|_2$  [MWh]")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    _save(fig, out_png, {"trace-sha256": trace.sha256})
    return Path(out_png)


def plot_objective(
    trace_csv: str | Path,
    so_value: float,
    reserves_csv: str | Path | None = None,
    out_png: str | Path = "objective.png",
) -> Path:
    """Objective per iteration against the social-optimum reference.

    When the trace carries per-iteration reserve costs, the
    dual-objective-plus-reserve-cost curve is overlaid; a reserves.csv
    adds its single procurement total to the legend.
    """
    if so_value is None:
        raise ValueError("missing social-optimum reference value")
    trace = read_trace(trace_csv)
    k = trace.iterations
    combined = trace.column("combined_objective")

    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot(k, combined, lw=1.6, label="combined objective")
    ax.axhline(so_value, color="k", ls=":", lw=1.2, label="social optimum")
    hashes = {"trace-sha256": trace.sha256}
    if trace.has_finite("reserve_cost"):
        dual = trace.column("dual_objective")
        reserve = trace.column("reserve_cost")
        omask = np.isfinite(reserve) & np.isfinite(dual)
        ax.plot(k[omask], dual[omask] + reserve[omask], lw=1.2, label="dual obj. + reserve cost")
    if reserves_csv is not None:
        frame = read_reserves(reserves_csv)
        hashes["reserves-sha256"] = frame.sha256
        ax.plot([], [], " ", label=f"procured reserves: ${frame.total_cost:.2f}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective  [$]")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    _save(fig, out_png, hashes)
    return Path(out_png)


def infeasibility_main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Plot infeasibility vs iteration (log-log)")
    parser.add_argument("trace", help="trace.csv from greedy or dual-decomp")
    parser.add_argument("out", help="output PNG path")
    args = parser.parse_args(argv)
    try:
        plot_infeasibility(args.trace, args.out)
    except (TraceFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(args.out)
    return 0


def objective_main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Plot objective vs iteration with SO reference")
    parser.add_argument("trace", help="trace.csv from dual-decomp")
    parser.add_argument("so_value", type=float, help="social-optimum objective")
    parser.add_argument("out", help="output PNG path")
    parser.add_argument("--reserves", default=None, help="optional reserves.csv")
    args = parser.parse_args(argv)
    try:
        plot_objective(args.trace, args.so_value, args.reserves, args.out)
    except (TraceFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(args.out)
    return 0
