"""Parsed views over the co-simulation CSV outputs.

These readers never recompute any physics: they validate the documented
column schema, keep rows keyed by iteration, and hand numpy arrays to the
plotting functions.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class TraceFormatError(ValueError):
    """The CSV does not match the documented trace schema."""


#: Columns every coordination trace carries (per-bus/line/arc columns vary).
REQUIRED_TRACE_COLUMNS = (
    "iteration",
    "infeasibility_l2",
    "bound",
    "combined_objective",
    "dual_objective",
    "reserve_cost",
)

RESERVES_COLUMNS = ("bus", "r_mwh", "xi_per_mwh", "cost")


@dataclass
class TraceFrame:
    """Rows of a trace.csv keyed by iteration."""

    path: str
    columns: tuple[str, ...]
    data: dict[str, np.ndarray]
    sha256: str

    @property
    def iterations(self) -> np.ndarray:
        return self.data["iteration"]

    def column(self, name: str) -> np.ndarray:
        try:
            return self.data[name]
        except KeyError:
            raise TraceFormatError(f"{self.path}: missing column {name!r}") from None

    def has_finite(self, name: str) -> bool:
        col = self.data.get(name)
        return col is not None and bool(np.any(np.isfinite(col)))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def read_trace(path: str | Path) -> TraceFrame:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceFormatError(f"{path}: empty file") from None
        rows = [row for row in reader if row]
    missing = [c for c in REQUIRED_TRACE_COLUMNS if c not in header]
    if missing:
        raise TraceFormatError(f"{path}: missing columns {missing}")
    if not rows:
        raise TraceFormatError(f"{path}: trace has no rows")
    raw = np.array(
        [[math.nan if cell == "" else float(cell) for cell in row] for row in rows]
    )
    data = {name: raw[:, i] for i, name in enumerate(header)}
    its = data["iteration"]
    if np.any(np.diff(its) <= 0):
        raise TraceFormatError(f"{path}: iterations are not strictly increasing")
    return TraceFrame(path=str(path), columns=tuple(header), data=data, sha256=_sha256(path))


@dataclass
class ReservesFrame:
    """Rows of a reserves.csv: per-bus capacity, price, and cost."""

    path: str
    buses: tuple[str, ...]
    r: np.ndarray
    xi: np.ndarray
    cost: np.ndarray
    sha256: str

    @property
    def total_cost(self) -> float:
        return float(self.cost.sum())


def read_reserves(path: str | Path) -> ReservesFrame:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = [row for row in reader if row]
    if header is None or tuple(header) != RESERVES_COLUMNS:
        raise TraceFormatError(f"{path}: expected columns {RESERVES_COLUMNS}, got {header}")
    if not rows:
        raise TraceFormatError(f"{path}: no reserve rows")
    return ReservesFrame(
        path=str(path),
        buses=tuple(row[0] for row in rows),
        r=np.array([float(row[1]) for row in rows]),
        xi=np.array([float(row[2]) for row in rows]),
        cost=np.array([float(row[3]) for row in rows]),
        sha256=_sha256(path),
    )
