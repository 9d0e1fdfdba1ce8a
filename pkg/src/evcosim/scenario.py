"""Scenario files: parsing, validation, units, canonical round-tripping.

A scenario is a versioned JSON document with named sections (``transport``,
``power``, ``classes``, ``parameters``) and explicit units.  Loading fully
validates cross-references, converts declared distances to kWh through the
consumption rate, enumerates every class's feasible paths, and certifies
dispatch feasibility over the declared demand box.  The canonical form
(sorted keys, normalized numbers) round-trips: load -> save -> load is
structurally identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields as dc_fields
from pathlib import Path as FsPath
from typing import Any, Mapping

import numpy as np

from .assignment import DemandMap, build_demand_map
from .espp import PathSet, VehicleClass, enumerate_feasible_paths
from .power import Line, PowerNetwork, validate_feasibility
from .transport import ChargingStation, ExtendedGraph, RoadArc, build_extended_graph

FORMAT_VERSION = 1
DEFAULT_KWH_PER_MILE = 1.0 / 25.0

SUPPORTED_UNITS = {
    "time": "min",
    "distance": "miles",
    "energy": "kWh",
    "power_energy": "MWh",
    "price": "$/MWh",
    "money": "$",
}


class ScenarioError(ValueError):
    """Scenario failed to parse or validate; the message names the defect."""


@dataclass(frozen=True)
class ScenarioParameters:
    """Run parameters with scenario-file defaults."""

    gamma: float = 1e-3
    alpha: float = 20.0
    tol: float = 1e-6
    max_iters: int = 200
    initial_price: float = 50.0
    initial_gamma: float = 57.5
    initial_mu: float = 0.0
    reserve_price: float = 55.0
    cone_samples: int = 500
    uncertainty_samples: int = 500
    adequacy_samples: int = 1000
    dual_bound_samples: int = 200
    dual_bound_safety: float = 1.5
    seed: int = 0
    max_paths: int = 200_000
    cycle_max_period: int = 8
    so_dual_iters: int = 150
    inner_tol: float = 1e-9
    overlay_cone_samples: int = 64
    overlay_uncertainty_samples: int = 64
    greedy_max_iters: int = 50


@dataclass(eq=False)
class Scenario:
    """Validated scenario with all derived model objects built."""

    name: str
    document: dict
    graph: ExtendedGraph
    network: PowerNetwork
    classes: tuple[VehicleClass, ...]
    pathsets: tuple[PathSet, ...]
    demand_map: DemandMap
    d_min: np.ndarray
    d_max: np.ndarray
    params: ScenarioParameters
    scenario_hash: str

    @property
    def total_demand_rate(self) -> float:
        return sum(c.demand_rate for c in self.classes)

    def pathset_of(self, class_id: str) -> PathSet:
        for ps in self.pathsets:
            if ps.class_id == class_id:
                return ps
        raise KeyError(class_id)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ScenarioError(message)


def _get(section: Mapping, key: str, kind, where: str):
    _require(key in section, f"{where}: missing required key {key!r}")
    value = section[key]
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    _require(isinstance(value, kind), f"{where}: key {key!r} has wrong type")
    return value


def _check_units(doc: Mapping) -> None:
    units = doc.get("units", {})
    for key, val in units.items():
        _require(key in SUPPORTED_UNITS, f"units: unknown unit kind {key!r}")
        _require(
            val == SUPPORTED_UNITS[key],
            f"units: {key}={val!r} unsupported (expected {SUPPORTED_UNITS[key]!r})",
        )


def _build_transport(doc: Mapping) -> tuple[list[RoadArc], list[ChargingStation], set[str], dict[str, str]]:
    t = doc["transport"]
    rate = float(t.get("consumption_kwh_per_mile", DEFAULT_KWH_PER_MILE))
    _require(rate > 0, "transport: consumption rate must be positive")

    bus_map: dict[str, str] = {}
    node_ids = []
    for nd in _get(t, "nodes", list, "transport"):
        nid = _get(nd, "id", str, "transport.nodes")
        node_ids.append(nid)
        if "bus" in nd:
            bus_map[nid] = str(nd["bus"])
    _require(len(set(node_ids)) == len(node_ids), "transport: duplicate node id")

    arcs = []
    for a in _get(t, "arcs", list, "transport"):
        where = f"transport.arcs[{a.get('id', '?')}]"
        if "energy_kwh" in a:
            energy = float(a["energy_kwh"])
        else:
            energy = float(_get(a, "distance_miles", float, where)) * rate
        arcs.append(
            RoadArc(
                id=_get(a, "id", str, where),
                tail=_get(a, "tail", str, where),
                head=_get(a, "head", str, where),
                free_flow_time=float(_get(a, "free_flow_time", float, where)),
                latency_slope=float(a.get("latency_slope", 0.0)),
                energy=energy,
                toll=float(a.get("toll", 0.0)),
            )
        )
        _require(arcs[-1].tail in node_ids and arcs[-1].head in node_ids,
                 f"{where}: endpoint not declared in transport.nodes")

    stations = []
    for s in t.get("stations", []):
        where = f"transport.stations[{s.get('node', '?')}]"
        options = [float(e) for e in _get(s, "options_kwh", list, where)]
        options = [e for e in options if e > 0]  # a zero option is the bypass
        _require(options, f"{where}: no positive charge option")
        stations.append(
            ChargingStation(
                node=_get(s, "node", str, where),
                rate=float(_get(s, "rate_kwh_per_min", float, where)),
                options=tuple(sorted(options)),
                entrance_free_flow_wait=float(s.get("entrance_free_flow_wait", 0.0)),
                entrance_wait_slope=float(s.get("entrance_wait_slope", 0.0)),
                plug_in_fee=float(s.get("plug_in_fee", 0.0)),
                is_trip_origin_facility=bool(s.get("origin_facility", False)),
            )
        )
        _require(stations[-1].node in bus_map,
                 f"{where}: station node has no power bus mapping")

    origins = {str(c["origin"]) for c in doc.get("classes", [])}
    return arcs, stations, origins, bus_map


def _build_power(doc: Mapping) -> tuple[PowerNetwork, np.ndarray, np.ndarray]:
    p = doc["power"]
    buses = [str(b) for b in _get(p, "buses", list, "power")]
    _require(len(set(buses)) == len(buses), "power: duplicate bus id")
    bus_pos = {b: i for i, b in enumerate(buses)}

    lines = []
    for ln in _get(p, "lines", list, "power"):
        where = f"power.lines[{ln.get('id', '?')}]"
        frm, to = _get(ln, "from", str, where), _get(ln, "to", str, where)
        _require(frm in bus_pos and to in bus_pos, f"{where}: endpoint is not a declared bus")
        limit = float(_get(ln, "limit", float, where))
        lines.append(
            Line(
                id=_get(ln, "id", str, where),
                from_bus=frm,
                to_bus=to,
                susceptance=float(_get(ln, "susceptance", float, where)),
                limit_fwd=limit,
                limit_rev=float(ln.get("limit_rev", limit)),
            )
        )

    n = len(buses)
    cost_a = np.full(n, 1.0)
    cost_b = np.zeros(n)
    g_min = np.zeros(n)
    g_max = np.zeros(n)
    for gen in _get(p, "generators", list, "power"):
        where = f"power.generators[{gen.get('bus', '?')}]"
        bus = _get(gen, "bus", str, where)
        _require(bus in bus_pos, f"{where}: generator at unknown bus")
        i = bus_pos[bus]
        cost_a[i] = float(_get(gen, "a", float, where))
        cost_b[i] = float(_get(gen, "b", float, where))
        g_min[i] = float(gen.get("g_min", 0.0))
        g_max[i] = float(_get(gen, "g_max", float, where))

    baseload = np.zeros(n)
    for bus, val in p.get("baseload", {}).items():
        _require(bus in bus_pos, f"power.baseload: unknown bus {bus!r}")
        baseload[bus_pos[bus]] = float(val)

    gen_buses = sorted(str(g["bus"]) for g in p.get("generators", []))
    slack = str(p.get("slack", gen_buses[0] if gen_buses else buses[0]))
    network = PowerNetwork(
        buses=tuple(buses),
        lines=tuple(lines),
        cost_a=cost_a,
        cost_b=cost_b,
        g_min=g_min,
        g_max=g_max,
        baseload=baseload,
        slack=slack,
    )

    box = p.get("demand_box", {})
    d_min = np.zeros(n)
    d_max = np.zeros(n)
    for bus, val in box.get("d_min", {}).items():
        _require(bus in bus_pos, f"power.demand_box.d_min: unknown bus {bus!r}")
        d_min[bus_pos[bus]] = float(val)
    for bus, val in box.get("d_max", {}).items():
        _require(bus in bus_pos, f"power.demand_box.d_max: unknown bus {bus!r}")
        d_max[bus_pos[bus]] = float(val)
    return network, d_min, d_max


def _build_classes(doc: Mapping) -> list[VehicleClass]:
    classes = []
    for c in _get(doc, "classes", list, "scenario"):
        where = f"classes[{c.get('id', '?')}]"
        classes.append(
            VehicleClass(
                id=_get(c, "id", str, where),
                origin=_get(c, "origin", str, where),
                destination=_get(c, "destination", str, where),
                demand_rate=float(_get(c, "demand_rate", float, where)),
                initial_charge=float(c.get("initial_charge_kwh", 0.0)),
                battery_capacity=float(c.get("battery_capacity_kwh", 0.0)),
                kind=str(c.get("kind", "ev")),
            )
        )
    _require(classes, "scenario: no vehicle classes declared")
    _require(len({c.id for c in classes}) == len(classes), "classes: duplicate class id")
    return classes


def _build_parameters(doc: Mapping) -> ScenarioParameters:
    raw = dict(doc.get("parameters", {}))
    known = {f.name for f in dc_fields(ScenarioParameters)}
    unknown = set(raw) - known
    _require(not unknown, f"parameters: unknown keys {sorted(unknown)}")
    return ScenarioParameters(**raw)


def canonicalize(document: Mapping) -> dict:
    """Normalized deep copy used for hashing and round-trip comparisons."""
    return json.loads(json.dumps(document, sort_keys=True))


def scenario_from_document(document: Mapping, name: str | None = None) -> Scenario:
    doc = canonicalize(document)
    _require(doc.get("format_version") == FORMAT_VERSION,
             f"scenario: format_version must be {FORMAT_VERSION}")
    for section in ("transport", "power", "classes"):
        _require(section in doc, f"scenario: missing section {section!r}")
    _check_units(doc)

    arcs, stations, origins, bus_map = _build_transport(doc)
    network, d_min, d_max = _build_power(doc)
    for node, bus in bus_map.items():
        _require(bus in network.buses, f"transport.nodes[{node}]: unknown power bus {bus!r}")

    params = _build_parameters(doc)
    classes = _build_classes(doc)

    try:
        graph = build_extended_graph(arcs, stations, origins, bus_map)
    except Exception as exc:
        raise ScenarioError(f"transport: {exc}") from exc

    pathsets = []
    for vc in classes:
        try:
            ps = enumerate_feasible_paths(graph, vc, max_paths=params.max_paths)
        except KeyError as exc:
            raise ScenarioError(f"classes[{vc.id}]: {exc}") from exc
        _require(not ps.is_empty,
                 f"classes[{vc.id}]: no energy-feasible path from "
                 f"{vc.origin!r} to {vc.destination!r} (infeasible class)")
        pathsets.append(ps)

    demand_map = build_demand_map(graph, network.buses)

    report = validate_feasibility(network, d_min, d_max)
    _require(report.ok, f"power.demand_box: {report}")

    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return Scenario(
        name=name or str(doc.get("name", "scenario")),
        document=doc,
        graph=graph,
        network=network,
        classes=tuple(classes),
        pathsets=tuple(pathsets),
        demand_map=demand_map,
        d_min=d_min,
        d_max=d_max,
        params=params,
        scenario_hash=hashlib.sha256(blob).hexdigest(),
    )


def load_scenario(path: str | FsPath) -> Scenario:
    """Load and validate a ``.scn`` scenario file."""
    p = FsPath(path)
    if not p.exists():
        raise ScenarioError(f"scenario file not found: {p}")
    try:
        document = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(
            f"{p}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    return scenario_from_document(document, name=p.stem)


def save_scenario(document: Mapping, path: str | FsPath) -> None:
    """Write a scenario document in canonical form."""
    FsPath(path).write_text(json.dumps(canonicalize(document), indent=2, sort_keys=True) + "\n")


def apply_overrides(document: Mapping, overrides: Mapping[str, str]) -> dict:
    """Apply ``section.key=value`` parameter replacements to a document.

    Only dotted paths into existing scalar leaves are accepted; values are
    parsed as JSON scalars with a plain-string fallback.
    """
    doc = canonicalize(document)
    for dotted, raw in overrides.items():
        parts = dotted.split(".")
        node: Any = doc
        for key in parts[:-1]:
            if isinstance(node, list):
                node = node[int(key)]
            else:
                if key not in node:
                    raise ScenarioError(f"override {dotted!r}: no such section {key!r}")
                node = node[key]
        leaf = parts[-1]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if isinstance(node, list):
            node[int(leaf)] = value
        else:
            node[leaf] = value
    return doc


def bundled_scenario_path(name: str = "corridor9") -> FsPath:
    """Path of a scenario shipped with the package."""
    return FsPath(__file__).parent / "data" / f"{name}.scn"
