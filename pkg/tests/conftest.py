"""Shared fixtures and instance builders for the test suite."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from evcosim.espp import VehicleClass, enumerate_feasible_paths
from evcosim.power import Line, PowerNetwork
from evcosim.scenario import bundled_scenario_path, load_scenario
from evcosim.transport import ChargingStation, RoadArc, build_extended_graph


@pytest.fixture(scope="session")
def corridor():
    return load_scenario(bundled_scenario_path())


def two_node_graph(energy=1.0, **kwargs):
    return build_extended_graph([RoadArc("a-b", "a", "b", 10.0, energy=energy, **kwargs)])


def station_corridor_graph(options=(1.0, 2.0, 3.0), leg_energy=1.0, rate=0.2, wait=1.0, slope=0.0):
    """o -> s -> d with one en-route station at s."""
    arcs = [
        RoadArc("o-s", "o", "s", 10.0, energy=leg_energy),
        RoadArc("s-d", "s", "d", 10.0, energy=leg_energy),
    ]
    station = ChargingStation(
        node="s", rate=rate, options=tuple(options),
        entrance_free_flow_wait=wait, entrance_wait_slope=slope,
    )
    return build_extended_graph(arcs, [station], bus_map={"s": "bus_s"})


def parallel_roads_graph(t1=10.0, t2=12.0, s1=0.0, s2=0.0):
    return build_extended_graph(
        [
            RoadArc("r1", "o", "d", t1, latency_slope=s1),
            RoadArc("r2", "o", "d", t2, latency_slope=s2),
        ]
    )


def two_bus_network(limit=5.0, a=(1.0, 1.0), b=(10.0, 10.0), g_max=(100.0, 100.0), u=(0.0, 0.0)):
    return PowerNetwork(
        buses=("n1", "n2"),
        lines=(Line("ln", "n1", "n2", susceptance=10.0, limit_fwd=limit, limit_rev=limit),),
        cost_a=np.array(a),
        cost_b=np.array(b),
        g_min=np.zeros(2),
        g_max=np.array(g_max),
        baseload=np.array(u),
        slack="n1",
    )


def single_bus_network(a=1.0, b=10.0, g_min=0.0, g_max=100.0, u=0.0):
    return PowerNetwork(
        buses=("n1",),
        lines=(),
        cost_a=np.array([a]),
        cost_b=np.array([b]),
        g_min=np.array([g_min]),
        g_max=np.array([g_max]),
        baseload=np.array([u]),
        slack="n1",
    )


def random_small_network(rng: np.random.Generator) -> PowerNetwork:
    """Generic random network with at most 3 buses and 3 lines."""
    n = int(rng.integers(2, 4))
    buses = tuple(f"n{i}" for i in range(n))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    lines = []
    # spanning chain keeps it connected, extra line optional
    chain = [(i, i + 1) for i in range(n - 1)]
    extra = [p for p in pairs if p not in chain]
    chosen = chain + ([extra[0]] if extra and rng.random() < 0.5 else [])
    for k, (i, j) in enumerate(chosen):
        lines.append(
            Line(
                f"l{k}",
                buses[i],
                buses[j],
                susceptance=float(rng.uniform(2.0, 20.0)),
                limit_fwd=float(rng.uniform(0.3, 3.0)),
                limit_rev=float(rng.uniform(0.3, 3.0)),
            )
        )
    return PowerNetwork(
        buses=buses,
        lines=tuple(lines),
        cost_a=rng.uniform(0.5, 5.0, size=n),
        cost_b=rng.uniform(1.0, 20.0, size=n),
        g_min=np.zeros(n),
        g_max=rng.uniform(2.0, 8.0, size=n),
        baseload=rng.uniform(0.0, 0.5, size=n),
        slack=buses[0],
    )


def random_transport_instance(rng: np.random.Generator):
    """Random small extended-graph instance with stations and EV classes.

    Nodes <= 8, up to 2 stations, strictly positive road and entrance
    slopes so equilibria are unique.
    """
    n = int(rng.integers(4, 9))
    nodes = [f"v{i}" for i in range(n)]
    arcs = []
    # forward chain plus random shortcuts, energies sized so charging matters
    for i in range(n - 1):
        arcs.append(
            RoadArc(
                f"c{i}", nodes[i], nodes[i + 1],
                free_flow_time=float(rng.uniform(5, 30)),
                latency_slope=float(rng.uniform(1e-4, 5e-3)),
                energy=float(rng.uniform(0.5, 2.0)),
            )
        )
    for k in range(int(rng.integers(1, n))):
        i, j = sorted(rng.choice(n, size=2, replace=False))
        if i == j:
            continue
        arcs.append(
            RoadArc(
                f"x{k}", nodes[int(i)], nodes[int(j)],
                free_flow_time=float(rng.uniform(5, 50)),
                latency_slope=float(rng.uniform(1e-4, 5e-3)),
                energy=float(rng.uniform(0.5, 3.0)),
            )
        )
    station_nodes = [nodes[int(i)] for i in rng.choice(range(1, n - 1), size=min(2, n - 2), replace=False)]
    stations = []
    bus_map = {}
    for si, v in enumerate(sorted(set(station_nodes))):
        stations.append(
            ChargingStation(
                node=v,
                rate=float(rng.uniform(0.1, 0.4)),
                options=(1.0, 2.0),
                entrance_free_flow_wait=float(rng.uniform(0.5, 3.0)),
                entrance_wait_slope=float(rng.uniform(5e-3, 5e-2)),
            )
        )
        bus_map[v] = f"pb{si}"
    graph = build_extended_graph(arcs, stations, origins={nodes[0]}, bus_map=bus_map)
    classes = []
    for q in range(int(rng.integers(1, 3))):
        classes.append(
            VehicleClass(
                id=f"q{q}",
                origin=nodes[0],
                destination=nodes[-1],
                demand_rate=float(rng.uniform(20, 200)),
                initial_charge=float(rng.uniform(2.0, 4.0)),
                battery_capacity=6.0,
                kind="ev",
            )
        )
    pathsets = [enumerate_feasible_paths(graph, vc) for vc in classes]
    if any(ps.is_empty for ps in pathsets):
        return None
    return graph, classes, pathsets
