"""Road network model and the extended multigraph with virtual charging arcs.

The extended graph turns every charging decision into a routing decision:

* a fast-charging station node ``v`` is split into ``v#in`` and ``v#out``,
  joined by a congestible *entrance* arc (leading to parallel *charge-amount*
  arcs, one per purchasable kWh option) and a free *bypass* arc;
* a trip origin with a charging facility gets optional *prefix* charge arcs
  hanging off a virtual source node ``v#src``.

Charge-amount arcs carry negative traversal energy (the battery gains
charge).  All arc cost evaluation lives here so that the assignment and
path-search layers never special-case arc kinds.

Internal units: minutes, dollars, kWh, vehicles per epoch.  Per-arc money
costs take prices in dollars per kWh (scenario files use $/MWh and are
converted on load).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence


class GraphConstructionError(ValueError):
    """Raised when the extended graph cannot be built from the inputs."""


class ArcKind(enum.Enum):
    ROAD = "road"
    ENTRANCE = "entrance"
    BYPASS = "bypass"
    CHARGE = "charge"


@dataclass(frozen=True)
class RoadArc:
    """Directed road section with affine latency and fixed energy draw.

    ``free_flow_time`` and ``latency_slope`` parameterize the travel time
    ``T + slope * flow`` in minutes; ``energy`` is the kWh consumed per
    traversal; ``toll`` is a fixed monetary charge in dollars.
    """

    id: str
    tail: str
    head: str
    free_flow_time: float
    latency_slope: float = 0.0
    energy: float = 0.0
    toll: float = 0.0

    def __post_init__(self) -> None:
        if self.tail == self.head:
            raise GraphConstructionError(f"arc {self.id}: tail equals head")
        if self.free_flow_time < 0 or self.latency_slope < 0:
            raise GraphConstructionError(f"arc {self.id}: negative latency parameter")
        if self.energy < 0:
            raise GraphConstructionError(f"arc {self.id}: negative energy")
        if self.toll < 0:
            raise GraphConstructionError(f"arc {self.id}: negative toll")


@dataclass(frozen=True)
class ChargingStation:
    """Charging facility at a transport node.

    ``options`` is the strictly increasing list of purchasable kWh amounts
    (a zero option is never represented: at a station the bypass arc plays
    that role, at an origin simply not using a prefix arc does).  A station
    is either en-route (``is_trip_origin_facility=False``, node split with
    entrance/bypass) or an origin facility (prefix arcs, zero time cost).
    """

    node: str
    rate: float
    options: tuple[float, ...]
    entrance_free_flow_wait: float = 0.0
    entrance_wait_slope: float = 0.0
    plug_in_fee: float = 0.0
    is_trip_origin_facility: bool = False

    def __post_init__(self) -> None:
        if self.rate <= 0:
            raise GraphConstructionError(f"station {self.node}: rate must be positive")
        opts = tuple(float(e) for e in self.options)
        if not opts:
            raise GraphConstructionError(f"station {self.node}: no charge options")
        if any(e <= 0 for e in opts):
            raise GraphConstructionError(f"station {self.node}: non-positive charge option")
        if any(b <= a for a, b in zip(opts, opts[1:])):
            raise GraphConstructionError(f"station {self.node}: options not strictly increasing")
        if self.entrance_free_flow_wait < 0 or self.entrance_wait_slope < 0:
            raise GraphConstructionError(f"station {self.node}: negative wait parameter")
        if self.plug_in_fee < 0:
            raise GraphConstructionError(f"station {self.node}: negative plug-in fee")
        object.__setattr__(self, "options", opts)


@dataclass(frozen=True)
class ExtendedArc:
    """Arc of the extended multigraph.

    ``energy`` follows the traversal convention: positive consumes charge,
    negative (charge-amount arcs) adds it.  ``charge_amount`` is the positive
    kWh purchased on charge arcs, zero elsewhere.  Time cost is
    ``gamma * (free_flow_time + slope * flow)`` uniformly; bypass arcs and
    origin charge arcs carry (0, 0).
    """

    id: str
    tail: str
    head: str
    kind: ArcKind
    free_flow_time: float
    slope: float
    energy: float
    toll: float = 0.0
    station: Optional[str] = None
    charge_amount: float = 0.0
    at_origin: bool = False


@dataclass(frozen=True)
class ExtendedGraph:
    """Immutable extended transportation graph.

    ``entry_node``/``exit_node`` map a base node to the extended node where
    incoming/outgoing base arcs attach (identical for unsplit nodes).
    ``origin_prefix_arcs`` lists the optional origin charge arcs per
    origin-facility node; their tail is the virtual ``<node>#src``.
    ``bus_map`` records which power bus serves each station node.
    """

    nodes: tuple[str, ...]
    arcs: tuple[ExtendedArc, ...]
    base_nodes: tuple[str, ...]
    entry_node: Mapping[str, str]
    exit_node: Mapping[str, str]
    base_of: Mapping[str, str]
    stations: Mapping[str, ChargingStation]
    origin_prefix_arcs: Mapping[str, tuple[str, ...]]
    bus_map: Mapping[str, str]
    arc_pos: Mapping[str, int] = field(repr=False)
    out_arcs: Mapping[str, tuple[int, ...]] = field(repr=False)

    @property
    def n_arcs(self) -> int:
        return len(self.arcs)

    def arc(self, arc_id: str) -> ExtendedArc:
        return self.arcs[self.arc_pos[arc_id]]

    def station_bus(self, node: str) -> str:
        try:
            return self.bus_map[node]
        except KeyError:
            raise KeyError(f"no power bus mapped for station node {node!r}") from None


def _fmt_amount(e: float) -> str:
    return f"{e:g}"


def build_extended_graph(
    base: Iterable[RoadArc],
    stations: Sequence[ChargingStation] = (),
    origins: Iterable[str] = (),
    bus_map: Mapping[str, str] | None = None,
) -> ExtendedGraph:
    """Construct the extended multigraph from road arcs and stations.

    En-route stations split their node so through traffic picks exactly one
    of entrance or bypass; the entrance fans out into one charge-amount arc
    per option, all rejoining at ``<node>#out``.  Origin facilities attach
    their charge arcs as optional prefixes from ``<node>#src``.

    Raises :class:`GraphConstructionError` for stations at unknown nodes,
    duplicate stations per node, or an origin facility at a non-origin node.
    """
    road_arcs = sorted(base, key=lambda a: a.id)
    if not road_arcs:
        raise GraphConstructionError("base graph has no arcs")
    if len({a.id for a in road_arcs}) != len(road_arcs):
        raise GraphConstructionError("duplicate road arc id")
    base_nodes = sorted({a.tail for a in road_arcs} | {a.head for a in road_arcs})
    node_set = set(base_nodes)
    origins = set(origins)

    by_node: dict[str, ChargingStation] = {}
    for st in stations:
        if st.node not in node_set:
            raise GraphConstructionError(f"station at unknown node {st.node!r}")
        if st.node in by_node:
            raise GraphConstructionError(f"duplicate station at node {st.node!r}")
        if st.is_trip_origin_facility and st.node not in origins:
            raise GraphConstructionError(
                f"origin facility at {st.node!r} but node is not a trip origin"
            )
        by_node[st.node] = st

    split = {v for v, st in by_node.items() if not st.is_trip_origin_facility}
    entry = {v: (f"{v}#in" if v in split else v) for v in base_nodes}
    exit_ = {v: (f"{v}#out" if v in split else v) for v in base_nodes}

    arcs: list[ExtendedArc] = []
    for a in road_arcs:
        arcs.append(
            ExtendedArc(
                id=a.id,
                tail=exit_[a.tail],
                head=entry[a.head],
                kind=ArcKind.ROAD,
                free_flow_time=a.free_flow_time,
                slope=a.latency_slope,
                energy=a.energy,
                toll=a.toll,
            )
        )

    prefix: dict[str, tuple[str, ...]] = {}
    for v in sorted(by_node):
        st = by_node[v]
        if st.is_trip_origin_facility:
            ids = []
            for e in st.options:
                aid = f"{v}#pre:{_fmt_amount(e)}"
                ids.append(aid)
                arcs.append(
                    ExtendedArc(
                        id=aid,
                        tail=f"{v}#src",
                        head=v,
                        kind=ArcKind.CHARGE,
                        free_flow_time=0.0,
                        slope=0.0,
                        energy=-e,
                        station=v,
                        charge_amount=e,
                        at_origin=True,
                    )
                )
            prefix[v] = tuple(ids)
        else:
            arcs.append(
                ExtendedArc(
                    id=f"{v}#enter",
                    tail=f"{v}#in",
                    head=f"{v}#plug",
                    kind=ArcKind.ENTRANCE,
                    free_flow_time=st.entrance_free_flow_wait,
                    slope=st.entrance_wait_slope,
                    energy=0.0,
                    toll=st.plug_in_fee,
                    station=v,
                )
            )
            arcs.append(
                ExtendedArc(
                    id=f"{v}#bypass",
                    tail=f"{v}#in",
                    head=f"{v}#out",
                    kind=ArcKind.BYPASS,
                    free_flow_time=0.0,
                    slope=0.0,
                    energy=0.0,
                    station=v,
                )
            )
            for e in st.options:
                arcs.append(
                    ExtendedArc(
                        id=f"{v}#chg:{_fmt_amount(e)}",
                        tail=f"{v}#plug",
                        head=f"{v}#out",
                        kind=ArcKind.CHARGE,
                        free_flow_time=e / st.rate,
                        slope=0.0,
                        energy=-e,
                        station=v,
                        charge_amount=e,
                    )
                )

    arcs.sort(key=lambda a: a.id)
    arc_pos = {a.id: i for i, a in enumerate(arcs)}
    nodes = sorted({a.tail for a in arcs} | {a.head for a in arcs})

    base_of: dict[str, str] = {}
    for n in nodes:
        base_of[n] = n.split("#", 1)[0]

    out: dict[str, list[int]] = {n: [] for n in nodes}
    for i, a in enumerate(arcs):
        out[a.tail].append(i)
    out_arcs = {n: tuple(sorted(idx, key=lambda i: arcs[i].id)) for n, idx in out.items()}

    return ExtendedGraph(
        nodes=tuple(nodes),
        arcs=tuple(arcs),
        base_nodes=tuple(base_nodes),
        entry_node=entry,
        exit_node=exit_,
        base_of=base_of,
        stations=dict(sorted(by_node.items())),
        origin_prefix_arcs=prefix,
        bus_map=dict(bus_map or {}),
        arc_pos=arc_pos,
        out_arcs=out_arcs,
    )


def arc_time_cost(arc: ExtendedArc, flow: float, gamma: float) -> float:
    """Dollar cost of the time spent traversing ``arc`` at the given flow.

    Affine in flow for road and entrance arcs, fixed for en-route charge
    arcs (charging duration), zero for bypass and origin charge arcs.
    """
    if flow < 0:
        raise ValueError(f"negative flow {flow} on arc {arc.id}")
    return gamma * (arc.free_flow_time + arc.slope * flow)


def arc_money_cost(
    arc: ExtendedArc,
    prices_per_kwh: Mapping[str, float],
    tolls: Mapping[str, float] | None = None,
    bus_map: Mapping[str, str] | None = None,
) -> float:
    """Monetary cost of traversing ``arc``: tolls, plug-in fees, electricity.

    ``prices_per_kwh`` is keyed by power bus; ``bus_map`` translates station
    nodes to buses (a station node present directly in ``prices_per_kwh``
    also works).  ``tolls`` holds extra imposed per-arc tolls on top of the
    base toll carried by the arc.
    """
    extra = 0.0 if tolls is None else float(tolls.get(arc.id, 0.0))
    if arc.kind is ArcKind.BYPASS:
        return 0.0
    if arc.kind is ArcKind.CHARGE:
        key = arc.station
        if bus_map and key in bus_map:
            key = bus_map[key]
        if key not in prices_per_kwh:
            raise KeyError(f"missing electricity price for station {arc.station!r}")
        return prices_per_kwh[key] * arc.charge_amount + extra
    return arc.toll + extra
