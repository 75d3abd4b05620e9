"""Road network, Park & Ride hubs, vehicle classes and per-vehicle costs.

Commuters drive from their origin to a hub, park there for the day and reach
the workplace by public transport.  A *global path* is one driving route to a
hub together with a charging decision: charge at the hub, charge later (only
class ``e1``), or nothing (gasoline vehicles).  Costs combine BPR congestion,
the hub's PT fare and the energy bill of the chosen option.

Flows are vehicle counts; the BPR term normalises by the total fleet size so
that an arc capacity of 0.2 reads "20 % of all vehicles".
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping

import networkx as nx
import numpy as np

__all__ = [
    "ChargingDecision",
    "Arc",
    "Hub",
    "VehicleClass",
    "GlobalPath",
    "TransportScenario",
    "PathSet",
    "bpr_travel_cost",
    "energy_need",
    "path_cost",
    "enumerate_paths",
]

CSO_OWNER = "cso"
CITY_OWNER = "city"


class ChargingDecision(enum.Enum):
    AT_HUB = "at_hub"
    LATER = "later"
    NOT_APPLICABLE = "none"


@dataclass(frozen=True)
class Arc:
    id: str
    tail: int
    head: int
    length_km: float
    speed_kmh: float
    capacity_frac: float

    def __post_init__(self):
        if self.length_km <= 0 or self.speed_kmh <= 0 or self.capacity_frac <= 0:
            raise ValueError(f"arc {self.id}: length, speed and capacity must be positive")


@dataclass(frozen=True, eq=False)
class Hub:
    id: int
    node: int
    owner: str                    # "cso" or "city"
    pt_fare_eur: float
    bus: int                      # distribution-grid bus hosting the hub
    nonflex_kwh: tuple            # nonflexible consumption per slot, length T

    def __post_init__(self):
        if self.owner not in (CSO_OWNER, CITY_OWNER):
            raise ValueError(f"hub {self.id}: owner must be 'cso' or 'city', got {self.owner!r}")
        if any(v < 0 for v in self.nonflex_kwh):
            raise ValueError(f"hub {self.id}: nonflexible loads must be nonnegative")

    @property
    def is_cso(self) -> bool:
        return self.owner == CSO_OWNER


@dataclass(frozen=True)
class VehicleClass:
    """One commuter class: gasoline ("g") or an EV class ("e0", "e1").

    ``offsite_price_eur`` is the fuel unit price for GVs and the charge-later
    unit price for ``e1``; class ``e0`` has no charge-later option.
    ``topup_kwh`` is the post-trip state-of-charge deficit EVs refill on top
    of the driving consumption.
    """

    tag: str
    consumption_per_km: float     # kWh/km for EVs, L/km for GVs
    topup_kwh: float = 0.0
    offsite_price_eur: float | None = None

    def __post_init__(self):
        if self.tag not in ("g", "e0", "e1"):
            raise ValueError(f"unknown vehicle class tag {self.tag!r}")
        if self.consumption_per_km <= 0:
            raise ValueError(f"class {self.tag}: consumption must be positive")
        if self.topup_kwh < 0:
            raise ValueError(f"class {self.tag}: top-up need must be nonnegative")
        if self.tag == "e0" and self.offsite_price_eur is not None:
            raise ValueError("class e0 cannot charge later and takes no offsite price")
        if self.tag in ("g", "e1") and self.offsite_price_eur is None:
            raise ValueError(f"class {self.tag} requires an offsite unit price")

    @property
    def is_ev(self) -> bool:
        return self.tag != "g"


@dataclass(frozen=True)
class GlobalPath:
    """A driving route to a hub plus the charging decision taken there."""

    id: int
    class_tag: str
    origin: int
    destination: int
    arc_ids: tuple
    hub_id: int
    decision: ChargingDecision
    length_km: float

    def __post_init__(self):
        if self.class_tag == "g" and self.decision is not ChargingDecision.NOT_APPLICABLE:
            raise ValueError("gasoline paths carry no charging decision")
        if self.class_tag == "e0" and self.decision is not ChargingDecision.AT_HUB:
            raise ValueError("class e0 always charges at the hub")
        if self.class_tag == "e1" and self.decision is ChargingDecision.NOT_APPLICABLE:
            raise ValueError("EV paths must carry a charging decision")


@dataclass(frozen=True, eq=False)
class TransportScenario:
    """Immutable bundle of network, hubs, classes and demands."""

    arcs: tuple
    hubs: tuple
    classes: tuple
    od_demands: tuple             # ((class_tag, origin, destination, count), ...)
    value_of_time_eur_per_h: float
    city_hub_price_eur_per_kwh: float     # constant price at city-owned hubs
    n_slots: int

    def __post_init__(self):
        if any(count < 0 for *_k, count in self.od_demands):
            raise ValueError("OD demands must be nonnegative")
        if self.fleet_size <= 0:
            raise ValueError("scenario needs a positive total fleet")
        for h in self.hubs:
            if len(h.nonflex_kwh) != self.n_slots:
                raise ValueError(f"hub {h.id}: nonflexible profile length != {self.n_slots}")
        e1 = self.class_by_tag.get("e1")
        if e1 is not None and self.city_hub_price_eur_per_kwh <= e1.offsite_price_eur:
            raise ValueError("city hub price must exceed the charge-later price")

    @cached_property
    def fleet_size(self) -> float:
        return float(sum(count for *_k, count in self.od_demands))

    @cached_property
    def class_by_tag(self) -> Mapping[str, VehicleClass]:
        return {c.tag: c for c in self.classes}

    @cached_property
    def hub_by_id(self) -> Mapping[int, Hub]:
        return {h.id: h for h in self.hubs}

    @cached_property
    def arc_index(self) -> Mapping[str, int]:
        return {a.id: i for i, a in enumerate(self.arcs)}

    @cached_property
    def cso_hub_ids(self) -> tuple:
        return tuple(h.id for h in self.hubs if h.is_cso)

    def od_pairs(self) -> list[tuple[int, int]]:
        """Distinct (origin, destination) pairs in first-appearance order."""
        seen: dict[tuple[int, int], None] = {}
        for _tag, origin, dest, _count in self.od_demands:
            seen.setdefault((origin, dest), None)
        return list(seen)

    def graph(self) -> nx.DiGraph:
        """Arc-expanded digraph: each arc is a node, so parallel arcs survive.

        Road node v appears as ("n", v) and arc a as ("a", a.id); a route is
        the alternating sequence and stays node-simple in both views.
        """
        g = nx.DiGraph()
        for a in self.arcs:
            g.add_edge(("n", a.tail), ("a", a.id), length_km=a.length_km)
            g.add_edge(("a", a.id), ("n", a.head), length_km=0.0)
        return g


def bpr_travel_cost(arc: Arc, total_arc_flow: float, scenario: TransportScenario) -> float:
    """Monetised BPR travel cost of one arc at the given total flow (counts)."""
    if total_arc_flow < 0:
        raise ValueError(f"arc flow must be nonnegative, got {total_arc_flow}")
    fraction = total_arc_flow / scenario.fleet_size
    free_flow = scenario.value_of_time_eur_per_h * arc.length_km / arc.speed_kmh
    return free_flow * (1.0 + 2.0 * (fraction / arc.capacity_frac) ** 4)


def energy_need(vclass: VehicleClass, path: GlobalPath) -> float:
    """Energy billed on the path: driving consumption plus the EV top-up."""
    if vclass.tag != path.class_tag:
        raise ValueError(f"path {path.id} belongs to class {path.class_tag}, not {vclass.tag}")
    consumption = path.length_km * vclass.consumption_per_km
    return consumption + vclass.topup_kwh if vclass.is_ev else consumption


def path_cost(vclass: VehicleClass, path: GlobalPath, arc_flows: np.ndarray,
              unit_price: float, scenario: TransportScenario) -> float:
    """Total cost of a path: congestion + PT fare + energy bill.

    ``arc_flows`` is a vector of total arc flows aligned with scenario.arcs.
    ``unit_price`` must match the path's decision (fuel price, charge-later
    price, or the hub's charging price).
    """
    if vclass.tag != path.class_tag:
        raise ValueError(f"path {path.id} belongs to class {path.class_tag}, not {vclass.tag}")
    if unit_price is None or unit_price < 0:
        raise ValueError("unit price must be a nonnegative number matching the charging decision")
    idx = scenario.arc_index
    congestion = sum(
        bpr_travel_cost(scenario.arcs[idx[a]], arc_flows[idx[a]], scenario)
        for a in path.arc_ids
    )
    fare = scenario.hub_by_id[path.hub_id].pt_fare_eur
    return congestion + fare + energy_need(vclass, path) * unit_price


@dataclass(frozen=True, eq=False)
class PathSet:
    """Enumerated global paths plus warnings about omitted (OD, hub) pairs."""

    paths: tuple
    warnings: tuple

    def __len__(self) -> int:
        return len(self.paths)


def enumerate_paths(scenario: TransportScenario, k: int = 8) -> PathSet:
    """k shortest acyclic routes per (OD, hub), expanded into class paths.

    Routes are ranked by free-flow length.  Each route becomes one gasoline
    path, one e0 at-hub path and, for class e1, both an at-hub and a
    charge-later path (restricted to classes present in the scenario).
    Unreachable hubs are skipped with a warning; an OD pair with no reachable
    hub at all is an error.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    graph = scenario.graph()
    arc_by_id = {a.id: a for a in scenario.arcs}
    tags = [c.tag for c in scenario.classes]

    paths: list[GlobalPath] = []
    warnings: list[str] = []
    counter = itertools.count()
    for origin, dest in scenario.od_pairs():
        reached_any = False
        for hub in scenario.hubs:
            routes: list[tuple[str, ...]] = []
            try:
                gen = nx.shortest_simple_paths(graph, ("n", origin), ("n", hub.node),
                                               weight="length_km")
                for expanded in itertools.islice(gen, k):
                    routes.append(tuple(label for kind, label in expanded if kind == "a"))
            except (nx.NetworkXNoPath, nx.NodeNotFound):
                pass
            if not routes:
                warnings.append(
                    f"hub {hub.id} unreachable from origin {origin}; omitting (origin={origin}, hub={hub.id})"
                )
                continue
            reached_any = True
            for arcs in routes:
                length = sum(arc_by_id[a].length_km for a in arcs)
                for tag in tags:
                    if tag == "g":
                        decisions = [ChargingDecision.NOT_APPLICABLE]
                    elif tag == "e0":
                        decisions = [ChargingDecision.AT_HUB]
                    else:
                        decisions = [ChargingDecision.AT_HUB, ChargingDecision.LATER]
                    for decision in decisions:
                        paths.append(GlobalPath(
                            id=next(counter), class_tag=tag, origin=origin,
                            destination=dest, arc_ids=arcs, hub_id=hub.id,
                            decision=decision, length_km=length,
                        ))
        if not reached_any:
            raise ValueError(f"no hub reachable from origin {origin}; scenario is infeasible")
    return PathSet(tuple(paths), tuple(warnings))
