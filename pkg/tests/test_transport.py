import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evtrilevel.transport import (
    Arc,
    ChargingDecision,
    GlobalPath,
    Hub,
    TransportScenario,
    VehicleClass,
    bpr_travel_cost,
    energy_need,
    enumerate_paths,
    path_cost,
)


def gv(price=1.5):
    return VehicleClass("g", 0.06, 0.0, price)


def ev0():
    return VehicleClass("e0", 0.2, 5.0, None)


def ev1(home=0.20):
    return VehicleClass("e1", 0.2, 0.0, home)


def two_node_scenario(demand=100.0, n_slots=4):
    arcs = (Arc("a", 1, 2, 2.5, 50.0, 0.2),)
    hubs = (Hub(2, 2, "city", 0.0, 1, (1.0,) * n_slots),)
    return TransportScenario(arcs, hubs, (gv(), ev0(), ev1()),
                             (("g", 1, 2, demand),), 10.0, 0.25, n_slots)


class TestBprTravelCost:
    def test_free_flow_reference(self):
        scn = two_node_scenario()
        arc = scn.arcs[0]
        assert bpr_travel_cost(arc, 0.0, scn) == pytest.approx(0.5)

    def test_at_capacity_triples(self):
        scn = two_node_scenario()
        arc = scn.arcs[0]
        at_cap = arc.capacity_frac * scn.fleet_size
        assert bpr_travel_cost(arc, at_cap, scn) == pytest.approx(3 * 0.5)

    def test_zero_flow_any_capacity(self):
        scn = two_node_scenario()
        arc = Arc("b", 1, 2, 10.0, 40.0, 0.9)
        assert bpr_travel_cost(arc, 0.0, scn) == pytest.approx(10.0 * 10.0 / 40.0)

    def test_negative_flow_rejected(self):
        scn = two_node_scenario()
        with pytest.raises(ValueError):
            bpr_travel_cost(scn.arcs[0], -1.0, scn)

    def test_strictly_increasing_and_continuous(self):
        scn = two_node_scenario()
        arc = scn.arcs[0]
        flows = np.linspace(0.0, 3.0 * scn.fleet_size, 400)
        costs = np.array([bpr_travel_cost(arc, f, scn) for f in flows])
        assert np.all(np.diff(costs) > 0)
        # each increment is bounded by the local slope (mean value theorem)
        cap = arc.capacity_frac * scn.fleet_size
        free = scn.value_of_time_eur_per_h * arc.length_km / arc.speed_kmh
        slope_hi = free * 8.0 * flows[1:] ** 3 / cap ** 4
        step = flows[1] - flows[0]
        assert np.all(np.diff(costs) <= slope_hi * step * 1.01 + 1e-12)


class TestEnergyNeed:
    def path(self, tag, length, decision):
        return GlobalPath(0, tag, 1, 2, ("a",), 2, decision, length)

    def test_e0_reference(self):
        need = energy_need(ev0(), self.path("e0", 10.0, ChargingDecision.AT_HUB))
        assert need == pytest.approx(7.0)

    def test_zero_length_e1(self):
        need = energy_need(ev1(), self.path("e1", 0.0, ChargingDecision.LATER))
        assert need == 0.0

    def test_gasoline(self):
        need = energy_need(gv(), self.path("g", 10.0, ChargingDecision.NOT_APPLICABLE))
        assert need == pytest.approx(0.6)

    def test_class_mismatch(self):
        with pytest.raises(ValueError):
            energy_need(gv(), self.path("e0", 1.0, ChargingDecision.AT_HUB))

    @given(st.floats(0.0, 100.0))
    @settings(max_examples=50, deadline=None)
    def test_affine_in_length(self, length):
        p = self.path("e0", length, ChargingDecision.AT_HUB)
        assert energy_need(ev0(), p) == pytest.approx(0.2 * length + 5.0)


class TestPathCost:
    def test_gv_reference(self):
        scn = two_node_scenario()
        path = GlobalPath(0, "g", 1, 2, ("a",), 2, ChargingDecision.NOT_APPLICABLE, 10.0)
        # free flow on a 2.5 km arc costs 0.5; fuel 10 km * 0.06 L/km * 1.5 EUR/L
        cost = path_cost(gv(), path, np.zeros(1), 1.5, scn)
        assert cost == pytest.approx(0.5 + 0.0 + 0.9)

    def test_all_zero(self):
        arcs = (Arc("a", 1, 2, 1e-9, 50.0, 0.2),)
        hubs = (Hub(2, 2, "city", 0.0, 1, (0.0,) * 4),)
        scn = TransportScenario(arcs, hubs, (gv(),), (("g", 1, 2, 10.0),), 10.0, 0.25, 4)
        path = GlobalPath(0, "g", 1, 2, (), 2, ChargingDecision.NOT_APPLICABLE, 0.0)
        assert path_cost(gv(), path, np.zeros(1), 1.5, scn) == 0.0

    def test_e1_later_reference(self):
        arcs = (Arc("a", 1, 2, 2.5, 50.0, 0.2),)
        hubs = (Hub(2, 2, "city", 1.0, 1, (1.0,) * 4),)
        scn = TransportScenario(arcs, hubs, (gv(), ev1()),
                                (("g", 1, 2, 100.0),), 10.0, 0.25, 4)
        path = GlobalPath(0, "e1", 1, 2, ("a",), 2, ChargingDecision.LATER, 10.0)
        cost = path_cost(ev1(), path, np.zeros(1), 0.20, scn)
        assert cost == pytest.approx(0.5 + 1.0 + 2.0 * 0.20)

    def test_bad_price_rejected(self):
        scn = two_node_scenario()
        path = GlobalPath(0, "g", 1, 2, ("a",), 2, ChargingDecision.NOT_APPLICABLE, 10.0)
        with pytest.raises(ValueError):
            path_cost(gv(), path, np.zeros(1), None, scn)
        with pytest.raises(ValueError):
            path_cost(gv(), path, np.zeros(1), -0.1, scn)

    def test_additivity_in_one_arc(self):
        scn = two_node_scenario()
        path = GlobalPath(0, "g", 1, 2, ("a",), 2, ChargingDecision.NOT_APPLICABLE, 2.5)
        flows0, flows1 = np.array([100.0]), np.array([400.0])
        delta_arc = (bpr_travel_cost(scn.arcs[0], 400.0, scn)
                     - bpr_travel_cost(scn.arcs[0], 100.0, scn))
        delta_path = (path_cost(gv(), path, flows1, 1.5, scn)
                      - path_cost(gv(), path, flows0, 1.5, scn))
        assert delta_path == pytest.approx(delta_arc)


class TestEnumeratePaths:
    def test_single_arc_expansion(self):
        scn = two_node_scenario()
        ps = enumerate_paths(scn, k=3)
        assert len(ps) == 4      # g, e0 at-hub, e1 at-hub, e1 later
        decisions = sorted((p.class_tag, p.decision.value) for p in ps.paths)
        assert decisions == [("e0", "at_hub"), ("e1", "at_hub"), ("e1", "later"), ("g", "none")]
        assert ps.warnings == ()

    def test_route_counting_bound(self):
        from evtrilevel.scenario import default_scenario
        scn = default_scenario().transport
        ps = enumerate_paths(scn, k=5)
        routes = {(p.origin, p.hub_id, p.arc_ids) for p in ps.paths}
        assert len(routes) <= 2 * 4 * 5

    def test_unreachable_hub_warns(self):
        arcs = (Arc("a", 1, 2, 2.5, 50.0, 0.2),)
        hubs = (Hub(2, 2, "city", 0.0, 1, (1.0,) * 4),
                Hub(9, 9, "cso", 0.0, 2, (1.0,) * 4))     # node 9 disconnected
        scn = TransportScenario(arcs, hubs, (gv(),), (("g", 1, 2, 10.0),), 10.0, 0.25, 4)
        ps = enumerate_paths(scn, k=2)
        assert any("unreachable" in w for w in ps.warnings)
        assert all(p.hub_id == 2 for p in ps.paths)

    def test_no_reachable_hub_is_error(self):
        arcs = (Arc("a", 1, 2, 2.5, 50.0, 0.2),)
        hubs = (Hub(9, 9, "city", 0.0, 1, (1.0,) * 4),)
        scn = TransportScenario(arcs, hubs, (gv(),), (("g", 1, 2, 10.0),), 10.0, 0.25, 4)
        with pytest.raises(ValueError):
            enumerate_paths(scn, k=2)

    def test_parallel_arcs_kept_apart(self):
        arcs = (Arc("a", 1, 2, 2.5, 50.0, 0.2), Arc("b", 1, 2, 2.5, 50.0, 0.2))
        hubs = (Hub(2, 2, "city", 0.0, 1, (1.0,) * 4),)
        scn = TransportScenario(arcs, hubs, (gv(),), (("g", 1, 2, 10.0),), 10.0, 0.25, 4)
        ps = enumerate_paths(scn, k=4)
        assert {p.arc_ids for p in ps.paths} == {("a",), ("b",)}

    def test_k_must_be_positive(self):
        with pytest.raises(ValueError):
            enumerate_paths(two_node_scenario(), k=0)


class TestValidation:
    def test_arc_invariants(self):
        for bad in (dict(length_km=0.0), dict(speed_kmh=-1.0), dict(capacity_frac=0.0)):
            kwargs = dict(id="a", tail=1, head=2, length_km=1.0, speed_kmh=50.0,
                          capacity_frac=0.2)
            kwargs.update(bad)
            with pytest.raises(ValueError):
                Arc(**kwargs)

    def test_hub_owner(self):
        with pytest.raises(ValueError):
            Hub(1, 1, "someone", 0.0, 1, (1.0,))
        with pytest.raises(ValueError):
            Hub(1, 1, "city", 0.0, 1, (-1.0,))

    def test_class_invariants(self):
        with pytest.raises(ValueError):
            VehicleClass("e0", 0.2, 5.0, 0.2)   # e0 has no charge-later price
        with pytest.raises(ValueError):
            VehicleClass("e1", 0.2, 0.0, None)  # e1 needs one
        with pytest.raises(ValueError):
            VehicleClass("g", -0.06, 0.0, 1.5)

    def test_city_price_must_exceed_home(self):
        arcs = (Arc("a", 1, 2, 2.5, 50.0, 0.2),)
        hubs = (Hub(2, 2, "city", 0.0, 1, (1.0,) * 4),)
        with pytest.raises(ValueError):
            TransportScenario(arcs, hubs, (ev1(home=0.30),),
                              (("e1", 1, 2, 10.0),), 10.0, 0.25, 4)

    def test_path_decision_rules(self):
        with pytest.raises(ValueError):
            GlobalPath(0, "g", 1, 2, (), 2, ChargingDecision.AT_HUB, 1.0)
        with pytest.raises(ValueError):
            GlobalPath(0, "e0", 1, 2, (), 2, ChargingDecision.LATER, 1.0)
        with pytest.raises(ValueError):
            GlobalPath(0, "e1", 1, 2, (), 2, ChargingDecision.NOT_APPLICABLE, 1.0)
