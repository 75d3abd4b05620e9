import numpy as np
import pytest
from scipy.integrate import quad

from evtrilevel.equilibrium import (
    FlowAssignment,
    PathSystem,
    WardropError,
    beckmann_value,
    charging_needs,
    solve_wardrop,
    uniqueness_probe,
    wardrop_gap,
)
from evtrilevel.transport import (
    Arc,
    ChargingDecision,
    Hub,
    TransportScenario,
    VehicleClass,
    bpr_travel_cost,
)

GV = VehicleClass("g", 0.06, 0.0, 1.5)
E0 = VehicleClass("e0", 0.2, 5.0, None)
E1 = VehicleClass("e1", 0.2, 0.0, 0.20)


def parallel_scenario(lengths=(5.0, 5.0), demand=1000.0, classes=(GV,), n_slots=4,
                      capacity=0.2):
    arcs = tuple(Arc(f"a{i}", 1, 2, l, 50.0, capacity) for i, l in enumerate(lengths))
    hubs = (Hub(2, 2, "city", 0.0, 1, (1.0,) * n_slots),)
    dem = tuple((c.tag, 1, 2, demand / len(classes)) for c in classes)
    return TransportScenario(arcs, hubs, classes, dem, 10.0, 0.25, n_slots)


def cso_toy(alpha_profile=(10.0, 20.0, 30.0, 40.0)):
    classes = (GV, E0, E1)
    hubs = (Hub(2, 2, "cso", 0.0, 1, alpha_profile),
            Hub(3, 3, "city", 0.0, 2, (5.0,) * 4))
    arcs = (Arc("a12", 1, 2, 5.0, 50.0, 0.2), Arc("a13", 1, 3, 6.0, 50.0, 0.2),
            Arc("a23", 2, 3, 1.0, 50.0, 0.2), Arc("a32", 3, 2, 1.0, 50.0, 0.2))
    dem = (("g", 1, 9, 500.0), ("e0", 1, 9, 250.0), ("e1", 1, 9, 250.0))
    return TransportScenario(arcs, hubs, classes, dem, 10.0, 0.25, 4)


class TestSolveWardrop:
    def test_identical_parallel_arcs_split_evenly(self):
        res = solve_wardrop(parallel_scenario(), alpha=0.0)
        assert np.allclose(res.assignment.flows, [500.0, 500.0])
        assert res.gap <= 1e-9

    def test_light_demand_takes_cheap_arc(self):
        # second arc has double free-flow cost; capacity generous enough that
        # the cheap arc stays below the crossover even with all the demand
        scn = parallel_scenario(lengths=(5.0, 10.0), demand=50.0, capacity=2.0)
        res = solve_wardrop(scn, alpha=0.0)
        assert np.allclose(res.assignment.flows, [50.0, 0.0])

        system = res.assignment.system
        grid = np.linspace(0.0, 50.0, 2001)
        best_val = min(system.potential(np.array([50.0 - s, s]), 0.0) for s in grid)
        assert system.potential(res.assignment.flows, 0.0) <= best_val + 1e-9

    def test_congested_split_matches_grid_oracle(self):
        scn = parallel_scenario(lengths=(5.0, 6.0), demand=900.0)
        res = solve_wardrop(scn, alpha=0.0, tol=1e-10)
        system = res.assignment.system
        grid = np.linspace(0.0, 900.0, 90001)
        vals = [system.potential(np.array([900.0 - s, s]), 0.0) for s in grid]
        split = grid[int(np.argmin(vals))]
        assert res.assignment.flows[1] == pytest.approx(split, abs=0.02)

    def test_nonconvergence_carries_best_iterate(self):
        scn = cso_toy()
        with pytest.raises(WardropError) as err:
            solve_wardrop(scn, alpha=5e-4, tol=1e-13, max_iter=2)
        assert err.value.best.assignment.flows.shape[0] > 0

    def test_used_paths_within_tol_of_minimum(self):
        scn = cso_toy()
        alpha, tol = 5e-4, 1e-8
        res = solve_wardrop(scn, alpha, tol=tol)
        system = res.assignment.system
        costs = system.path_costs(res.assignment.flows, alpha)
        for _key, idxs, dem in system.blocks:
            if dem <= 0:
                continue
            used = res.assignment.flows[idxs] > 0
            if used.any():
                assert costs[idxs][used].max() - costs[idxs].min() <= tol

    def test_local_minimum_spot_check(self):
        scn = cso_toy()
        res = solve_wardrop(scn, 5e-4, tol=1e-10)
        system = res.assignment.system
        base = system.potential(res.assignment.flows, 5e-4)
        rng = np.random.default_rng(0)
        for _ in range(25):
            flows = res.assignment.flows.copy()
            for _key, idxs, dem in system.blocks:
                if dem > 0:
                    w = rng.dirichlet(np.ones(len(idxs)))
                    flows[idxs] = 0.9 * flows[idxs] + 0.1 * dem * w
            assert system.potential(flows, 5e-4) >= base - 1e-9

    def test_potential_decreases_along_iterates(self):
        res = solve_wardrop(cso_toy(), 5e-4, collect_potentials=True)
        trace = np.array(res.potential_trace)
        assert trace.size >= 2
        assert np.all(np.diff(trace) <= 1e-9 * np.abs(trace[:-1]))


class TestBeckmannValue:
    def test_arc_integral_matches_quadrature(self):
        scn = parallel_scenario(lengths=(2.5,), demand=700.0)
        system = PathSystem(scn)
        flows = np.array([700.0])
        closed = system.arc_integrals(system.arc_flows(flows))
        num, _err = quad(lambda s: bpr_travel_cost(scn.arcs[0], s, scn), 0.0, 700.0)
        assert closed == pytest.approx(num, rel=1e-9)

    def test_zero_alpha_drops_hub_coupling(self):
        scn = cso_toy()
        system = PathSystem(scn)
        flows = np.zeros(len(system.paths))
        for _key, idxs, dem in system.blocks:
            flows[idxs] = dem / len(idxs)
        expected = system.arc_integrals(system.arc_flows(flows))
        expected += float(np.dot(flows, system.linear_cost))
        assert system.potential(flows, 0.0) == pytest.approx(expected)

    def test_gradient_is_path_cost(self):
        scn = cso_toy()
        system = PathSystem(scn)
        rng = np.random.default_rng(3)
        flows = np.zeros(len(system.paths))
        for _key, idxs, dem in system.blocks:
            flows[idxs] = dem * rng.dirichlet(np.ones(len(idxs)))
        alpha, eps = 7e-4, 1e-6
        costs = system.path_costs(flows, alpha)
        for i in rng.choice(len(flows), size=6, replace=False):
            bump = np.zeros_like(flows)
            bump[i] = eps
            fd = (system.potential(flows + bump, alpha)
                  - system.potential(flows - bump, alpha)) / (2 * eps)
            assert fd == pytest.approx(costs[i], rel=1e-5, abs=1e-7)

    def test_infeasible_assignment_rejected(self):
        scn = parallel_scenario()
        system = PathSystem(scn)
        bad = FlowAssignment(system, np.array([100.0, 100.0]))   # demand is 1000
        with pytest.raises(ValueError):
            beckmann_value(bad, 0.0)


class TestWardropGap:
    def test_balanced_split_zero_gap(self):
        res = solve_wardrop(parallel_scenario(), 0.0)
        assert wardrop_gap(res.assignment, 0.0) <= 1e-9

    def test_forced_bad_assignment(self):
        scn = parallel_scenario(lengths=(5.0, 10.0), demand=50.0)
        system = PathSystem(scn)
        bad = FlowAssignment(system, np.array([0.0, 50.0]))      # all on the worse arc
        costs = system.path_costs(bad.flows, 0.0)
        assert wardrop_gap(bad, 0.0) == pytest.approx(costs[1] - costs[0])

    def test_solver_output_replays_below_tol(self):
        res = solve_wardrop(cso_toy(), 5e-4, tol=1e-7)
        assert wardrop_gap(res.assignment, 5e-4) <= 1e-7


class TestChargingNeeds:
    def test_no_ev_flow(self):
        res = solve_wardrop(parallel_scenario(), 0.0)
        assert all(v == 0.0 for v in charging_needs(res.assignment).values())

    def test_hand_computed_need(self):
        # 100 class-e0 vehicles on a single 10 km route: 100 * (10*0.2 + 5)
        arcs = (Arc("a", 1, 2, 10.0, 50.0, 0.2),)
        hubs = (Hub(2, 2, "cso", 0.0, 1, (1.0,) * 4),)
        scn = TransportScenario(arcs, hubs, (E0,), (("e0", 1, 2, 100.0),), 10.0, 0.25, 4)
        res = solve_wardrop(scn, 1e-4)
        assert charging_needs(res.assignment)[2] == pytest.approx(700.0)

    def test_conservation_across_hubs(self):
        scn = cso_toy()
        res = solve_wardrop(scn, 5e-4)
        system = res.assignment.system
        charging = system.charge_hub >= 0
        total_energy = float(np.dot(res.assignment.flows[charging], system.energy[charging]))
        assert sum(res.needs_kwh.values()) == pytest.approx(total_energy, rel=1e-12)


class TestUniqueness:
    def test_single_path_trivially_unique(self):
        arcs = (Arc("a", 1, 2, 10.0, 50.0, 0.2),)
        hubs = (Hub(2, 2, "cso", 0.0, 1, (1.0,) * 4),)
        scn = TransportScenario(arcs, hubs, (E0,), (("e0", 1, 2, 100.0),), 10.0, 0.25, 4)
        rep = uniqueness_probe(scn, 1e-4, 3, seed=0)
        assert rep.arc_flow_deviation == 0.0
        assert rep.need_deviation == 0.0

    def test_duplicate_routes_leave_aggregates_unique(self):
        # two identical parallel arcs: path flows are degenerate, the
        # arc-flow *sum* and hub needs are not
        scn = parallel_scenario(classes=(GV, E0), demand=800.0)
        rep = uniqueness_probe(scn, 2e-4, 5, seed=1)
        assert rep.max_relative() <= 1e-6

    def test_coupled_toy(self):
        rep = uniqueness_probe(cso_toy(), 5e-4, 5, seed=2)
        assert rep.max_relative() <= 1e-6

    def test_needs_at_least_two_starts(self):
        with pytest.raises(ValueError):
            uniqueness_probe(cso_toy(), 5e-4, 1)


class TestFixedPrices:
    def test_fixed_price_system_decouples(self):
        scn = cso_toy()
        system = PathSystem(scn, cso_prices={2: 0.22})
        assert not system.variable_price.any()
        res = solve_wardrop(scn, 0.0, system=system)
        assert res.gap <= 1e-5
        # potential with alpha is identical to alpha=0: no coupling term left
        assert system.potential(res.assignment.flows, 1e-3) == pytest.approx(
            system.potential(res.assignment.flows, 0.0))
