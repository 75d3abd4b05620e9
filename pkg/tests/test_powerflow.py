import numpy as np
import pytest

from evtrilevel.powerflow import (
    GridCase,
    PowerFlowError,
    grid_cost,
    head_power,
    load_ieee33,
    solve_power_flow,
)


@pytest.fixture(scope="module")
def feeder():
    return load_ieee33()


def two_bus_case(r=0.05, x=0.03):
    # impedances passed in per-unit by picking bases that give z_base = 1 ohm
    return GridCase.build([1, 2], [[0.0], [0.0]], [[0.0], [0.0]],
                          [(1, 2, r, x)], 1, 1.0, 1000.0, {})


def two_bus_voltage(z, s_load):
    """|V2|^2 from the closed-form quadratic of the single-line feeder."""
    r, x = z.real, z.imag
    p, q = s_load.real, s_load.imag
    b = 2.0 * (r * p + x * q) - 1.0
    c = (r * r + x * x) * (p * p + q * q)
    disc = b * b - 4.0 * c
    assert disc >= 0, "load beyond loadability"
    return (-b + np.sqrt(disc)) / 2.0


class TestLoadIeee33:
    def test_dimensions(self, feeder):
        assert feeder.n_buses == 33
        assert len(feeder.lines) == 32

    def test_radial_invariant(self, feeder):
        assert len(feeder.lines) == feeder.n_buses - 1

    def test_canonical_totals(self, feeder):
        assert feeder.p_load_kw[:, 0].sum() == pytest.approx(3715.0)
        assert feeder.q_load_kvar[:, 0].sum() == pytest.approx(2300.0)

    def test_no_load_flat(self, feeder):
        sol = solve_power_flow(feeder, np.zeros(33, dtype=complex))
        assert sol.head_pu == 0.0
        assert np.allclose(sol.voltages, 1.0)

    def test_base_case_voltage_profile(self, feeder):
        sol = solve_power_flow(feeder, feeder.base_loads_pu(0))
        # canonical minimum voltage of the feeder at nominal loading
        assert float(np.abs(sol.voltages).min()) == pytest.approx(0.9131, abs=2e-3)


class TestSolvePowerFlow:
    def test_two_bus_closed_form(self):
        z = complex(0.05, 0.03)
        s_load = complex(0.8, 0.4)
        case = two_bus_case(z.real, z.imag)
        sol = solve_power_flow(case, np.array([0.0, s_load]))
        assert abs(sol.voltages[1]) ** 2 == pytest.approx(two_bus_voltage(z, s_load), rel=1e-10)
        assert sol.head_pu >= abs(s_load)   # losses are nonnegative

    def test_residual_below_contract(self, feeder):
        sol = solve_power_flow(feeder, feeder.base_loads_pu(0))
        assert sol.residual_pu <= 1e-8

    def test_sweep_newton_cross_check(self, feeder):
        loads = feeder.base_loads_pu(0)
        sweep = solve_power_flow(feeder, loads, method="sweep")
        newton = solve_power_flow(feeder, loads, method="newton")
        assert sweep.head_pu == pytest.approx(newton.head_pu, rel=1e-6)
        assert np.abs(sweep.voltages - newton.voltages).max() <= 1e-6

    def test_voltage_collapse_detected(self, feeder):
        heavy = feeder.base_loads_pu(0) * 40.0
        with pytest.raises(PowerFlowError):
            solve_power_flow(feeder, heavy)

    def test_wrong_shape_rejected(self, feeder):
        with pytest.raises(ValueError):
            solve_power_flow(feeder, np.zeros(5, dtype=complex))


class TestGridCost:
    def hubs(self):
        return {8: 0.0, 10: 0.0, 17: 0.0, 18: 0.0}

    def test_zero_ev_zero_cost(self, feeder):
        nonflex = {8: 188.0, 10: 85.0, 17: 56.0, 18: 56.0}
        assert grid_cost(feeder, self.hubs(), nonflex, 0) == 0.0

    def test_monotone_in_single_hub_load(self, feeder):
        nonflex = {8: 188.0, 10: 85.0, 17: 56.0, 18: 56.0}
        costs = []
        for load in np.linspace(0.0, 400.0, 9):
            ev = self.hubs()
            ev[10] = load
            costs.append(grid_cost(feeder, ev, nonflex, 0))
        assert costs[0] == 0.0
        assert np.all(np.diff(costs) > 0)

    def test_superlinear_doubling(self, feeder):
        nonflex = {8: 188.0, 10: 85.0, 17: 56.0, 18: 56.0}
        ev1 = {8: 100.0, 10: 50.0, 17: 25.0, 18: 300.0}
        ev2 = {h: 2 * v for h, v in ev1.items()}
        g1 = grid_cost(feeder, ev1, nonflex, 0)
        g2 = grid_cost(feeder, ev2, nonflex, 0)
        assert g2 > 2.0 * g1

    def test_nonnegative_on_random_loads(self, feeder):
        rng = np.random.default_rng(11)
        nonflex = {8: 188.0, 10: 85.0, 17: 56.0, 18: 56.0}
        for _ in range(25):
            ev = {h: float(rng.uniform(0, 500)) for h in (8, 10, 17, 18)}
            assert grid_cost(feeder, ev, nonflex, 0) >= 0.0

    def test_slot_additivity_order_free(self, feeder):
        rng = np.random.default_rng(5)
        ev = {h: float(rng.uniform(0, 300)) for h in (8, 10, 17, 18)}
        nonflex = {8: 188.0, 10: 85.0, 17: 56.0, 18: 56.0}
        forward = sum(grid_cost(feeder, ev, nonflex, t) for t in range(feeder.n_slots))
        backward = sum(grid_cost(feeder, ev, nonflex, t)
                       for t in reversed(range(feeder.n_slots)))
        assert forward == pytest.approx(backward, rel=0, abs=0)

    def test_negative_ev_rejected(self, feeder):
        with pytest.raises(ValueError):
            grid_cost(feeder, {8: -1.0, 10: 0.0, 17: 0.0, 18: 0.0},
                      {8: 0.0, 10: 0.0, 17: 0.0, 18: 0.0}, 0)


class TestHeadPowerSurrogate:
    def test_extrapolation_monotone_and_continuous(self, feeder):
        base = feeder.base_loads_pu(0)
        bus = feeder.bus_index[18]
        heads = []
        for extra_mw in np.linspace(0.0, 12.0, 25):
            loads = base.copy()
            loads[bus] += extra_mw
            heads.append(head_power(feeder, loads, anchor_pu=base))
        heads = np.array(heads)
        assert np.all(np.diff(heads) > 0)
        # the surrogate should not jump at the feasibility boundary
        assert np.diff(heads).max() <= 4.0 * np.median(np.diff(heads))

    def test_no_anchor_propagates_error(self, feeder):
        heavy = feeder.base_loads_pu(0) * 40.0
        with pytest.raises(PowerFlowError):
            head_power(feeder, heavy)


class TestGridCaseValidation:
    def test_non_radial_rejected(self):
        with pytest.raises(ValueError):
            GridCase.build([1, 2, 3], np.zeros((3, 1)), np.zeros((3, 1)),
                           [(1, 2, 0.1, 0.1), (2, 3, 0.1, 0.1), (1, 3, 0.1, 0.1)],
                           1, 12.66, 1000.0, {})

    def test_disconnected_rejected(self):
        with pytest.raises(ValueError):
            GridCase.build([1, 2, 3, 4], np.zeros((4, 1)), np.zeros((4, 1)),
                           [(1, 2, 0.1, 0.1), (3, 4, 0.1, 0.1), (3, 4, 0.2, 0.2)],
                           1, 12.66, 1000.0, {})

    def test_nonpositive_resistance_rejected(self):
        with pytest.raises(ValueError):
            GridCase.build([1, 2], np.zeros((2, 1)), np.zeros((2, 1)),
                           [(1, 2, 0.0, 0.1)], 1, 12.66, 1000.0, {})
