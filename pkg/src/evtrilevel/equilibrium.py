"""Wardrop equilibrium of the driving-and-charging game.

The equilibrium is computed by minimising a convex potential over the product
of per-(class, OD) flow simplices.  The potential collects the closed-form
BPR integrals, the linear fare/energy terms of constant-priced options, and
``alpha`` times the water-filling value at CSO hubs, whose derivative is
exactly the hub charging price — so stationary points are Wardrop equilibria.

The solver interleaves Frank-Wolfe steps (the linear oracle is "put the whole
block on its cheapest path") with pairwise flow-equilibration sweeps, both
with exact line searches.  Certification is independent: the equilibrium gap
is recomputed from scratch as the worst cost excess of any used path over its
block's cheapest path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq

from .charging import HubChargingCase
from .transport import (
    ChargingDecision,
    PathSet,
    TransportScenario,
    enumerate_paths,
)

__all__ = [
    "PathSystem",
    "FlowAssignment",
    "EquilibriumResult",
    "WardropError",
    "solve_wardrop",
    "wardrop_gap",
    "beckmann_value",
    "charging_needs",
    "uniqueness_probe",
    "UniquenessReport",
]


class WardropError(RuntimeError):
    """Lower-level solve failed to certify the requested gap; carries the best iterate."""

    def __init__(self, message: str, best: "EquilibriumResult"):
        super().__init__(message)
        self.best = best


class PathSystem:
    """Vectorised view of an enumerated path set for one scenario.

    Holds the path-arc incidence, per-path constants (fare, energy, constant
    unit price), block structure (one simplex per class and OD pair) and the
    water-filling case of every hub.  CSO-hub charging paths have no constant
    price: their energy bill enters through the hub value term.
    """

    def __init__(self, scenario: TransportScenario, path_set: PathSet | None = None,
                 cso_prices: Mapping[int, float] | None = None, k_paths: int = 8):
        if path_set is None:
            path_set = enumerate_paths(scenario, k=k_paths)
        self.scenario = scenario
        self.path_set = path_set
        self.paths = path_set.paths
        n = len(self.paths)
        if n == 0:
            raise ValueError("path set is empty")

        arc_idx = scenario.arc_index
        self.n_arcs = len(scenario.arcs)
        rows, cols = [], []
        for i, p in enumerate(self.paths):
            for a in p.arc_ids:
                rows.append(i)
                cols.append(arc_idx[a])
        data = np.ones(len(rows))
        self.incidence = sp.csr_matrix((data, (rows, cols)), shape=(n, self.n_arcs))

        # closed-form BPR pieces per arc
        arcs = scenario.arcs
        tau = scenario.value_of_time_eur_per_h
        self._free_flow = np.array([tau * a.length_km / a.speed_kmh for a in arcs])
        self._cap_counts = np.array([a.capacity_frac for a in arcs]) * scenario.fleet_size

        self.fare = np.array([scenario.hub_by_id[p.hub_id].pt_fare_eur for p in self.paths])
        self.energy = np.array([
            scenario.class_by_tag[p.class_tag].topup_kwh + p.length_km *
            scenario.class_by_tag[p.class_tag].consumption_per_km
            if p.class_tag != "g" else p.length_km * scenario.class_by_tag["g"].consumption_per_km
            for p in self.paths
        ])

        # hub bookkeeping: every at-hub charging path feeds that hub's need
        self.hub_ids = [h.id for h in scenario.hubs]
        hub_pos = {h: i for i, h in enumerate(self.hub_ids)}
        self.cso_positions = np.array([i for i, h in enumerate(scenario.hubs) if h.is_cso], dtype=int)
        self.charge_hub = np.full(n, -1, dtype=int)          # hub position if charging at hub
        self.variable_price = np.zeros(n, dtype=bool)        # True: price via hub LMP
        const_price = np.zeros(n)
        for i, p in enumerate(self.paths):
            cls = scenario.class_by_tag[p.class_tag]
            hub = scenario.hub_by_id[p.hub_id]
            if p.decision is ChargingDecision.AT_HUB:
                self.charge_hub[i] = hub_pos[p.hub_id]
                if hub.is_cso and (cso_prices is None or p.hub_id not in cso_prices):
                    self.variable_price[i] = True
                elif hub.is_cso:
                    const_price[i] = cso_prices[p.hub_id]
                else:
                    const_price[i] = scenario.city_hub_price_eur_per_kwh
            elif p.decision is ChargingDecision.LATER:
                const_price[i] = cls.offsite_price_eur
            else:
                const_price[i] = cls.offsite_price_eur
        self.const_price = const_price
        self.linear_cost = self.fare + self.energy * const_price  # zero price on LMP paths

        # need accumulation matrix: hubs x paths, entries = energy of charging paths
        chg = np.nonzero(self.charge_hub >= 0)[0]
        self.need_matrix = sp.csr_matrix(
            (self.energy[chg], (self.charge_hub[chg], chg)),
            shape=(len(self.hub_ids), n),
        )

        self.cases = [HubChargingCase.from_profile(np.asarray(h.nonflex_kwh), 0.0)
                      for h in scenario.hubs]

        # blocks: one simplex per (class, OD) with positive-demand classes kept too
        demand: dict[tuple[str, int, int], float] = {}
        for tag, o, d, cnt in scenario.od_demands:
            demand[(tag, o, d)] = demand.get((tag, o, d), 0.0) + cnt
        members: dict[tuple[str, int, int], list[int]] = {}
        for i, p in enumerate(self.paths):
            members.setdefault((p.class_tag, p.origin, p.destination), []).append(i)
        self.blocks = []
        for key, idxs in members.items():
            self.blocks.append((key, np.array(idxs, dtype=int), float(demand.get(key, 0.0))))
        missing = [k for k, v in demand.items() if v > 0 and k not in members]
        if missing:
            raise ValueError(f"demands without any enumerated path: {missing}")

    # --- elementary evaluations -------------------------------------------------
    def arc_flows(self, flows: np.ndarray) -> np.ndarray:
        return self.incidence.T.dot(flows)

    def arc_costs(self, arc_flows: np.ndarray) -> np.ndarray:
        return self._free_flow * (1.0 + 2.0 * (arc_flows / self._cap_counts) ** 4)

    def arc_integrals(self, arc_flows: np.ndarray) -> float:
        x = arc_flows
        return float(np.sum(self._free_flow * (x + 0.4 * x ** 5 / self._cap_counts ** 4)))

    def needs(self, flows: np.ndarray) -> np.ndarray:
        """Charging need (kWh) per hub, aligned with scenario.hubs."""
        return self.need_matrix.dot(flows)

    def hub_prices(self, alpha: float, needs: np.ndarray) -> np.ndarray:
        """LMP charging price per hub position at the given needs."""
        prices = np.zeros(len(self.cases))
        for i in self.cso_positions:
            prices[i] = self.cases[i].lmp_price(alpha, needs[i])
        return prices

    def path_costs(self, flows: np.ndarray, alpha: float) -> np.ndarray:
        arc_f = self.arc_flows(flows)
        congestion = self.incidence.dot(self.arc_costs(arc_f))
        costs = congestion + self.linear_cost
        if self.variable_price.any():
            needs = self.needs(flows)
            prices = self.hub_prices(alpha, needs)
            var = self.variable_price
            costs[var] += self.energy[var] * prices[self.charge_hub[var]]
        return costs

    def potential(self, flows: np.ndarray, alpha: float) -> float:
        """Convex potential whose stationary points are Wardrop equilibria."""
        value = self.arc_integrals(self.arc_flows(flows))
        value += float(np.dot(flows, self.linear_cost))
        if self.variable_price.any():
            needs = self.needs(flows)
            value += alpha * sum(self.cases[i].waterfill_value(needs[i])
                                 for i in self.cso_positions)
        return value


@dataclass(frozen=True, eq=False)
class FlowAssignment:
    """Per-(class, path) flows over a PathSystem, with cached aggregates."""

    system: PathSystem
    flows: np.ndarray

    def __post_init__(self):
        if self.flows.shape != (len(self.system.paths),):
            raise ValueError("flow vector does not match the path set")

    @property
    def arc_flows(self) -> np.ndarray:
        return self.system.arc_flows(self.flows)

    @property
    def needs_kwh(self) -> dict[int, float]:
        vec = self.system.needs(self.flows)
        return {h: float(vec[i]) for i, h in enumerate(self.system.hub_ids)}

    def check_feasible(self, tol: float = 1e-6):
        if np.any(self.flows < -tol):
            raise ValueError("negative path flow")
        for _key, idxs, dem in self.system.blocks:
            if abs(self.flows[idxs].sum() - dem) > tol * max(1.0, dem):
                raise ValueError(f"block {_key} flow does not meet its demand")


@dataclass(frozen=True, eq=False)
class EquilibriumResult:
    assignment: FlowAssignment
    potential_value: float
    gap: float
    needs_kwh: dict
    iterations: int
    alpha: float
    potential_trace: tuple = ()     # per-iteration potential when collected


def beckmann_value(assignment: FlowAssignment, alpha: float) -> float:
    assignment.check_feasible()
    return assignment.system.potential(assignment.flows, alpha)


def _gap_from_costs(system: PathSystem, flows: np.ndarray, costs: np.ndarray) -> float:
    worst = 0.0
    for _key, idxs, dem in system.blocks:
        if dem <= 0:
            continue
        block_costs = costs[idxs]
        used = flows[idxs] > 0
        if not used.any():
            continue
        worst = max(worst, float(block_costs[used].max() - block_costs.min()))
    return worst


def wardrop_gap(assignment: FlowAssignment, alpha: float) -> float:
    """Worst cost excess of a used path over its block minimum; 0 exactly at WE.

    Recomputed from the assignment alone so it certifies any candidate.
    """
    system = assignment.system
    costs = system.path_costs(assignment.flows, alpha)
    return _gap_from_costs(system, assignment.flows, costs)


def charging_needs(assignment: FlowAssignment) -> dict[int, float]:
    return assignment.needs_kwh


def _free_flow_cost_scale(system: PathSystem, alpha: float) -> float:
    zero = np.zeros(len(system.paths))
    return float(np.mean(system.path_costs(zero, alpha)))


def _line_search(derivative, lo: float, hi: float) -> float:
    """Minimise a convex 1-D function given its (nondecreasing) derivative."""
    if derivative(hi) <= 0:
        return hi
    if derivative(lo) >= 0:
        return lo
    return brentq(derivative, lo, hi, xtol=1e-14 * max(hi, 1.0), rtol=8.9e-16)


def _arc_cost_slope(system: PathSystem, arc_flows: np.ndarray) -> np.ndarray:
    """Derivative of the BPR cost with respect to arc flow (counts)."""
    return system._free_flow * 8.0 * arc_flows ** 3 / system._cap_counts ** 4


def _descent_direction(system: PathSystem, flows: np.ndarray, costs: np.ndarray,
                       alpha: float, threshold: float) -> np.ndarray | None:
    """Newton-scaled move of every block toward its cheapest path.

    For each non-cheapest path the flow reduction is the pairwise Newton step
    (cost excess over the swap curvature), capped at the current flow; the
    block's cheapest path absorbs the total.  Returns None once every block
    is balanced to within ``threshold``.
    """
    arc_f = system.arc_flows(flows)
    slope = _arc_cost_slope(system, arc_f)
    paths_slope = system.incidence.dot(slope)

    # curvature of the hub price term per path: energy^2 * dprice/dneed
    price_curv = np.zeros(len(flows))
    if system.variable_price.any():
        needs = system.needs(flows)
        lam_slope = np.zeros(len(system.cases))
        for i in system.cso_positions:
            lam_slope[i] = 2.0 * alpha / system.cases[i].active_slots(max(needs[i], 0.0))
        var = system.variable_price
        price_curv[var] = system.energy[var] ** 2 * lam_slope[system.charge_hub[var]]

    direction = np.zeros_like(flows)
    any_move = False
    for _key, idxs, dem in system.blocks:
        if dem <= 0:
            continue
        block_costs = costs[idxs]
        q_local = int(np.argmin(block_costs))
        q = int(idxs[q_local])
        excess = block_costs - block_costs[q_local]
        movable = (flows[idxs] > 0) & (excess > threshold)
        movable[q_local] = False
        if not movable.any():
            continue
        # swap curvature vs q: sum of d' over the symmetric difference of arcs
        row_q = np.zeros(system.n_arcs)
        row_q[system.incidence.getrow(q).indices] = 1.0
        shared = system.incidence.dot(slope * row_q)
        curv = paths_slope[idxs] + paths_slope[q] - 2.0 * shared[idxs]
        curv = curv + price_curv[idxs] + price_curv[q]
        step = np.where(movable, excess / np.maximum(curv, 1e-12), 0.0)
        step = np.minimum(step, flows[idxs])
        direction[idxs] -= step
        direction[q] += step.sum()
        any_move = True
    return direction if any_move else None


def _drop_dust(system: PathSystem, flows: np.ndarray, costs: np.ndarray,
               alpha: float | None = None, tol: float = 0.0) -> None:
    """Clear numerically-dead or tiny costlier-than-best flows onto the cheapest path.

    Line-searched updates shrink abandoned paths geometrically without ever
    reaching zero; any positive flow keeps counting in the equilibrium gap.
    Moving a tiny flow wholesale to the block's cheapest path is a guaranteed
    descent to first order; a potential guard protects the pathological case.
    """
    for _key, idxs, dem in system.blocks:
        if dem <= 0:
            continue
        block_costs = costs[idxs]
        q = idxs[int(np.argmin(block_costs))]
        f = flows[idxs]
        dust = (f > 0) & (f < 1e-11 * dem)
        if tol > 0:
            dust |= (f > 0) & (f <= 1e-6 * dem) & (block_costs > block_costs.min() + tol / 4.0)
        dust[idxs == q] = False
        if not dust.any():
            continue
        if alpha is not None and tol > 0:
            before = system.potential(flows, alpha)
            saved = flows.copy()
        moved = flows[idxs[dust]].sum()
        flows[idxs[dust]] = 0.0
        flows[q] += moved
        if alpha is not None and tol > 0:
            if system.potential(flows, alpha) > before + 1e-12 * max(1.0, abs(before)):
                flows[:] = saved


def _newton_step(system: PathSystem, flows: np.ndarray, costs: np.ndarray,
                 alpha: float) -> np.ndarray | None:
    """Equal-cost Newton direction on the active path set.

    Solves the KKT linearisation: active path costs move to a common level
    per block while block totals stay fixed.  Returns a full direction over
    all paths (zero on inactive ones), or None if the system is unusable.
    """
    active_mask = flows > 0
    for _key, idxs, dem in system.blocks:
        if dem > 0:
            active_mask[idxs[int(np.argmin(costs[idxs]))]] = True
    active = np.nonzero(active_mask)[0]
    if active.size == 0:
        return None

    sub = system.incidence[active]
    arc_f = system.arc_flows(flows)
    slope = _arc_cost_slope(system, arc_f)
    jac = (sub.multiply(slope)).dot(sub.T).toarray()
    if system.variable_price.any():
        needs = system.needs(flows)
        for i in system.cso_positions:
            members = np.nonzero(system.variable_price[active] &
                                 (system.charge_hub[active] == i))[0]
            if members.size:
                lam_slope = 2.0 * alpha / system.cases[i].active_slots(max(needs[i], 0.0))
                e = system.energy[active[members]]
                jac[np.ix_(members, members)] += lam_slope * np.outer(e, e)
    jac[np.diag_indices_from(jac)] += 1e-10 * max(1.0, jac.max())

    blocks_active = []
    for key, idxs, dem in system.blocks:
        if dem <= 0:
            continue
        local = np.nonzero(np.isin(active, idxs))[0]
        if local.size:
            blocks_active.append(local)
    n, m = active.size, len(blocks_active)
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = jac
    rhs = np.zeros(n + m)
    rhs[:n] = -costs[active]
    for b, local in enumerate(blocks_active):
        kkt[local, n + b] = -1.0
        kkt[n + b, local] = 1.0
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        return None
    direction = np.zeros_like(flows)
    direction[active] = sol[:n]
    return direction


def solve_wardrop(scenario: TransportScenario, alpha: float, tol: float | None = None,
                  start: np.ndarray | None = None, system: PathSystem | None = None,
                  max_iter: int = 400, collect_potentials: bool = False) -> EquilibriumResult:
    """Compute a certified Wardrop equilibrium for the given price magnitude.

    ``tol`` is an absolute gap in euros; by default 1e-6 times the mean
    free-flow path cost.  Raises WardropError (carrying the best iterate) if
    the iteration cap is hit before certification.
    """
    if system is None:
        system = PathSystem(scenario)
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    if tol is None:
        tol = 1e-6 * _free_flow_cost_scale(system, alpha)
    if tol <= 0:
        raise ValueError("tolerance must be positive")

    flows = np.zeros(len(system.paths))
    if start is not None:
        flows = np.array(start, dtype=float)
        FlowAssignment(system, flows).check_feasible()
    else:
        for _key, idxs, dem in system.blocks:
            if dem > 0:
                flows[idxs] = dem / len(idxs)

    scale = _free_flow_cost_scale(system, alpha)
    potentials: list[float] = []
    gap = np.inf
    iteration = 0
    for iteration in range(1, max_iter + 1):
        if collect_potentials:
            potentials.append(system.potential(flows, alpha))
        costs = system.path_costs(flows, alpha)
        gap = _gap_from_costs(system, flows, costs)
        if gap <= tol:
            break

        # endgame: equalise active-set costs with (repeated) Newton steps;
        # first try the full step projected back onto the block simplices,
        # else clip at the nonnegativity boundary and drop paths there
        if gap <= 0.1 * scale or iteration > 25:
            advanced = False
            for _inner in range(12):
                newton = _newton_step(system, flows, costs, alpha)
                if newton is None or np.abs(newton).max() == 0:
                    break
                base_potential = system.potential(flows, alpha)
                stepped = None
                projected = np.maximum(flows + newton, 0.0)
                for _key, idxs, dem in system.blocks:
                    if dem <= 0:
                        continue
                    deficit = dem - projected[idxs].sum()
                    if deficit > 0:
                        projected[idxs[int(np.argmin(costs[idxs]))]] += deficit
                    elif deficit < 0:
                        projected[idxs] *= dem / projected[idxs].sum()
                if system.potential(projected, alpha) <= base_potential + 1e-9 * max(scale, 1.0):
                    stepped = projected
                else:
                    shrink = newton < 0
                    with np.errstate(divide="ignore", invalid="ignore"):
                        ratios = np.where(shrink, -flows / np.minimum(newton, -1e-300), np.inf)
                    beta = min(1.0, float(ratios.min()))
                    if beta > 1e-12:
                        candidate = np.maximum(flows + beta * newton, 0.0)
                        if system.potential(candidate, alpha) <= base_potential + 1e-9 * max(scale, 1.0):
                            stepped = candidate
                if stepped is None:
                    break
                flows = stepped
                advanced = True
                costs = system.path_costs(flows, alpha)
                _drop_dust(system, flows, costs, alpha, tol)
                costs = system.path_costs(flows, alpha)
                if _gap_from_costs(system, flows, costs) <= tol:
                    break
            if advanced:
                continue

        direction = _descent_direction(system, flows, costs, alpha, threshold=tol / 8.0)
        if direction is None:
            break

        def dphi(gamma: float) -> float:
            c = system.path_costs(flows + gamma * direction, alpha)
            return float(np.dot(direction, c))

        gamma = _line_search(dphi, 0.0, 1.0)
        if gamma <= 0.0:
            break
        flows = flows + gamma * direction
        np.maximum(flows, 0.0, out=flows)
        _drop_dust(system, flows, system.path_costs(flows, alpha), alpha, tol)

    gap = wardrop_gap(FlowAssignment(system, flows), alpha)
    assignment = FlowAssignment(system, flows)
    result = EquilibriumResult(
        assignment=assignment,
        potential_value=system.potential(flows, alpha),
        gap=gap,
        needs_kwh=assignment.needs_kwh,
        iterations=iteration,
        alpha=alpha,
        potential_trace=tuple(potentials),
    )
    if gap > tol:
        raise WardropError(
            f"equilibrium gap {gap:.3e} above tolerance {tol:.3e} after {iteration} iterations",
            result,
        )
    return result


@dataclass(frozen=True, eq=False)
class UniquenessReport:
    """Spread of equilibrium aggregates across random restarts."""

    arc_flow_deviation: float
    need_deviation: float
    arc_flow_rel: float
    need_rel: float
    runs: int

    def max_relative(self) -> float:
        return max(self.arc_flow_rel, self.need_rel)


def uniqueness_probe(scenario: TransportScenario, alpha: float, n_starts: int,
                     seed: int = 0, tol: float | None = None,
                     system: PathSystem | None = None) -> UniquenessReport:
    """Solve from random Dirichlet starting flows and compare aggregates.

    Path flows may differ between runs; arc flows and hub needs should not.
    """
    if n_starts < 2:
        raise ValueError("need at least two starts to compare")
    if system is None:
        system = PathSystem(scenario)
    rng = np.random.default_rng(seed)
    arc_runs, need_runs = [], []
    for _run in range(n_starts):
        flows = np.zeros(len(system.paths))
        for _key, idxs, dem in system.blocks:
            if dem > 0:
                flows[idxs] = dem * rng.dirichlet(np.ones(len(idxs)))
        res = solve_wardrop(scenario, alpha, tol=tol, start=flows, system=system)
        arc_runs.append(res.assignment.arc_flows)
        need_runs.append(system.needs(res.assignment.flows))
    arcs = np.array(arc_runs)
    needs = np.array(need_runs)
    arc_dev = float(np.max(arcs.max(axis=0) - arcs.min(axis=0)))
    need_dev = float(np.max(needs.max(axis=0) - needs.min(axis=0)))
    arc_scale = max(1.0, float(np.max(arcs)))
    need_scale = max(1.0, float(np.max(needs)))
    return UniquenessReport(
        arc_flow_deviation=arc_dev,
        need_deviation=need_dev,
        arc_flow_rel=arc_dev / arc_scale,
        need_rel=need_dev / need_scale,
        runs=n_starts,
    )
