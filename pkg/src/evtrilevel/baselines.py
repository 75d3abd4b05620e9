"""Single-operator reference methods: grid-LMP pricing with P&C or smart charging.

The literature baseline merges both operators into one system operator that
prices hub charging at a multiple of the true grid marginal cost, obtained by
differentiating the power-flow proxy instead of the local scheduling proxy.
Two scheduling policies are compared: plug-and-charge (everything in the
first slot) and a grid-aware schedule minimising the summed grid proxy.

The pricing/assignment loop alternates between the commuter equilibrium under
fixed hub prices and a price update from the current charging needs.  It has
no convergence guarantee; non-convergence is a reported outcome.  City-owned
hubs keep their fixed price and plug-and-charge behaviour throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .charging import ChargingProfile, HubChargingCase, plug_and_charge
from .equilibrium import PathSystem, solve_wardrop
from .powerflow import GridCase, head_power, solve_power_flow
from .transport import TransportScenario

__all__ = [
    "BaselineConfig",
    "BaselineRun",
    "ScheduleResult",
    "plug_and_charge_profiles",
    "grid_aware_schedule",
    "true_lmp",
    "baseline_fixed_point",
]


@dataclass(frozen=True)
class BaselineConfig:
    alpha_tilde: float = 0.01         # marginal-grid-cost to price conversion
    damping: float = 0.5              # fixed-point damping factor in (0, 1]
    tol_kwh: float = 1.0              # fixed-point stop on max need change
    max_iters: int = 25
    fd_step_kwh: float = 1.0          # finite-difference step for the LMP
    richardson: bool = False          # halved-step extrapolation of the LMP
    sched_max_iters: int = 60
    sched_step_kwh: float = 0.5       # finite-difference step inside the scheduler
    equilibrium_tol: float | None = None

    def __post_init__(self):
        if self.alpha_tilde < 0:
            raise ValueError("alpha_tilde must be nonnegative")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")


def plug_and_charge_profiles(needs_kwh: Mapping[int, float],
                             nonflex_by_hub: Mapping[int, np.ndarray]) -> dict[int, ChargingProfile]:
    """Whole need in the first slot, per hub."""
    return {hub: plug_and_charge(nonflex_by_hub[hub], float(needs_kwh[hub]))
            for hub in nonflex_by_hub}


@dataclass(frozen=True, eq=False)
class ScheduleResult:
    profiles: dict                    # hub -> ChargingProfile
    objective: float                  # sum_t beta * G_t
    stationarity: float               # projected-gradient residual (kWh scale)
    stalled: bool


class _SlotCost:
    """beta * G_t evaluator with the no-EV head powers cached per slot."""

    def __init__(self, grid: GridCase, beta: float, sched_hubs: list,
                 fixed_profiles: Mapping[int, ChargingProfile]):
        self.grid = grid
        self.beta = beta
        self.hubs = sched_hubs
        self.fixed = fixed_profiles
        self.bus_of = {h: grid.bus_index[grid.hub_buses[h]] for h in grid.hub_buses}
        self.n_slots = grid.n_slots
        self.base: list[np.ndarray] = []
        self.s0 = np.zeros(self.n_slots)
        for t in range(self.n_slots):
            loads = grid.base_loads_pu(t).copy()
            for hub, prof in fixed_profiles.items():
                loads[self.bus_of[hub]] += prof.nonflex_kwh[t] / grid.s_base_kva
            self.base.append(loads)

    def prepare(self, nonflex_by_hub: Mapping[int, np.ndarray]) -> None:
        for t in range(self.n_slots):
            for hub in self.hubs:
                self.base[t][self.bus_of[hub]] += nonflex_by_hub[hub][t] / self.grid.s_base_kva
            self.s0[t] = solve_power_flow(self.grid, self.base[t]).head_pu

    def slot_cost(self, t: int, charging_kwh: np.ndarray,
                  fixed_charging: Mapping[int, float]) -> float:
        loads = self.base[t].copy()
        for i, hub in enumerate(self.hubs):
            loads[self.bus_of[hub]] += max(charging_kwh[i], 0.0) / self.grid.s_base_kva
        for hub, kwh in fixed_charging.items():
            loads[self.bus_of[hub]] += max(kwh, 0.0) / self.grid.s_base_kva
        s = head_power(self.grid, loads, anchor_pu=self.base[t])
        return self.beta * (s ** 2 - self.s0[t] ** 2)


def _project_simplex(v: np.ndarray, total: float) -> np.ndarray:
    """Euclidean projection onto {x >= 0, sum x = total}."""
    if total <= 0:
        return np.zeros_like(v)
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, v.size + 1)
    cond = u - (css - total) / k > 0
    rho = int(np.nonzero(cond)[0].max())
    theta = (css[rho] - total) / (rho + 1)
    out = np.maximum(v - theta, 0.0)
    s = out.sum()
    return out * (total / s) if s > 0 else out


def grid_aware_schedule(needs_kwh: Mapping[int, float], grid: GridCase, beta: float,
                        nonflex_by_hub: Mapping[int, np.ndarray],
                        config: BaselineConfig = BaselineConfig(),
                        sched_hub_ids: list | None = None,
                        city_profiles: Mapping[int, ChargingProfile] | None = None,
                        start: Mapping[int, np.ndarray] | None = None) -> ScheduleResult:
    """Charging profiles minimising the summed grid proxy, by projected gradient.

    Hubs in ``sched_hub_ids`` are optimised jointly (per-hub simplex
    constraints); other hubs' profiles stay fixed (plug-and-charge city hubs
    enter via ``city_profiles``).  Starts from plug-and-charge, water-filling
    and uniform profiles (plus ``start`` when given) and keeps the best, so
    the result never loses to either reference schedule.
    """
    hubs = list(sched_hub_ids) if sched_hub_ids is not None else sorted(nonflex_by_hub)
    city_profiles = dict(city_profiles or {})
    needs = np.array([float(needs_kwh[h]) for h in hubs])
    nonflex = {h: np.asarray(nonflex_by_hub[h], dtype=float) for h in hubs}
    n_slots = grid.n_slots

    evaluator = _SlotCost(grid, beta, hubs, city_profiles)
    evaluator.prepare(nonflex)
    fixed_charging = [
        {h: float(p.charging_kwh[t]) for h, p in city_profiles.items()}
        for t in range(n_slots)
    ]

    def objective(x: np.ndarray) -> float:
        return sum(evaluator.slot_cost(t, x[:, t], fixed_charging[t]) for t in range(n_slots))

    def gradient(x: np.ndarray) -> np.ndarray:
        g = np.zeros_like(x)
        h_fd = config.sched_step_kwh
        for t in range(n_slots):
            for i in range(len(hubs)):
                up = x[:, t].copy()
                up[i] += h_fd
                down = x[:, t].copy()
                down[i] -= h_fd
                if down[i] >= 0:
                    g[i, t] = (evaluator.slot_cost(t, up, fixed_charging[t])
                               - evaluator.slot_cost(t, down, fixed_charging[t])) / (2 * h_fd)
                else:
                    g[i, t] = (evaluator.slot_cost(t, up, fixed_charging[t])
                               - evaluator.slot_cost(t, x[:, t], fixed_charging[t])) / h_fd
        return g

    starts = []
    pnc = np.zeros((len(hubs), n_slots))
    pnc[:, 0] = needs
    starts.append(pnc)
    wf = np.zeros_like(pnc)
    for i, h in enumerate(hubs):
        case = HubChargingCase.from_profile(nonflex[h], needs[i])
        wf[i] = case.waterfill_profile().charging_kwh
    starts.append(wf)
    starts.append(np.tile(needs[:, None] / n_slots, (1, n_slots)))
    if start is not None:
        starts.append(np.array([np.asarray(start[h], dtype=float) for h in hubs]))

    best_x, best_obj = None, np.inf
    for x0 in starts:
        val = objective(x0)
        if val < best_obj:
            best_x, best_obj = x0.copy(), val

    x = best_x
    obj = best_obj
    step = max(needs.max(), 1.0)
    grad = gradient(x)
    for _it in range(config.sched_max_iters):
        scale = max(np.abs(grad).max(), 1e-12)
        moved = False
        while step > 1e-6 * max(needs.max(), 1.0):
            cand = np.vstack([
                _project_simplex(x[i] - (step / scale) * grad[i], needs[i])
                for i in range(len(hubs))
            ])
            cand_obj = objective(cand)
            if cand_obj < obj - 1e-15:
                x, obj = cand, cand_obj
                moved = True
                step *= 1.3
                break
            step *= 0.5
        if not moved:
            break
        grad = gradient(x)

    residual = float(np.abs(np.vstack([
        _project_simplex(x[i] - grad[i], needs[i]) for i in range(len(hubs))
    ]) - x).max())
    stalled = residual > 1e-3 * max(1.0, float(needs.max()))
    profiles = {h: ChargingProfile(x[i].copy(), nonflex[h]) for i, h in enumerate(hubs)}
    profiles.update(city_profiles)
    return ScheduleResult(profiles, obj, residual, stalled)


def _grid_objective(needs_kwh: Mapping[int, float], grid: GridCase, beta: float,
                    mode: str, nonflex_by_hub, config: BaselineConfig,
                    sched_hub_ids, city_profiles,
                    start=None) -> tuple[float, ScheduleResult | None]:
    if mode == "pc":
        hubs = list(sched_hub_ids)
        evaluator = _SlotCost(grid, beta, hubs, city_profiles or {})
        evaluator.prepare({h: np.asarray(nonflex_by_hub[h], dtype=float) for h in hubs})
        fixed = [
            {h: float(p.charging_kwh[t]) for h, p in (city_profiles or {}).items()}
            for t in range(grid.n_slots)
        ]
        x = np.zeros((len(hubs), grid.n_slots))
        x[:, 0] = [float(needs_kwh[h]) for h in hubs]
        value = sum(evaluator.slot_cost(t, x[:, t], fixed[t]) for t in range(grid.n_slots))
        return value, None
    if mode == "sc":
        sched = grid_aware_schedule(needs_kwh, grid, beta, nonflex_by_hub, config,
                                    sched_hub_ids=sched_hub_ids,
                                    city_profiles=city_profiles, start=start)
        return sched.objective, sched
    raise ValueError(f"unknown scheduling mode {mode!r}")


def true_lmp(needs_kwh: Mapping[int, float], grid: GridCase, mode: str,
             config: BaselineConfig, beta: float, nonflex_by_hub,
             sched_hub_ids, city_profiles=None) -> dict[int, float]:
    """Per-hub price: alpha_tilde times the grid-cost derivative d(beta*sum G_t)/dL_i.

    Central finite differences with step ``fd_step_kwh`` (one-sided at L=0),
    re-running the scheduling mode at each perturbed need; optional
    Richardson extrapolation with the halved step.
    """
    base = dict(needs_kwh)
    g_base, sched_base = _grid_objective(base, grid, beta, mode, nonflex_by_hub, config,
                                         sched_hub_ids, city_profiles)
    warm = None
    if sched_base is not None:
        warm = {h: sched_base.profiles[h].charging_kwh for h in sched_hub_ids}

    def perturbed_start(hub: int, need: float):
        if warm is None:
            return None
        start = {h: v.copy() for h, v in warm.items()}
        old = base[hub]
        if old > 0:
            start[hub] = start[hub] * (need / old)
        else:
            fresh = np.zeros_like(start[hub])
            fresh[0] = need
            start[hub] = fresh
        return start

    def objective_at(hub: int, need: float) -> float:
        shifted = dict(base)
        shifted[hub] = need
        value, _ = _grid_objective(shifted, grid, beta, mode, nonflex_by_hub, config,
                                   sched_hub_ids, city_profiles,
                                   start=perturbed_start(hub, need))
        return value

    def derivative(hub: int, h: float) -> float:
        g_up = objective_at(hub, base[hub] + h)
        if base[hub] >= h:
            return (g_up - objective_at(hub, base[hub] - h)) / (2 * h)
        return (g_up - g_base) / h

    prices = {}
    for hub in sched_hub_ids:
        d = derivative(hub, config.fd_step_kwh)
        if config.richardson:
            d_half = derivative(hub, config.fd_step_kwh / 2.0)
            d = (4.0 * d_half - d) / 3.0
        # marginal grid cost of added load is physically nonnegative on a
        # resistive radial feeder; clip finite-difference noise
        prices[hub] = config.alpha_tilde * max(d, 0.0)
    return prices


@dataclass(frozen=True, eq=False)
class BaselineRun:
    mode: str
    needs_trajectory: tuple        # per iterate: dict hub -> kWh
    price_trajectory: tuple        # per iterate: dict hub -> EUR/kWh
    converged: bool
    iterations: int
    grid_cost: float               # beta * sum_t G_t at the final needs
    revenue: float                 # sum of price * need over priced hubs
    profiles: dict                 # final hub -> ChargingProfile


def baseline_fixed_point(scenario: TransportScenario, grid: GridCase, mode: str,
                         config: BaselineConfig, beta: float,
                         system_paths=None) -> BaselineRun:
    """Alternate equilibrium needs and grid-LMP prices until the needs settle.

    Starts from zero prices at the operator's hubs.  The damped update
    L <- (1-theta) L + theta L_WE(prices(L)) keeps the paper's scheme at
    theta = 1.  Non-convergence within the cap is reported, not raised.
    """
    base_system = PathSystem(scenario) if system_paths is None else system_paths
    path_set = base_system.path_set
    cso_ids = list(scenario.cso_hub_ids)
    nonflex = {h.id: np.asarray(h.nonflex_kwh, dtype=float) for h in scenario.hubs}
    city_ids = [h.id for h in scenario.hubs if not h.is_cso]

    def equilibrium_needs(prices: Mapping[int, float]) -> dict[int, float]:
        system = PathSystem(scenario, path_set, cso_prices=dict(prices))
        res = solve_wardrop(scenario, 0.0, tol=config.equilibrium_tol, system=system)
        return res.needs_kwh

    def city_pnc(needs: Mapping[int, float]) -> dict[int, ChargingProfile]:
        return {h: plug_and_charge(nonflex[h], float(needs[h])) for h in city_ids}

    prices = {h: 0.0 for h in cso_ids}
    needs = equilibrium_needs(prices)
    needs_traj = [needs]
    price_traj = [dict(prices)]
    converged = False
    iterations = 0
    warm = None
    for iterations in range(1, config.max_iters + 1):
        prices = true_lmp(needs, grid, mode, config, beta, nonflex,
                          sched_hub_ids=cso_ids, city_profiles=city_pnc(needs))
        price_traj.append(dict(prices))
        we_needs = equilibrium_needs(prices)
        new_needs = {
            h: (1.0 - config.damping) * needs[h] + config.damping * we_needs[h]
            for h in needs
        }
        delta = max(abs(new_needs[h] - needs[h]) for h in needs)
        needs = new_needs
        needs_traj.append(needs)
        if delta <= config.tol_kwh:
            converged = True
            break

    final_cost, sched = _grid_objective(needs, grid, beta, mode, nonflex, config,
                                        sched_hub_ids=cso_ids,
                                        city_profiles=city_pnc(needs))
    if sched is not None:
        profiles = dict(sched.profiles)
    else:
        profiles = plug_and_charge_profiles({h: needs[h] for h in cso_ids},
                                            {h: nonflex[h] for h in cso_ids})
        profiles.update(city_pnc(needs))
    revenue = float(sum(prices[h] * needs[h] for h in cso_ids))
    return BaselineRun(mode, tuple(needs_traj), tuple(price_traj), converged,
                       iterations, final_cost, revenue, profiles)
