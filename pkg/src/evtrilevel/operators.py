"""Economic layer: supply-contract billing and the two operators' payoffs.

The network operator sells energy to the charging operator under a two-block
tariff built around a power threshold P: energy below the threshold costs
mu(P) = q*P per unit, energy above costs mu_bar(P) = q_bar*P.  Only the
charging share of a hub's total load is billed, pro rata.

Billing operates in whatever unit the caller supplies.  The solver pipeline
bills slot energies in kWh against thresholds in kW, with tariff slopes
expressed per kW of threshold; the headline figures q = 0.1, q_bar = 0.3 are
per MW, so the pipeline passes q/1000 per kW (see TrilevelProblem.terms).
At a 2 MW threshold the below-threshold price is then 0.2 EUR/kWh, on the
same scale as the charging prices, which is the only dimensional reading
under which the operators' documented behaviour is reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .charging import ChargingProfile, HubChargingCase, plug_and_charge
from .powerflow import GridCase, grid_cost

__all__ = [
    "ContractTerms",
    "PayoffBreakdown",
    "supply_cost_slot",
    "charging_supply_cost",
    "cso_payoff",
    "eno_payoff",
]

DEFAULT_BILLING_UNIT_KWH = 1.0


@dataclass(frozen=True)
class ContractTerms:
    """Supply-contract parameters: threshold P and tariff slopes q < q_bar."""

    threshold: float
    q: float
    q_bar: float
    threshold_cap: float = math.inf

    def __post_init__(self):
        if not 0.0 <= self.threshold <= self.threshold_cap:
            raise ValueError(f"threshold {self.threshold} outside [0, {self.threshold_cap}]")
        if not self.q_bar > self.q > 0:
            raise ValueError("tariff slopes need q_bar > q > 0")

    @property
    def mu(self) -> float:
        """Below-threshold unit price."""
        return self.q * self.threshold

    @property
    def mu_bar(self) -> float:
        """Above-threshold unit price."""
        return self.q_bar * self.threshold


def supply_cost_slot(total_load: float, terms: ContractTerms) -> float:
    """Energy bill of one slot's total load under the two-block tariff."""
    if total_load < 0:
        raise ValueError(f"slot load must be nonnegative, got {total_load}")
    below = min(total_load, terms.threshold)
    above = max(0.0, total_load - terms.threshold)
    return terms.mu * below + terms.mu_bar * above


def charging_supply_cost(profile: ChargingProfile, terms: ContractTerms) -> np.ndarray:
    """Per-slot supply cost attributed to charging, pro rata on the total load.

    Slots with zero total load cost nothing (they carry no charging either).
    The profile must be expressed in the tariff's unit.
    """
    total = profile.total_kwh
    costs = np.zeros_like(total)
    for t, tot in enumerate(total):
        if tot > 0:
            share = profile.charging_kwh[t] / tot
            costs[t] = share * supply_cost_slot(float(tot), terms)
    return costs


@dataclass(frozen=True, eq=False)
class PayoffBreakdown:
    """All money flows of one (alpha, P) evaluation."""

    revenue_by_hub: dict            # hub -> charging revenue (CSO hubs)
    supply_by_hub: dict             # hub -> per-slot supply cost vector
    pi_mid: float                   # CSO payoff: revenues - supply costs
    grid_term: float                # beta * sum_t G_t
    pi_up: float                    # ENO payoff: supply costs - grid term

    @property
    def total_revenue(self) -> float:
        return float(sum(self.revenue_by_hub.values()))

    @property
    def total_supply(self) -> float:
        return float(sum(v.sum() for v in self.supply_by_hub.values()))


def _billed_profile(profile: ChargingProfile, unit: float) -> ChargingProfile:
    return ChargingProfile(profile.charging_kwh / unit, profile.nonflex_kwh / unit)


def cso_payoff(alpha: float, terms: ContractTerms, needs_kwh: Mapping[int, float],
               cases: Mapping[int, HubChargingCase],
               billing_unit_kwh: float = DEFAULT_BILLING_UNIT_KWH) -> tuple[float, PayoffBreakdown]:
    """Charging-operator payoff at its hubs: LMP revenue minus supply costs.

    ``cases`` holds the CSO hubs' scheduling cases; needs are in kWh and the
    supply bill is computed on the profile rescaled to the tariff unit.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    revenue, supply = {}, {}
    for hub, case in cases.items():
        need = float(needs_kwh[hub])
        case_n = case.with_need(need)
        price = case_n.lmp_price(alpha)
        revenue[hub] = need * price
        profile = case_n.waterfill_profile()
        supply[hub] = charging_supply_cost(_billed_profile(profile, billing_unit_kwh), terms)
    pi_mid = float(sum(revenue.values()) - sum(v.sum() for v in supply.values()))
    return pi_mid, PayoffBreakdown(revenue, supply, pi_mid, 0.0, float("nan"))


def eno_payoff(terms: ContractTerms, needs_kwh: Mapping[int, float],
               cases: Mapping[int, HubChargingCase], cso_hub_ids: Iterable[int],
               grid: GridCase, beta: float,
               billing_unit_kwh: float = DEFAULT_BILLING_UNIT_KWH) -> tuple[float, PayoffBreakdown]:
    """Network-operator payoff: contract receipts minus grid-cost proxy.

    ``cases`` covers every hub.  CSO hubs schedule by water-filling; other
    hubs plug-and-charge, contributing to the grid term but never to the
    contract receipts.
    """
    cso_ids = set(cso_hub_ids)
    profiles: dict[int, ChargingProfile] = {}
    for hub, case in cases.items():
        need = float(needs_kwh[hub])
        if hub in cso_ids:
            profiles[hub] = case.with_need(need).waterfill_profile()
        else:
            profiles[hub] = plug_and_charge(case.nonflex_kwh, need)

    supply = {
        hub: charging_supply_cost(_billed_profile(profiles[hub], billing_unit_kwh), terms)
        for hub in sorted(cso_ids)
    }
    n_slots = next(iter(profiles.values())).charging_kwh.size
    grid_sum = 0.0
    for t in range(n_slots):
        ev = {hub: float(p.charging_kwh[t]) for hub, p in profiles.items()}
        nonflex = {hub: float(p.nonflex_kwh[t]) for hub, p in profiles.items()}
        grid_sum += grid_cost(grid, ev, nonflex, t)
    grid_term = beta * grid_sum
    pi_up = float(sum(v.sum() for v in supply.values()) - grid_term)
    return pi_up, PayoffBreakdown({}, supply, float("nan"), grid_term, pi_up)
