"""Hub charging: water-filling scheduler, its value function and the LMP price.

A hub aggregates the daily charging need ``L`` (kWh) of all EVs parked there
and spreads it over ``T`` working-hour slots so that the squared total load
(charging + nonflexible consumption) is minimal:

    minimize sum_t (l_t + l0_t)^2   s.t.  sum_t l_t = L,  l_t >= 0.

With the nonflexible profile sorted increasingly, the optimum fills the
cheapest slots up to a common water level.  Both the optimal profile and the
optimal value have closed forms driven by the breakpoints

    D_t = t * l0_t - cumsum(l0)_t        (D_1 = 0 <= D_2 <= ... <= D_T),

and the number of active slots t0 is the index with D_t0 < L <= D_{t0+1}
(D_{T+1} = +inf).  The hub charging price is proportional to the marginal
value, which makes it a continuous, increasing congestion price in L.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "HubChargingCase",
    "ChargingProfile",
    "active_slots",
    "waterfill_profile",
    "waterfill_value",
    "lmp_price",
    "plug_and_charge",
    "qp_oracle",
]


@dataclass(frozen=True, eq=False)
class ChargingProfile:
    """Per-slot charging energy and resulting total load, in original slot order."""

    charging_kwh: np.ndarray   # l*_t >= 0, sums to the case's need
    nonflex_kwh: np.ndarray    # l0_t, as supplied (unsorted)

    @property
    def total_kwh(self) -> np.ndarray:
        return self.charging_kwh + self.nonflex_kwh

    @property
    def need_kwh(self) -> float:
        return float(self.charging_kwh.sum())


@dataclass(frozen=True, eq=False)
class HubChargingCase:
    """One hub's scheduling problem: nonflexible profile plus aggregated need.

    Profiles are accepted in natural slot order; sorting (stable, so ties keep
    their slot order) happens internally and outputs are un-sorted back.
    """

    nonflex_kwh: np.ndarray            # original order, >= 0
    need_kwh: float                    # L >= 0
    _order: np.ndarray = field(repr=False, default=None)           # argsort of nonflex
    _sorted: np.ndarray = field(repr=False, default=None)          # nonflex, ascending
    _cumsum: np.ndarray = field(repr=False, default=None)          # L0_t
    _breakpoints: np.ndarray = field(repr=False, default=None)     # D_1..D_T

    @classmethod
    def from_profile(cls, nonflex_kwh, need_kwh: float) -> "HubChargingCase":
        nonflex = np.asarray(nonflex_kwh, dtype=float)
        if nonflex.ndim != 1 or nonflex.size == 0:
            raise ValueError("nonflexible profile must be a nonempty 1-D array")
        if np.any(nonflex < 0):
            raise ValueError("nonflexible loads must be nonnegative")
        if need_kwh < 0:
            raise ValueError(f"charging need must be nonnegative, got {need_kwh}")
        order = np.argsort(nonflex, kind="stable")
        srt = nonflex[order]
        cum = np.cumsum(srt)
        t = np.arange(1, srt.size + 1)
        breakpoints = t * srt - cum
        return cls(nonflex, float(need_kwh), order, srt, cum, breakpoints)

    def with_need(self, need_kwh: float) -> "HubChargingCase":
        """Same profile, different aggregated need (breakpoints are reused)."""
        if need_kwh < 0:
            raise ValueError(f"charging need must be nonnegative, got {need_kwh}")
        return HubChargingCase(self.nonflex_kwh, float(need_kwh), self._order,
                               self._sorted, self._cumsum, self._breakpoints)

    @property
    def n_slots(self) -> int:
        return self.nonflex_kwh.size

    @property
    def breakpoints(self) -> np.ndarray:
        """D_1..D_T (ascending, D_1 = 0); D_{T+1} is implicitly +inf."""
        return self._breakpoints

    def active_slots(self, need_kwh: float | None = None) -> int:
        """Number t0 of slots that receive charge: D_t0 < L <= D_{t0+1}.

        L exactly on a breakpoint belongs to the lower interval; L = 0 gives 1.
        """
        load = self.need_kwh if need_kwh is None else float(need_kwh)
        t0 = int(np.searchsorted(self._breakpoints, load, side="left"))
        return max(t0, 1)

    def water_level(self, need_kwh: float | None = None) -> float:
        """Common total load (L + cumsum_{t0}) / t0 on the active slots."""
        load = self.need_kwh if need_kwh is None else float(need_kwh)
        t0 = self.active_slots(load)
        return (load + self._cumsum[t0 - 1]) / t0

    def waterfill_profile(self) -> ChargingProfile:
        """Optimal charging per slot, returned in the original slot order."""
        t0 = self.active_slots()
        level = self.water_level()
        charge_sorted = np.zeros(self.n_slots)
        charge_sorted[:t0] = level - self._sorted[:t0]
        # guard against -0.0 / roundoff a few ulp below zero
        np.maximum(charge_sorted, 0.0, out=charge_sorted)
        charging = np.empty(self.n_slots)
        charging[self._order] = charge_sorted
        return ChargingProfile(charging, self.nonflex_kwh)

    def waterfill_value(self, need_kwh: float | None = None) -> float:
        """Optimal sum of squared total loads: (L + cum_t0)^2/t0 + tail squares."""
        load = self.need_kwh if need_kwh is None else float(need_kwh)
        t0 = self.active_slots(load)
        head = (load + self._cumsum[t0 - 1]) ** 2 / t0
        tail = float(np.dot(self._sorted[t0:], self._sorted[t0:]))
        return head + tail

    def lmp_price(self, alpha: float, need_kwh: float | None = None) -> float:
        """Charging unit price: alpha times the marginal scheduling value.

        price = 2 * alpha * (L + cum_t0) / t0, continuous and nondecreasing
        in L for alpha >= 0.
        """
        if alpha < 0:
            raise ValueError(f"price magnitude alpha must be nonnegative, got {alpha}")
        return 2.0 * alpha * self.water_level(need_kwh)


def active_slots(case: HubChargingCase) -> int:
    return case.active_slots()


def waterfill_profile(case: HubChargingCase) -> ChargingProfile:
    return case.waterfill_profile()


def waterfill_value(case: HubChargingCase) -> float:
    return case.waterfill_value()


def lmp_price(case: HubChargingCase, alpha: float) -> float:
    return case.lmp_price(alpha)


def plug_and_charge(nonflex_kwh, need_kwh: float) -> ChargingProfile:
    """Uncontrolled charging: the whole need drawn in the first slot."""
    nonflex = np.asarray(nonflex_kwh, dtype=float)
    if need_kwh < 0:
        raise ValueError(f"charging need must be nonnegative, got {need_kwh}")
    charging = np.zeros_like(nonflex)
    charging[0] = need_kwh
    return ChargingProfile(charging, nonflex)


def qp_oracle(nonflex_kwh, need_kwh: float) -> tuple[np.ndarray, float]:
    """Solve the scheduling QP by simplex projection; test oracle only.

    min sum (l + l0)^2 over {l >= 0, sum l = L} is the Euclidean projection of
    -l0 onto the simplex of radius L, computed with the sorting/thresholding
    rule: l_t = max(-l0_t - theta, 0) with theta chosen so the sum is L.
    Independent of the closed-form water-filling path.
    """
    nonflex = np.asarray(nonflex_kwh, dtype=float)
    if need_kwh < 0 or np.any(nonflex < 0):
        raise ValueError("need and nonflexible loads must be nonnegative")
    v = -nonflex
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, v.size + 1)
    candidates = (css - need_kwh) / k
    rho = int(np.max(np.nonzero(u - candidates > -1e-15)[0])) if need_kwh > 0 else 0
    theta = candidates[rho] if need_kwh > 0 else float(np.max(v))
    profile = np.maximum(v - theta, 0.0)
    # exact feasibility: rescale the active set for the last few ulp
    s = profile.sum()
    if s > 0:
        profile *= need_kwh / s
    value = float(np.sum((profile + nonflex) ** 2))
    return profile, value
