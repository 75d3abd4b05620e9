"""Iterative bounding solver for the operator-pricing trilevel problem.

The commuter equilibrium is an implicit function of the charging-price
magnitude alpha only, so the upper two levels reduce to a bilevel program in
(P, alpha): maximise the network operator's payoff subject to the charging
operator being eps-optimal.  The driver alternates

  (i)  a constrained global search for (P, alpha) by simulated annealing,
       where candidate alphas are drawn around the best stored response and
       must keep the charging operator within eps/3 of every stored bound;
  (ii) a fresh scalar best response for the charging operator at the chosen
       threshold (multi-window bounded Brent), which tightens the bounds;

until the incumbent (P, alpha) is eps-optimal for the charging operator.
Each payoff evaluation triggers (cached, warm-started) equilibrium solves.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .charging import HubChargingCase
from .equilibrium import EquilibriumResult, PathSystem, WardropError, solve_wardrop
from .operators import (
    DEFAULT_BILLING_UNIT_KWH,
    ContractTerms,
    cso_payoff,
    eno_payoff,
)
from .powerflow import GridCase
from .transport import TransportScenario

__all__ = [
    "TrilevelConfig",
    "TrilevelSolution",
    "TrilevelProblem",
    "TraceRow",
    "AnnealingError",
    "TrilevelError",
    "cso_best_response",
    "annealing_search",
    "acceptance_probability",
    "trilevel_solve",
    "solve_bilevel",
]

log = logging.getLogger(__name__)


class AnnealingError(RuntimeError):
    pass


class TrilevelError(RuntimeError):
    """Outer iteration cap exceeded; carries the trace collected so far."""

    def __init__(self, message: str, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class TrilevelConfig:
    alpha_max: float = 1e-3          # price-magnitude bound (EUR/kW^2)
    p_max: float = 4.0               # contract threshold bound, billing units (MW)
    eps_mid: float | None = None     # None: 1e-3 * |initial best-response payoff|
    n_restarts: int = 15             # consecutive rejections that stop the annealer
    spread: float = 2.5e-6           # std of alpha proposals
    cooling_base: float = 0.99       # K(n) = cooling_base ** n
    brent_windows: int = 8
    brent_xtol: float | None = None  # None: alpha_max * 1e-5
    max_outer: int = 50
    max_candidates: int = 5000
    redraw_cap: int = 10000
    seed: int = 0
    equilibrium_tol: float | None = None

    def __post_init__(self):
        if self.alpha_max <= 0 or self.p_max <= 0:
            raise ValueError("bounds must be positive")
        if self.n_restarts < 1 or self.spread <= 0:
            raise ValueError("annealing needs n_restarts >= 1 and spread > 0")
        if not 0.0 < self.cooling_base < 1.0:
            raise ValueError("cooling base must lie in (0, 1)")
        if self.eps_mid is not None and self.eps_mid <= 0:
            raise ValueError("eps_mid must be positive")


@dataclass(frozen=True)
class TraceRow:
    outer_iter: int
    phase: str                  # "anneal" or "brent"
    p: float
    alpha: float
    pi_mid: float
    pi_up: float
    accepted: bool
    feasible: bool


@dataclass(frozen=True, eq=False)
class TrilevelSolution:
    p_star: float
    alpha_star: float
    pi_up: float
    pi_mid: float
    pi_mid_bound: float          # best response value at p_star
    eps_mid: float
    needs_kwh: dict
    outer_iterations: int
    alpha_bars: tuple
    trace: tuple
    equilibrium: EquilibriumResult | None = None

    @property
    def margin(self) -> float:
        """Certified optimality slack: eps_mid - (bound - achieved) >= 0."""
        return self.eps_mid - (self.pi_mid_bound - self.pi_mid)


class TrilevelProblem:
    """Payoff oracle binding transport scenario, feeder and tariff structure.

    Equilibria depend on alpha only; they are cached per alpha and warm
    started from the nearest solved alpha.  The grid term of the upper payoff
    also depends on alpha alone and is cached alongside.
    """

    def __init__(self, scenario: TransportScenario, grid: GridCase, q: float = 0.1,
                 q_bar: float = 0.3, beta: float = 1e-3,
                 billing_unit_kwh: float = DEFAULT_BILLING_UNIT_KWH,
                 system: PathSystem | None = None, equilibrium_tol: float | None = None,
                 p_max: float = 4.0):
        self.scenario = scenario
        self.grid = grid
        self.q, self.q_bar, self.beta = q, q_bar, beta
        self.billing_unit_kwh = billing_unit_kwh
        self.p_max = p_max
        self.system = system if system is not None else PathSystem(scenario)
        self.equilibrium_tol = equilibrium_tol
        self.cases: dict[int, HubChargingCase] = {
            h.id: HubChargingCase.from_profile(np.asarray(h.nonflex_kwh), 0.0)
            for h in scenario.hubs
        }
        self.cso_ids = list(scenario.cso_hub_ids)
        self._equilibria: dict[float, EquilibriumResult] = {}
        self._grid_terms: dict[float, float] = {}

    def terms(self, p: float) -> ContractTerms:
        """Contract at threshold p (MW), billed per kWh.

        The headline slopes q, q_bar are per MW of threshold; billing runs in
        kWh against the threshold in kW, so the slopes convert to per-kW and
        mu(p) = q * p_MW lands in EUR/kWh.
        """
        return ContractTerms(p * 1000.0, self.q / 1000.0, self.q_bar / 1000.0,
                             threshold_cap=self.p_max * 1000.0)

    def equilibrium(self, alpha: float) -> EquilibriumResult:
        key = float(alpha)
        hit = self._equilibria.get(key)
        if hit is not None:
            return hit
        start = None
        if self._equilibria:
            nearest = min(self._equilibria, key=lambda a: abs(a - key))
            start = self._equilibria[nearest].assignment.flows
        result = solve_wardrop(self.scenario, key, tol=self.equilibrium_tol,
                               start=start, system=self.system)
        self._equilibria[key] = result
        return result

    def needs(self, alpha: float) -> dict[int, float]:
        return self.equilibrium(alpha).needs_kwh

    def pi_mid(self, alpha: float, p: float) -> float:
        needs = self.needs(alpha)
        cso_cases = {h: self.cases[h] for h in self.cso_ids}
        value, _ = cso_payoff(alpha, self.terms(p), needs, cso_cases,
                              billing_unit_kwh=self.billing_unit_kwh)
        return value

    def grid_term(self, alpha: float) -> float:
        """beta times the summed grid proxy; depends on alpha only (cached)."""
        key = float(alpha)
        if key not in self._grid_terms:
            _, breakdown = eno_payoff(self.terms(self.p_max), self.needs(alpha),
                                      self.cases, self.cso_ids, self.grid, self.beta,
                                      billing_unit_kwh=self.billing_unit_kwh)
            self._grid_terms[key] = breakdown.grid_term
        return self._grid_terms[key]

    def supply_total(self, alpha: float, p: float) -> float:
        """Summed contract receipts from the charging operator's hubs."""
        needs = self.needs(alpha)
        cso_cases = {h: self.cases[h] for h in self.cso_ids}
        _, breakdown = cso_payoff(alpha, self.terms(p), needs, cso_cases,
                                  billing_unit_kwh=self.billing_unit_kwh)
        return breakdown.total_supply

    def pi_up(self, alpha: float, p: float) -> float:
        return self.supply_total(alpha, p) - self.grid_term(alpha)


def _safe(fn: Callable[[float, float], float], alpha: float, p: float) -> float:
    try:
        return fn(alpha, p)
    except WardropError as exc:
        log.warning("lower level failed at alpha=%.3e: %s; scoring -inf", alpha, exc)
        return -math.inf


def cso_best_response(pi_mid: Callable[[float, float], float], p: float,
                      config: TrilevelConfig) -> tuple[float, float]:
    """Maximise alpha -> pi_mid(alpha, p) over [0, alpha_max] by windowed Brent.

    The interval is split into ``brent_windows`` brackets with a bounded
    Brent search in each; both interval endpoints are evaluated explicitly.
    Ties resolve to the smallest alpha.
    """
    xtol = config.brent_xtol if config.brent_xtol is not None else config.alpha_max * 1e-5
    edges = np.linspace(0.0, config.alpha_max, config.brent_windows + 1)
    candidates: list[tuple[float, float]] = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        res = minimize_scalar(lambda a: -_safe(pi_mid, a, p), bounds=(lo, hi),
                              method="bounded", options={"xatol": xtol})
        candidates.append((float(res.x), -float(res.fun)))
    for a in (0.0, config.alpha_max):
        candidates.append((a, _safe(pi_mid, a, p)))
    best_value = max(v for _a, v in candidates)
    best_alpha = min(a for a, v in candidates if v >= best_value - 1e-12 * max(1.0, abs(best_value)))
    return best_alpha, _safe(pi_mid, best_alpha, p)


def acceptance_probability(candidate_value: float, last_value: float, n: int,
                           cooling_base: float = 0.99) -> float:
    """Annealing acceptance rule; hill-climbing when the last value is zero."""
    diff = candidate_value - last_value
    denom = abs(last_value) * cooling_base ** n
    if denom == 0.0:
        return 1.0 if diff > 0 else 0.0
    return min(1.0, math.exp(diff / denom))


def annealing_search(pi_mid: Callable[[float, float], float],
                     pi_up: Callable[[float, float], float],
                     alpha_bars: Sequence[float], config: TrilevelConfig,
                     rng: np.random.Generator,
                     trace: list | None = None, outer_iter: int = 0,
                     eps_mid: float = 0.0) -> tuple[float, float, float]:
    """Constrained simulated annealing over (P, alpha); returns the best accepted point.

    P is uniform on [0, p_max]; alpha is normal around the stored response
    that is best at this P, redrawn until feasible (within eps/3 of every
    stored bound).  A candidate is accepted with the annealing probability;
    the loop ends after ``n_restarts`` consecutive rejections.
    """
    if not alpha_bars:
        raise ValueError("annealing requires at least one stored best response")
    rejections = 0
    n = 0
    last: tuple[float, float, float] | None = None
    best: tuple[float, float, float] | None = None
    while rejections < config.n_restarts:
        n += 1
        if n > config.max_candidates:
            break
        p = float(rng.uniform(0.0, config.p_max))
        bar_values = [_safe(pi_mid, a, p) for a in alpha_bars]
        alpha_center = alpha_bars[int(np.argmax(bar_values))]
        threshold = max(bar_values) - eps_mid / 3.0

        alpha = None
        for _draw in range(config.redraw_cap):
            cand = float(rng.normal(alpha_center, config.spread))
            if not 0.0 <= cand <= config.alpha_max:
                continue
            if _safe(pi_mid, cand, p) >= threshold:
                alpha = cand
                break
        if alpha is None:
            raise AnnealingError(
                f"no feasible alpha after {config.redraw_cap} draws around "
                f"{alpha_center:.3e}; consider a larger spread"
            )

        value = _safe(pi_up, alpha, p)
        if last is None:
            prob = 1.0
        else:
            prob = acceptance_probability(value, last[2], n, config.cooling_base)
        accepted = bool(rng.uniform() < prob) if prob < 1.0 else True
        if trace is not None:
            trace.append(TraceRow(outer_iter, "anneal", p, alpha,
                                  _safe(pi_mid, alpha, p), value, accepted, True))
        if accepted:
            last = (p, alpha, value)
            rejections = 0
            if best is None or value > best[2]:
                best = last
        else:
            rejections += 1
    if best is None:
        raise AnnealingError("annealing accepted no candidate")
    return best


def solve_bilevel(pi_mid: Callable[[float, float], float],
                  pi_up: Callable[[float, float], float],
                  config: TrilevelConfig) -> tuple[float, float, float, float, int, list, list]:
    """Iterative bounding loop on explicit payoff callables.

    Returns (p, alpha, eps_mid, pi_mid_bound_at_p, outer_iterations,
    alpha_bars, trace).  Exposed separately so synthetic payoffs can exercise
    the driver directly.
    """
    rng = np.random.default_rng(config.seed)
    trace: list[TraceRow] = []
    p_k = config.p_max / 2.0
    alpha_k = config.alpha_max / 2.0
    alpha_bar, pi_bar = cso_best_response(pi_mid, p_k, config)
    trace.append(TraceRow(0, "brent", p_k, alpha_bar, pi_bar,
                          _safe(pi_up, alpha_bar, p_k), True, True))
    eps = config.eps_mid
    if eps is None:
        eps = 1e-3 * max(abs(pi_bar), 1e-9)
    alpha_bars = [alpha_bar]

    outer = 0
    while True:
        achieved = _safe(pi_mid, alpha_k, p_k)
        if achieved >= pi_bar - eps:
            return p_k, alpha_k, eps, pi_bar, outer, alpha_bars, trace
        outer += 1
        if outer > config.max_outer:
            raise TrilevelError(
                f"no eps-optimal point within {config.max_outer} outer iterations", trace)
        p_k, alpha_k, _best_up = annealing_search(
            pi_mid, pi_up, alpha_bars, config, rng, trace, outer, eps)
        alpha_bar, pi_bar = cso_best_response(pi_mid, p_k, config)
        alpha_bars.append(alpha_bar)
        trace.append(TraceRow(outer, "brent", p_k, alpha_bar, pi_bar,
                              _safe(pi_up, alpha_bar, p_k), True, True))


def trilevel_solve(scenario: TransportScenario, grid: GridCase,
                   config: TrilevelConfig | None = None, q: float = 0.1,
                   q_bar: float = 0.3, beta: float = 1e-3,
                   billing_unit_kwh: float = DEFAULT_BILLING_UNIT_KWH,
                   system: PathSystem | None = None,
                   problem: TrilevelProblem | None = None) -> TrilevelSolution:
    """End-to-end solve of the operator pricing problem on a scenario."""
    config = config or TrilevelConfig()
    if problem is None:
        problem = TrilevelProblem(scenario, grid, q=q, q_bar=q_bar, beta=beta,
                                  billing_unit_kwh=billing_unit_kwh, system=system,
                                  equilibrium_tol=config.equilibrium_tol,
                                  p_max=config.p_max)
    p_star, alpha_star, eps, pi_bar, outer, alpha_bars, trace = solve_bilevel(
        problem.pi_mid, problem.pi_up, config)
    equilibrium = problem.equilibrium(alpha_star)
    return TrilevelSolution(
        p_star=p_star,
        alpha_star=alpha_star,
        pi_up=problem.pi_up(alpha_star, p_star),
        pi_mid=problem.pi_mid(alpha_star, p_star),
        pi_mid_bound=pi_bar,
        eps_mid=eps,
        needs_kwh=equilibrium.needs_kwh,
        outer_iterations=outer,
        alpha_bars=tuple(alpha_bars),
        trace=tuple(trace),
        equilibrium=equilibrium,
    )
