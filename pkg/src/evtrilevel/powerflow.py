"""Radial distribution network model and bus-injection power flow.

The feeder is solved with a backward-forward sweep (branch current
accumulation in reverse topological order, then voltage drops from the slack
bus outward) and certified against the bus-injection balance

    S_k = U_k * conj( (Y U)_k )

at every non-slack bus.  A full Newton-Raphson solver in polar coordinates is
kept as an independent cross-check and as a refinement fallback.

Powers are handled in per-unit on the case's base (1 MVA bundled default);
the grid-cost proxy is the squared head apparent power in those units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib.resources import files
from typing import Mapping

import numpy as np

__all__ = [
    "GridCase",
    "PowerFlowSolution",
    "PowerFlowError",
    "solve_power_flow",
    "head_power",
    "grid_cost",
    "load_ieee33",
]


class PowerFlowError(RuntimeError):
    """Sweep/Newton failure; carries the residual trace when available."""

    def __init__(self, message: str, residual_trace=None):
        super().__init__(message)
        self.residual_trace = list(residual_trace or [])


@dataclass(frozen=True, eq=False)
class GridCase:
    """Radial network: buses with per-slot base loads, lines, slack and bases."""

    bus_ids: tuple
    p_load_kw: np.ndarray       # (n_buses, n_slots) base real load
    q_load_kvar: np.ndarray     # (n_buses, n_slots)
    lines: tuple                # (from_bus, to_bus, r_ohm, x_ohm)
    slack_bus: int
    v_base_kv: float
    s_base_kva: float
    hub_buses: Mapping[int, int]        # hub id -> bus id
    _ordered_edges: tuple = field(repr=False, default=None)   # (child, parent, z_pu) topological
    _ybus: np.ndarray = field(repr=False, default=None)

    @classmethod
    def build(cls, bus_ids, p_load_kw, q_load_kvar, lines, slack_bus,
              v_base_kv, s_base_kva, hub_buses) -> "GridCase":
        bus_ids = tuple(bus_ids)
        n = len(bus_ids)
        p = np.atleast_2d(np.asarray(p_load_kw, dtype=float))
        q = np.atleast_2d(np.asarray(q_load_kvar, dtype=float))
        if p.shape[0] != n:
            p, q = p.T.copy(), q.T.copy()
        if p.shape[0] != n or q.shape != p.shape:
            raise ValueError("load arrays must be (n_buses, n_slots)")
        if len(lines) != n - 1:
            raise ValueError(f"radial feeder needs {n - 1} lines for {n} buses, got {len(lines)}")
        if any(r <= 0 for _f, _t, r, _x in lines):
            raise ValueError("every line needs a positive resistance")
        index = {b: i for i, b in enumerate(bus_ids)}
        if slack_bus not in index:
            raise ValueError(f"slack bus {slack_bus} not among buses")

        z_base = (v_base_kv * 1e3) ** 2 / (s_base_kva * 1e3)
        adjacency: dict[int, list[tuple[int, complex]]] = {i: [] for i in range(n)}
        for f, t, r, x in lines:
            z = complex(r, x) / z_base
            adjacency[index[f]].append((index[t], z))
            adjacency[index[t]].append((index[f], z))

        # orient the tree away from the slack bus
        root = index[slack_bus]
        parent = {root: None}
        order = [root]
        stack = [root]
        while stack:
            u = stack.pop()
            for v, z in adjacency[u]:
                if v not in parent:
                    parent[v] = (u, z)
                    order.append(v)
                    stack.append(v)
        if len(order) != n:
            raise ValueError("feeder is not connected")
        ordered_edges = tuple((v, parent[v][0], parent[v][1]) for v in order[1:])

        ybus = np.zeros((n, n), dtype=complex)
        for f, t, r, x in lines:
            y = 1.0 / (complex(r, x) / z_base)
            i, j = index[f], index[t]
            ybus[i, i] += y
            ybus[j, j] += y
            ybus[i, j] -= y
            ybus[j, i] -= y

        return cls(bus_ids, p, q, tuple(lines), slack_bus, v_base_kv, s_base_kva,
                   dict(hub_buses), ordered_edges, ybus)

    @property
    def n_buses(self) -> int:
        return len(self.bus_ids)

    @property
    def n_slots(self) -> int:
        return self.p_load_kw.shape[1]

    @property
    def bus_index(self) -> dict:
        return {b: i for i, b in enumerate(self.bus_ids)}

    @property
    def slack_index(self) -> int:
        return self.bus_index[self.slack_bus]

    def base_loads_pu(self, slot: int) -> np.ndarray:
        """Complex per-unit base load vector at a slot (consumption positive)."""
        return (self.p_load_kw[:, slot] + 1j * self.q_load_kvar[:, slot]) / self.s_base_kva


@dataclass(frozen=True, eq=False)
class PowerFlowSolution:
    voltages: np.ndarray        # complex pu, aligned with case.bus_ids
    head_pu: float              # apparent power magnitude at the slack bus
    residual_pu: float
    iterations: int
    method: str

    @property
    def head_kva(self) -> float:
        return self.head_pu  # scaled by the caller's base when needed


def _bim_residual(case: GridCase, volts: np.ndarray, loads_pu: np.ndarray) -> float:
    """Max bus-injection mismatch |S_spec - U conj(Y U)| at non-slack buses."""
    injected = volts * np.conj(case._ybus.dot(volts))
    mismatch = np.abs(-loads_pu - injected)
    mismatch[case.slack_index] = 0.0
    return float(mismatch.max())


def _sweep(case: GridCase, loads_pu: np.ndarray, tol_v: float = 1e-12,
           max_iter: int = 60) -> tuple[np.ndarray, int, list]:
    volts = np.ones(case.n_buses, dtype=complex)
    trace = []
    for it in range(1, max_iter + 1):
        prev = volts.copy()
        currents = np.conj(loads_pu / volts)
        branch = np.zeros(case.n_buses, dtype=complex)   # current into each bus from its parent
        for child, _parent, _z in reversed(case._ordered_edges):
            branch[child] += currents[child]
        for child, parent, _z in reversed(case._ordered_edges):
            branch[parent] += branch[child]
        for child, parent, z in case._ordered_edges:
            volts[child] = volts[parent] - z * branch[child]
        delta = float(np.abs(volts - prev).max())
        trace.append(delta)
        if delta <= tol_v:
            break
    return volts, it, trace


def _newton(case: GridCase, loads_pu: np.ndarray, tol: float = 1e-10,
            max_iter: int = 40, start: np.ndarray | None = None) -> tuple[np.ndarray, int]:
    """Polar Newton-Raphson on the PQ buses; independent of the sweep."""
    n = case.n_buses
    slack = case.slack_index
    pq = [i for i in range(n) if i != slack]
    g, b = case._ybus.real, case._ybus.imag
    vm = np.abs(start) if start is not None else np.ones(n)
    va = np.angle(start) if start is not None else np.zeros(n)
    p_spec = -loads_pu.real
    q_spec = -loads_pu.imag
    for it in range(1, max_iter + 1):
        vc = vm * np.exp(1j * va)
        s_calc = vc * np.conj(case._ybus.dot(vc))
        dp = p_spec - s_calc.real
        dq = q_spec - s_calc.imag
        mismatch = np.concatenate([dp[pq], dq[pq]])
        if np.abs(mismatch).max() < tol:
            return vc, it
        theta = va[:, None] - va[None, :]
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        # standard polar Jacobian blocks
        h = vm[:, None] * vm[None, :] * (g * sin_t - b * cos_t)
        np.fill_diagonal(h, -s_calc.imag - b.diagonal() * vm ** 2)
        nmat = vm[:, None] * (g * cos_t + b * sin_t)
        np.fill_diagonal(nmat, s_calc.real / vm + g.diagonal() * vm)
        j2 = -vm[:, None] * vm[None, :] * (g * cos_t + b * sin_t)
        np.fill_diagonal(j2, s_calc.real - g.diagonal() * vm ** 2)
        l = vm[:, None] * (g * sin_t - b * cos_t)
        np.fill_diagonal(l, s_calc.imag / vm - b.diagonal() * vm)
        jac = np.block([[h[np.ix_(pq, pq)], nmat[np.ix_(pq, pq)]],
                        [j2[np.ix_(pq, pq)], l[np.ix_(pq, pq)]]])
        try:
            dx = np.linalg.solve(jac, mismatch)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError(f"Newton Jacobian singular at iteration {it}") from exc
        va[pq] += dx[:len(pq)]
        vm[pq] += dx[len(pq):]
    raise PowerFlowError(f"Newton did not converge in {max_iter} iterations")


def solve_power_flow(case: GridCase, loads_pu: np.ndarray, method: str = "sweep",
                     residual_tol: float = 1e-8) -> PowerFlowSolution:
    """Solve the feeder for complex per-unit loads (consumption positive).

    The returned solution satisfies the bus-injection balance to
    ``residual_tol`` in per-unit; voltages below 0.5 pu raise an
    infeasibility error.
    """
    loads_pu = np.asarray(loads_pu, dtype=complex)
    if loads_pu.shape != (case.n_buses,):
        raise ValueError("loads must be given per bus")
    if method == "sweep":
        volts, iters, trace = _sweep(case, loads_pu)
        residual = _bim_residual(case, volts, loads_pu)
        if residual > residual_tol:
            # refine a stalled sweep with Newton before giving up
            try:
                volts, extra = _newton(case, loads_pu, start=volts)
                iters += extra
                residual = _bim_residual(case, volts, loads_pu)
            except PowerFlowError:
                pass
        if residual > residual_tol:
            raise PowerFlowError(
                f"power flow residual {residual:.3e} pu above {residual_tol:.1e}",
                residual_trace=trace,
            )
    elif method == "newton":
        volts, iters = _newton(case, loads_pu)
        residual = _bim_residual(case, volts, loads_pu)
        if residual > residual_tol:
            raise PowerFlowError(f"Newton residual {residual:.3e} pu above {residual_tol:.1e}")
    else:
        raise ValueError(f"unknown method {method!r}")

    vmin = float(np.abs(volts).min())
    if vmin < 0.5:
        raise PowerFlowError(f"voltage collapse: min |U| = {vmin:.3f} pu")
    slack = case.slack_index
    head = volts[slack] * np.conj(case._ybus[slack].dot(volts))
    return PowerFlowSolution(volts, float(np.abs(head)), residual, iters, method)


def head_power(case: GridCase, loads_pu: np.ndarray, method: str = "sweep",
               anchor_pu: np.ndarray | None = None) -> float:
    """Head apparent power, extrapolated past the loadability limit if needed.

    Without ``anchor_pu`` this is a plain solve.  With an anchor (a feasible
    load vector, typically the same buses without EV charging), an infeasible
    target is handled by bisecting the largest feasible scaling of the load
    increment and extrapolating |S| linearly beyond it.  |S| grows faster
    than linearly toward the nose point, so the surrogate is a lower bound
    and stays monotone in the added load.
    """
    try:
        return solve_power_flow(case, loads_pu, method=method).head_pu
    except PowerFlowError:
        if anchor_pu is None:
            raise
    delta = loads_pu - anchor_pu
    lo, hi = 0.0, 1.0
    for _ in range(20):
        mid = 0.5 * (lo + hi)
        try:
            solve_power_flow(case, anchor_pu + mid * delta, method=method)
            lo = mid
        except PowerFlowError:
            hi = mid
    s_hi = solve_power_flow(case, anchor_pu + lo * delta, method=method).head_pu
    s_lo = solve_power_flow(case, anchor_pu + 0.8 * lo * delta, method=method).head_pu
    slope = (s_hi - s_lo) / max(0.2 * lo, 1e-9)
    return s_hi + slope * (1.0 - lo)


def grid_cost(case: GridCase, ev_kwh: Mapping[int, float],
              nonflex_kwh: Mapping[int, float], slot: int,
              method: str = "sweep") -> float:
    """Marginal squared-head-power cost of EV charging in one slot.

    ``ev_kwh`` and ``nonflex_kwh`` map hub ids to that slot's energies; slots
    last one time unit, so slot energy equals average power.  Base bus loads
    and hub nonflexible loads enter both power flows; the difference of the
    squared head apparent powers isolates EV charging (per-unit^2).
    """
    if any(v < -1e-9 for v in ev_kwh.values()):
        raise ValueError("EV slot loads must be nonnegative")
    index = case.bus_index
    base = case.base_loads_pu(slot)
    without = base.copy()
    for hub, kwh in nonflex_kwh.items():
        without[index[case.hub_buses[hub]]] += kwh / case.s_base_kva
    with_ev = without.copy()
    for hub, kwh in ev_kwh.items():
        with_ev[index[case.hub_buses[hub]]] += max(kwh, 0.0) / case.s_base_kva
    s0 = solve_power_flow(case, without, method=method).head_pu
    s1 = head_power(case, with_ev, method=method, anchor_pu=without)
    return s1 ** 2 - s0 ** 2


def load_ieee33(n_slots: int = 8, hub_buses: Mapping[int, int] | None = None) -> GridCase:
    """Bundled 33-bus feeder with base loads replicated over the slots."""
    try:
        raw = json.loads(files("evtrilevel.data").joinpath("ieee33.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise PowerFlowError(f"bundled feeder data unreadable: {exc}") from exc
    bus_ids = [b["id"] for b in raw["buses"]]
    p = np.repeat(np.array([[b["p_load_kw"]] for b in raw["buses"]], dtype=float), n_slots, axis=1)
    q = np.repeat(np.array([[b["q_load_kvar"]] for b in raw["buses"]], dtype=float), n_slots, axis=1)
    lines = [(l["from"], l["to"], l["r_ohm"], l["x_ohm"]) for l in raw["lines"]]
    hubs = {int(k): v for k, v in raw["hub_buses"].items()}
    if hub_buses is not None:
        hubs = dict(hub_buses)
    return GridCase.build(bus_ids, p, q, lines, raw["slack_bus"],
                          raw["v_base_kv"], raw["s_base_kva"], hubs)
