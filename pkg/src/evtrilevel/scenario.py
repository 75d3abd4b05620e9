"""Scenario assembly, seeded synthesis, experiment sweeps and file outputs.

A scenario couples the bundled (or user-supplied) road network and feeder
with the economic parameters and the EV penetration split.  Hub nonflexible
totals are divided into per-slot profiles by a seeded flat Dirichlet draw, so
two scenarios with the same seed are identical end to end.

Sweeps rerun the chosen solver over a parameter grid (EV penetration, PT
fare, or the baselines' conversion parameter) and emit fixed-schema CSVs plus
a manifest carrying the config hash and per-file checksums.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib.resources import files
from pathlib import Path
from typing import Mapping

import numpy as np

from . import __version__
from .baselines import BaselineConfig, BaselineRun, baseline_fixed_point
from .charging import plug_and_charge
from .equilibrium import EquilibriumResult, PathSystem
from .operators import cso_payoff
from .powerflow import GridCase, load_ieee33
from .transport import Arc, Hub, TransportScenario, VehicleClass
from .trilevel import TrilevelConfig, TrilevelProblem, TrilevelSolution, trilevel_solve

__all__ = [
    "Scenario",
    "SweepSpec",
    "SweepResults",
    "load_scenario",
    "default_scenario",
    "synthesize_nonflex",
    "load_sweep_spec",
    "run_sweep",
    "emit_outputs",
    "dump_equilibrium",
]

_CONFIG_DEFAULTS: dict = {
    "network": "sioux_falls",
    "grid": "ieee33",
    "x_e": 0.5,
    "e0_share": 0.5,
    "seed": 0,
    "k_paths": 8,
    "q": 0.1,
    "q_bar": 0.3,
    "beta": 1e-3,
    "alpha_max": 1e-3,
    "p_max_mw": 4.0,
    "n_restarts": 15,
    "spread": 2.5e-6,
    "eps_mid": None,
    "billing_unit_kwh": 1.0,
    "pt_fares": {},
}


def synthesize_nonflex(totals_mwh, n_slots: int, seed: int) -> list[np.ndarray]:
    """Split per-hub daily totals into random per-slot kWh profiles.

    Each profile is total * Dirichlet(1, ..., 1), drawn sequentially from one
    seeded generator, so sums are exact and draws reproducible.
    """
    rng = np.random.default_rng(seed)
    profiles = []
    for total in totals_mwh:
        if total < 0:
            raise ValueError("nonflexible totals must be nonnegative")
        weights = rng.dirichlet(np.ones(n_slots))
        profiles.append(total * 1000.0 * weights)
    return profiles


def _bundled(name: str) -> dict:
    return json.loads(files("evtrilevel.data").joinpath(f"{name}.json").read_text())


def _resolve_blob(value, bundled_names) -> dict:
    if isinstance(value, dict):
        return value
    if isinstance(value, str):
        if value in bundled_names:
            return _bundled(value)
        return json.loads(Path(value).read_text())
    raise ValueError(f"expected a bundled name, file path or inline object, got {value!r}")


def _build_transport(net: dict, config: Mapping) -> TransportScenario:
    arcs = tuple(Arc(a["id"], a["tail"], a["head"], a["length_km"],
                     a["speed_kmh"], a["capacity_frac"]) for a in net["arcs"])
    n_slots = net["time_slots"]
    fares = {int(k): float(v) for k, v in config["pt_fares"].items()}

    totals = [h.get("nonflex_total_mwh") for h in net["hubs"]]
    if any(t is not None for t in totals):
        profiles = synthesize_nonflex([t or 0.0 for t in totals], n_slots, config["seed"])
    hubs = []
    for i, h in enumerate(net["hubs"]):
        if "nonflex_kwh" in h:
            profile = tuple(float(v) for v in h["nonflex_kwh"])
        else:
            profile = tuple(profiles[i])
        hubs.append(Hub(h["id"], h["node"], h["owner"],
                        fares.get(h["id"], h["pt_fare_eur"]), h["bus"], profile))

    classes = tuple(
        VehicleClass(c["tag"], c["consumption_per_km"], c.get("topup_kwh", 0.0),
                     c.get("offsite_price_eur"))
        for c in net["classes"]
    )
    x_e, e0_share = config["x_e"], config["e0_share"]
    demands = []
    for od in net["od_demands"]:
        n = float(od["count"])
        o, d = od["origin"], od["destination"]
        demands.append(("g", o, d, (1.0 - x_e) * n))
        demands.append(("e0", o, d, x_e * e0_share * n))
        demands.append(("e1", o, d, x_e * (1.0 - e0_share) * n))
    return TransportScenario(arcs, tuple(hubs), classes, tuple(demands),
                             net["value_of_time_eur_per_h"],
                             net["city_hub_price_eur_per_kwh"], n_slots)


@dataclass(frozen=True, eq=False)
class Scenario:
    """Validated, fully built experiment setup."""

    transport: TransportScenario
    grid: GridCase
    config: dict = field(repr=False)

    @property
    def seed(self) -> int:
        return self.config["seed"]

    @property
    def x_e(self) -> float:
        return self.config["x_e"]

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.config, sort_keys=True).encode()).hexdigest()

    def trilevel_config(self, **overrides) -> TrilevelConfig:
        cfg = self.config
        base = dict(
            alpha_max=cfg["alpha_max"], p_max=cfg["p_max_mw"], eps_mid=cfg["eps_mid"],
            n_restarts=cfg["n_restarts"], spread=cfg["spread"], seed=cfg["seed"],
        )
        base.update(overrides)
        return TrilevelConfig(**base)

    def problem(self, system: PathSystem | None = None) -> TrilevelProblem:
        cfg = self.config
        return TrilevelProblem(self.transport, self.grid, q=cfg["q"], q_bar=cfg["q_bar"],
                               beta=cfg["beta"], billing_unit_kwh=cfg["billing_unit_kwh"],
                               system=system, p_max=cfg["p_max_mw"])

    def with_overrides(self, **overrides) -> "Scenario":
        merged = dict(self.config)
        merged.update(overrides)
        return build_scenario(merged)

    def equal_config(self, other: "Scenario") -> bool:
        return self.config == other.config


def build_scenario(config: Mapping) -> Scenario:
    cfg = dict(_CONFIG_DEFAULTS)
    unknown = set(config) - set(cfg)
    if unknown:
        raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
    cfg.update(config)

    if not 0.0 <= cfg["x_e"] <= 1.0:
        raise ValueError(f"x_e must lie in [0, 1], got {cfg['x_e']}")
    if not 0.0 <= cfg["e0_share"] <= 1.0:
        raise ValueError(f"e0_share must lie in [0, 1], got {cfg['e0_share']}")
    if not cfg["q_bar"] > cfg["q"] > 0:
        raise ValueError("tariff slopes need q_bar > q > 0")
    if cfg["alpha_max"] <= 0 or cfg["p_max_mw"] <= 0:
        raise ValueError("alpha_max and p_max_mw must be positive")
    if cfg["eps_mid"] is not None and cfg["eps_mid"] <= 0:
        raise ValueError("eps_mid must be positive when given")

    net = _resolve_blob(cfg["network"], ("sioux_falls",))
    transport = _build_transport(net, cfg)
    grid_raw = cfg["grid"]
    if grid_raw == "ieee33":
        grid = load_ieee33(n_slots=transport.n_slots)
    else:
        raw = _resolve_blob(grid_raw, ())
        grid = GridCase.build(
            [b["id"] for b in raw["buses"]],
            np.repeat(np.array([[b["p_load_kw"]] for b in raw["buses"]], dtype=float),
                      transport.n_slots, axis=1),
            np.repeat(np.array([[b["q_load_kvar"]] for b in raw["buses"]], dtype=float),
                      transport.n_slots, axis=1),
            [(l["from"], l["to"], l["r_ohm"], l["x_ohm"]) for l in raw["lines"]],
            raw["slack_bus"], raw["v_base_kv"], raw["s_base_kva"],
            {int(k): v for k, v in raw["hub_buses"].items()},
        )
    hub_ids = {h.id for h in transport.hubs}
    unmapped = hub_ids - set(grid.hub_buses)
    if unmapped:
        raise ValueError(f"hubs without a grid bus: {sorted(unmapped)}")
    # keep the canonical config (defaults materialised) for hashing/round trips
    return Scenario(transport, grid, cfg)


def load_scenario(path: str | Path | None = None) -> Scenario:
    """Build a scenario from a JSON config file (bundled defaults when None)."""
    if path is None:
        return build_scenario({})
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ValueError("scenario config must be a JSON object")
    return build_scenario(raw)


def default_scenario(**overrides) -> Scenario:
    return build_scenario(overrides)


@dataclass(frozen=True)
class SweepSpec:
    """One swept parameter, its value grid, and the solver per grid point."""

    param: str                       # "x_e" | "pt_fare" | "alpha_tilde"
    values: tuple
    solver: str = "trilevel"         # "trilevel" | "lmp_pc" | "lmp_sc"
    baseline: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.param not in ("x_e", "pt_fare", "alpha_tilde"):
            raise ValueError(f"unknown sweep parameter {self.param!r}")
        if self.solver not in ("trilevel", "lmp_pc", "lmp_sc"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if len(self.values) == 0:
            raise ValueError("sweep grid must be nonempty")
        if list(self.values) != sorted(self.values):
            raise ValueError("sweep grid must be sorted")
        if self.param == "alpha_tilde" and self.solver == "trilevel":
            raise ValueError("alpha_tilde sweeps apply to baseline solvers only")


def load_sweep_spec(path: str | Path) -> SweepSpec:
    raw = json.loads(Path(path).read_text())
    known = {"param", "values", "solver", "baseline"}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown sweep keys: {sorted(unknown)}")
    return SweepSpec(raw["param"], tuple(raw["values"]), raw.get("solver", "trilevel"),
                     raw.get("baseline", {}))


@dataclass(frozen=True, eq=False)
class SweepResults:
    rows: tuple                  # one dict per grid point
    trace_rows: tuple            # trilevel solver trace, tagged by param value
    profile_rows: tuple          # charging profiles of the last grid point
    payoff_rows: tuple           # per-hub payoff breakdown per grid point
    baseline_rows: tuple         # baseline comparison lines
    hub_ids: tuple
    scenario_config: dict
    spec: SweepSpec | None


def _scenario_for_value(scenario: Scenario, spec: SweepSpec, value) -> Scenario:
    if spec.param == "x_e":
        return scenario.with_overrides(x_e=float(value))
    if spec.param == "pt_fare":
        fares = {str(k): v for k, v in scenario.config["pt_fares"].items()}
        for h in scenario.transport.hubs:
            if h.is_cso:
                fares[str(h.id)] = float(value)
        return scenario.with_overrides(pt_fares=fares)
    return scenario  # alpha_tilde varies the baseline config, not the scenario


def _baseline_config(scenario: Scenario, spec: SweepSpec, value) -> BaselineConfig:
    kwargs = dict(spec.baseline)
    if spec.param == "alpha_tilde":
        kwargs["alpha_tilde"] = float(value)
    return BaselineConfig(**kwargs)


def _solve_point(scenario: Scenario, spec: SweepSpec, value) -> dict:
    hubs = [h.id for h in scenario.transport.hubs]
    out: dict = {"value": value, "hubs": hubs, "error": "", "trace": (),
                 "profiles": {}, "payoff": (), "baseline": None}
    try:
        point = _scenario_for_value(scenario, spec, value)
        if spec.solver == "trilevel":
            problem = point.problem()
            solution = trilevel_solve(point.transport, point.grid,
                                      config=point.trilevel_config(), problem=problem)
            needs = solution.needs_kwh
            _, breakdown = cso_payoff(
                solution.alpha_star, problem.terms(solution.p_star),
                needs, {h: problem.cases[h] for h in problem.cso_ids},
                billing_unit_kwh=point.config["billing_unit_kwh"])
            out.update(
                p_star=solution.p_star, alpha_star=solution.alpha_star,
                pi_up=solution.pi_up, pi_mid=solution.pi_mid,
                needs=needs, grid_cost=problem.grid_term(solution.alpha_star),
                revenue=breakdown.total_revenue, trace=solution.trace,
            )
            profiles = {}
            for hub in hubs:
                case = problem.cases[hub].with_need(needs[hub])
                if hub in problem.cso_ids:
                    profiles[hub] = ("trilevel", case.waterfill_profile())
                else:
                    profiles[hub] = ("trilevel", plug_and_charge(
                        np.asarray(point.transport.hub_by_id[hub].nonflex_kwh), needs[hub]))
            out["profiles"] = profiles
            out["payoff"] = tuple(
                {
                    "alpha": solution.alpha_star, "P": solution.p_star, "hub": hub,
                    "R_i": breakdown.revenue_by_hub.get(hub, 0.0),
                    "sum_C_i": float(breakdown.supply_by_hub[hub].sum())
                    if hub in breakdown.supply_by_hub else 0.0,
                    "Pi_mid": solution.pi_mid,
                    "grid_term": problem.grid_term(solution.alpha_star),
                    "Pi_up": solution.pi_up,
                }
                for hub in hubs
            )
        else:
            mode = "pc" if spec.solver == "lmp_pc" else "sc"
            bcfg = _baseline_config(point, spec, value)
            run = baseline_fixed_point(point.transport, point.grid, mode, bcfg,
                                       beta=point.config["beta"])
            needs = run.needs_trajectory[-1]
            out.update(
                p_star=None, alpha_star=None, pi_up=None, pi_mid=None, needs=needs,
                grid_cost=run.grid_cost, revenue=run.revenue,
            )
            out["profiles"] = {hub: (spec.solver, prof) for hub, prof in run.profiles.items()}
            out["baseline"] = {
                "method": spec.solver, "alpha_tilde": bcfg.alpha_tilde,
                "X_e": point.x_e, "grid_cost": run.grid_cost,
                "charging_revenue": run.revenue, "converged": run.converged,
                "iterations": run.iterations,
            }
    except Exception as exc:  # per-point failures stay in-row
        out["error"] = f"{type(exc).__name__}: {exc}"
        out.update(p_star=None, alpha_star=None, pi_up=None, pi_mid=None,
                   needs={h: float("nan") for h in hubs}, grid_cost=None, revenue=None)
    return out


def run_sweep(scenario: Scenario, spec: SweepSpec, threads: int = 1) -> SweepResults:
    """Solve every grid point and collect normative result rows.

    Points are independent; failures are recorded in their row and the sweep
    continues.  Row order follows the value grid regardless of thread count.
    """
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            points = list(pool.map(lambda v: _solve_point(scenario, spec, v), spec.values))
    else:
        points = [_solve_point(scenario, spec, v) for v in spec.values]

    hub_ids = tuple(h.id for h in scenario.transport.hubs)
    rows, trace_rows, payoff_rows, baseline_rows = [], [], [], []
    profile_rows: list[dict] = []
    for point in points:
        needs = point.get("needs", {})
        total = sum(needs.values()) if needs else 0.0
        row = {
            "param": spec.param, "param_value": point["value"],
            "p_star": point.get("p_star"), "alpha_star": point.get("alpha_star"),
            "pi_up": point.get("pi_up"), "pi_mid": point.get("pi_mid"),
        }
        for hub in hub_ids:
            row[f"L_{hub}_kwh"] = needs.get(hub)
        for hub in hub_ids:
            row[f"Ltilde_{hub}"] = (needs.get(hub, 0.0) / total) if total else None
        row["grid_cost"] = point.get("grid_cost")
        row["revenue"] = point.get("revenue")
        row["error"] = point["error"]
        rows.append(row)

        for tr in point.get("trace", ()):
            trace_rows.append({
                "param_value": point["value"], "outer_iter": tr.outer_iter,
                "phase": tr.phase, "P": tr.p, "alpha": tr.alpha,
                "Pi_mid": tr.pi_mid, "Pi_up": tr.pi_up,
                "accepted": tr.accepted, "feasible": tr.feasible,
            })
        payoff_rows.extend(point.get("payoff", ()))
        if point.get("baseline"):
            baseline_rows.append(point["baseline"])

    last = points[-1] if points else None
    if last and last.get("profiles"):
        for hub, (method, prof) in last["profiles"].items():
            for t in range(prof.charging_kwh.size):
                profile_rows.append({
                    "hub": hub, "slot": t + 1,
                    "ell_star_kwh": float(prof.charging_kwh[t]),
                    "ell_nonflex_kwh": float(prof.nonflex_kwh[t]),
                    "method": method,
                })

    return SweepResults(tuple(rows), tuple(trace_rows), tuple(profile_rows),
                        tuple(payoff_rows), tuple(baseline_rows), hub_ids,
                        scenario.config, spec)


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, fieldnames: list[str], rows) -> None:
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([_format(row.get(k)) for k in fieldnames])


def emit_outputs(results: SweepResults, out_dir: str | Path) -> dict:
    """Write the CSV set and a manifest with config hash and checksums."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    if results.rows:
        fields = list(results.rows[0].keys())
        path = out / "sweep_results.csv"
        _write_csv(path, fields, results.rows)
        written.append(path)
    if results.trace_rows:
        path = out / "solver_trace.csv"
        _write_csv(path, ["param_value", "outer_iter", "phase", "P", "alpha",
                          "Pi_mid", "Pi_up", "accepted", "feasible"], results.trace_rows)
        written.append(path)
    if results.profile_rows:
        path = out / "charging_profiles.csv"
        _write_csv(path, ["hub", "slot", "ell_star_kwh", "ell_nonflex_kwh", "method"],
                   results.profile_rows)
        written.append(path)
    if results.payoff_rows:
        path = out / "payoff_breakdown.csv"
        _write_csv(path, ["alpha", "P", "hub", "R_i", "sum_C_i", "Pi_mid",
                          "grid_term", "Pi_up"], results.payoff_rows)
        written.append(path)
    if results.baseline_rows:
        path = out / "baseline_comparison.csv"
        _write_csv(path, ["method", "alpha_tilde", "X_e", "grid_cost",
                          "charging_revenue", "converged", "iterations"],
                   results.baseline_rows)
        written.append(path)

    manifest = {
        "config_hash": hashlib.sha256(
            json.dumps(results.scenario_config, sort_keys=True).encode()).hexdigest(),
        "seed": results.scenario_config.get("seed"),
        "tool_version": __version__,
        "files": {
            p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in written
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def dump_equilibrium(result: EquilibriumResult, out_dir: str | Path) -> list[Path]:
    """Equilibrium CSVs: per-path flows and costs, plus per-hub needs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    system = result.assignment.system
    costs = system.path_costs(result.assignment.flows, result.alpha)
    flow_rows = [
        {"class": p.class_tag, "path_id": p.id,
         "flow": float(result.assignment.flows[i]), "cost": float(costs[i])}
        for i, p in enumerate(system.paths)
    ]
    needs_rows = [{"hub": hub, "L_i_kwh": val} for hub, val in result.needs_kwh.items()]
    flows_path = out / "equilibrium_flows.csv"
    needs_path = out / "hub_needs.csv"
    _write_csv(flows_path, ["class", "path_id", "flow", "cost"], flow_rows)
    _write_csv(needs_path, ["hub", "L_i_kwh"], needs_rows)
    return [flows_path, needs_path]
