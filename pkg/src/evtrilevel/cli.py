"""Command-line front end: solve, sweep, baseline, check, paths."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .baselines import BaselineConfig, baseline_fixed_point
from .charging import HubChargingCase, qp_oracle
from .equilibrium import PathSystem, solve_wardrop, uniqueness_probe, wardrop_gap
from .powerflow import solve_power_flow
from .scenario import (
    SweepResults,
    SweepSpec,
    dump_equilibrium,
    emit_outputs,
    load_scenario,
    load_sweep_spec,
    run_sweep,
)
from .transport import enumerate_paths
from .trilevel import trilevel_solve


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--scenario", help="scenario config JSON (bundled defaults if omitted)")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=int, help="override the scenario seed")
    parser.add_argument("--threads", type=int, default=1, help="sweep worker threads")
    parser.add_argument("--tol-equilibrium", type=float, dest="tol_equilibrium",
                        help="absolute equilibrium gap tolerance (EUR)")
    parser.add_argument("--tol-mid", type=float, dest="tol_mid",
                        help="override eps_mid, the CSO optimality tolerance (EUR)")


def _load(args) -> "Scenario":
    scenario = load_scenario(args.scenario)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.tol_mid is not None:
        overrides["eps_mid"] = args.tol_mid
    return scenario.with_overrides(**overrides) if overrides else scenario


def _cmd_solve(args) -> int:
    scenario = _load(args)
    cfg = scenario.trilevel_config(
        **({"equilibrium_tol": args.tol_equilibrium} if args.tol_equilibrium else {}))
    problem = scenario.problem()
    solution = trilevel_solve(scenario.transport, scenario.grid, config=cfg, problem=problem)
    spec = SweepSpec("x_e", (scenario.x_e,), "trilevel")
    results = run_sweep(scenario, spec, threads=1)
    manifest = emit_outputs(results, args.out)
    dump_equilibrium(problem.equilibrium(solution.alpha_star), args.out)
    print(f"P* = {solution.p_star:.6g} MW, alpha* = {solution.alpha_star:.6g}")
    print(f"Pi_up = {solution.pi_up:.6g}, Pi_mid = {solution.pi_mid:.6g} "
          f"(bound {solution.pi_mid_bound:.6g}, eps {solution.eps_mid:.3g})")
    print(f"outputs in {args.out} (config {manifest['config_hash'][:12]})")
    return 0


def _cmd_sweep(args) -> int:
    scenario = _load(args)
    spec = load_sweep_spec(args.spec)
    results = run_sweep(scenario, spec, threads=args.threads)
    manifest = emit_outputs(results, args.out)
    failures = [r for r in results.rows if r["error"]]
    print(f"{len(results.rows)} points, {len(failures)} failed; outputs in {args.out} "
          f"(config {manifest['config_hash'][:12]})")
    return 1 if failures else 0


def _cmd_baseline(args) -> int:
    scenario = _load(args)
    mode = args.mode
    spec = SweepSpec("x_e", (scenario.x_e,), f"lmp_{mode}",
                     baseline={"alpha_tilde": args.alpha_tilde})
    results = run_sweep(scenario, spec, threads=1)
    emit_outputs(results, args.out)
    row = results.baseline_rows[0] if results.baseline_rows else None
    if row is None:
        print(f"baseline failed: {results.rows[0]['error']}")
        return 1
    print(f"LMP+{mode.upper()} @ alpha_tilde={args.alpha_tilde}: grid_cost={row['grid_cost']:.6g}, "
          f"revenue={row['charging_revenue']:.6g}, converged={row['converged']} "
          f"in {row['iterations']} iterations")
    return 0


def _cmd_check(args) -> int:
    """Invariant suites: scheduling oracle, power-flow residuals, uniqueness probe."""
    scenario = _load(args)
    failures = 0

    rng = np.random.default_rng(scenario.seed)
    worst_val, worst_prof = 0.0, 0.0
    for _ in range(100):
        n_slots = int(rng.integers(1, 13))
        nonflex = rng.uniform(0.0, 10.0, n_slots)
        need = float(rng.uniform(0.0, 30.0))
        case = HubChargingCase.from_profile(nonflex, need)
        profile = case.waterfill_profile()
        oracle_prof, oracle_val = qp_oracle(nonflex, need)
        val = case.waterfill_value()
        worst_val = max(worst_val, abs(val - oracle_val) / max(oracle_val, 1e-12))
        worst_prof = max(worst_prof, float(np.abs(profile.charging_kwh - oracle_prof).max()))
    ok = worst_val <= 1e-8 and worst_prof <= 1e-6
    failures += not ok
    print(f"[{'ok' if ok else 'FAIL'}] water-filling vs QP oracle: "
          f"value rel {worst_val:.2e}, profile abs {worst_prof:.2e} kWh")

    loads = scenario.grid.base_loads_pu(0)
    sweep = solve_power_flow(scenario.grid, loads, method="sweep")
    newton = solve_power_flow(scenario.grid, loads, method="newton")
    rel = abs(sweep.head_pu - newton.head_pu) / max(newton.head_pu, 1e-12)
    ok = sweep.residual_pu <= 1e-8 and rel <= 1e-6
    failures += not ok
    print(f"[{'ok' if ok else 'FAIL'}] power flow: residual {sweep.residual_pu:.2e} pu, "
          f"sweep-vs-newton head {rel:.2e} rel")

    alpha = scenario.config["alpha_max"] / 2.0
    report = uniqueness_probe(scenario.transport, alpha, n_starts=4,
                              seed=scenario.seed, tol=args.tol_equilibrium)
    ok = report.max_relative() <= 1e-5
    failures += not ok
    print(f"[{'ok' if ok else 'FAIL'}] equilibrium uniqueness over {report.runs} starts: "
          f"arc rel {report.arc_flow_rel:.2e}, needs rel {report.need_rel:.2e}")

    res = solve_wardrop(scenario.transport, alpha, tol=args.tol_equilibrium)
    gap = wardrop_gap(res.assignment, alpha)
    ok = gap <= (args.tol_equilibrium or 1e-5)
    failures += not ok
    print(f"[{'ok' if ok else 'FAIL'}] equilibrium gap replay: {gap:.3e} EUR")

    print("all checks passed" if failures == 0 else f"{failures} check(s) failed")
    return 1 if failures else 0


def _cmd_paths(args) -> int:
    scenario = _load(args)
    path_set = enumerate_paths(scenario.transport, k=scenario.config["k_paths"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for p in path_set.paths:
        rows.append({
            "path_id": p.id, "class": p.class_tag, "origin": p.origin,
            "destination": p.destination, "hub": p.hub_id,
            "decision": p.decision.value, "length_km": p.length_km,
            "arcs": "|".join(p.arc_ids),
        })
    target = out / "paths.csv"
    import csv as _csv
    with target.open("w", newline="") as f:
        writer = _csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    for w in path_set.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"{len(rows)} paths -> {target}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="evtrilevel",
        description="Trilevel commuter driving-and-charging optimisation suite",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="one trilevel solve on a scenario")
    _add_common(p_solve)
    p_solve.set_defaults(fn=_cmd_solve)

    p_sweep = sub.add_parser("sweep", help="run a sweep spec over a parameter grid")
    _add_common(p_sweep)
    p_sweep.add_argument("--spec", required=True, help="sweep spec JSON")
    p_sweep.set_defaults(fn=_cmd_sweep)

    p_base = sub.add_parser("baseline", help="one reference-method run (LMP+P&C / LMP+SC)")
    _add_common(p_base)
    p_base.add_argument("--mode", choices=["pc", "sc"], required=True)
    p_base.add_argument("--alpha-tilde", type=float, default=0.01, dest="alpha_tilde")
    p_base.set_defaults(fn=_cmd_baseline)

    p_check = sub.add_parser("check", help="run the invariant suites")
    _add_common(p_check)
    p_check.set_defaults(fn=_cmd_check)

    p_paths = sub.add_parser("paths", help="dump the enumerated path set")
    _add_common(p_paths)
    p_paths.set_defaults(fn=_cmd_paths)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
