"""Command-line interface.

Subcommands:
  run     execute one scenario, write the trace CSV (optionally figures)
  sweep   rerun a scenario over a parameter grid and seed batch
  verify  run the lemma/theorem/QP verification suites (JSON per test)
  oracle  emit finite-difference sensitivities for a scenario
  report  render figures from an existing trace CSV

Exit codes: 0 success, 1 verification failure, 2 validation error,
3 plant non-convergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import verify as verify_mod
from .net import FeederError
from .plant import AcPlant, PowerFlowError, fd_sensitivity
from .sim import (
    OUTCOME_PLANT_ERROR,
    ScenarioError,
    bundled_path,
    export_trace,
    load_scenario,
    run_two_timescale,
)

EXIT_OK = 0
EXIT_VERIFY_FAIL = 1
EXIT_VALIDATION = 2
EXIT_PLANT = 3


def _scenario_path(arg: str) -> Path:
    p = Path(arg)
    if p.exists():
        return p
    candidate = bundled_path(arg)
    if candidate.exists():
        return candidate
    raise ScenarioError(f"scenario file not found: {arg}")


def cmd_run(args) -> int:
    cfg, feeder, loads = load_scenario(_scenario_path(args.scenario))
    if args.seed is not None:
        cfg.seed = args.seed
    plant = AcPlant(feeder, loads, cfg.substation_v)
    trace = run_two_timescale(cfg, feeder, plant, loads=loads)
    out = Path(args.out) if args.out else Path("trace.csv")
    export_trace(trace, out)
    print(
        f"run: outcome={trace.outcome} iterations={int(trace.k[-1])} "
        f"terminal_e={trace.e[-1]:.4f} kW -> {out}"
    )
    for d in trace.dispatches:
        print(
            f"  dispatch @k={d.k}: feasible={d.feasible} "
            f"y {d.y_before:.2f} -> {d.y_after:.2f} kW"
        )
    if args.plots:
        from .report import render_trace_figures

        for p in render_trace_figures(trace, args.plots):
            print(f"  figure {p}")
    return EXIT_PLANT if trace.outcome == OUTCOME_PLANT_ERROR else EXIT_OK


SWEEP_PARAMS = ("beta", "alpha_value", "epsilon", "y_star", "delta")


def _sweep_one(task):
    """One sweep run; top-level so process pools can ship it to workers."""
    scenario_path, param, value, seed, want_mae = task
    cfg, feeder, loads = load_scenario(scenario_path)
    setattr(cfg, param, value)
    if param == "alpha_value":
        cfg.alpha_mode = "constant"
    if param in ("beta", "epsilon"):
        cfg.allow_unsafe_beta = True  # the study deliberately leaves the interval
    cfg.seed = seed
    plant = AcPlant(feeder, loads, cfg.substation_v)
    trace = run_two_timescale(cfg, feeder, plant, loads=loads)
    mae = np.nan
    if want_mae:
        phi_true = plant.true_sensitivity(trace.u[-1])
        mae = float(np.abs(trace.phi[-1] - phi_true).mean())
    row = {
        "param": param,
        "value": value,
        "seed": seed,
        "iterations": int(trace.k[-1]),
        "outcome": trace.outcome,
        "terminal_e": float(trace.e[-1]),
        "terminal_mae": mae,
    }
    return row, trace.e.copy()


def cmd_sweep(args) -> int:
    base_path = _scenario_path(args.scenario)
    if args.param not in SWEEP_PARAMS:
        raise ScenarioError(f"--param must be one of {SWEEP_PARAMS}")
    values = [float(v) for v in args.values.split(",")]
    tasks = [
        (base_path, args.param, value, seed, args.mae)
        for value in values
        for seed in range(args.seeds)
    ]
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_one, tasks))
    else:
        results = [_sweep_one(t) for t in tasks]
    rows = []
    traces: dict[float, list] = {v: [] for v in values}
    for (row, e_series) in results:
        rows.append(row)
        traces[row["value"]].append(e_series)
    out = Path(args.out) if args.out else Path(f"sweep_{args.param}.csv")
    cols = ["param", "value", "seed", "iterations", "outcome", "terminal_e", "terminal_mae"]
    lines = [",".join(cols)]
    for r in sorted(rows, key=lambda r: (r["value"], r["seed"])):
        lines.append(
            ",".join(
                repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols
            )
        )
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"sweep: {len(rows)} runs -> {out}")
    if args.plots:
        from .report import render_sweep_figure

        for p in render_sweep_figure(rows, traces, args.param, args.plots):
            print(f"  figure {p}")
    return EXIT_OK


def cmd_verify(args) -> int:
    reports = []
    if args.suite in ("lemmas", "all"):
        reports += verify_mod.lemma_suite(args.master_seed, n_trials=args.seeds)
    if args.suite in ("theorems", "all"):
        feeder = loads = None
        if args.feeder_checks:
            from .sim import load_scenario as _ls

            _, feeder, loads = _ls(bundled_path("case1.toml"))
        reports += verify_mod.theorem_suite(
            args.master_seed, n_seeds=args.seeds, feeder=feeder, loads=loads
        )
    if args.suite in ("qp", "all"):
        reports += verify_mod.qp_suite(args.master_seed, n_instances=min(args.seeds, 100))
    any_fail = False
    for rep in reports:
        print(rep.to_json())
        any_fail = any_fail or rep.verdict == "fail"
    return EXIT_VERIFY_FAIL if any_fail else EXIT_OK


def cmd_oracle(args) -> int:
    cfg, feeder, loads = load_scenario(_scenario_path(args.scenario))
    n = feeder.n_der
    u = cfg.vector(cfg.u0, n, "u0")
    h = args.h_step
    u = np.clip(u, feeder.der_p_min + h, feeder.der_p_max - h)
    phi = fd_sensitivity(feeder, u, loads, h_step=h, substation_v=cfg.substation_v)
    lines = ["bus,phi"] + [
        f"{feeder.der_buses[i]},{repr(float(phi[i]))}" for i in range(n)
    ]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"oracle -> {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import render_trace_file

    for p in render_trace_file(args.trace, args.out_dir):
        print(f"figure {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dercoord", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario and export the trace")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--plots", default=None, help="directory for rendered figures")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="parameter study over a seed batch")
    p.add_argument("--scenario", required=True)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--out", default=None)
    p.add_argument("--plots", default=None)
    p.add_argument("--mae", action="store_true", help="grade terminal estimates against the oracle")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers; results merge deterministically")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run the verification suites")
    p.add_argument("--suite", choices=("lemmas", "theorems", "qp", "all"), default="all")
    p.add_argument("--seeds", type=int, default=200)
    p.add_argument("--master-seed", type=int, default=42)
    p.add_argument("--feeder-checks", action="store_true",
                   help="include the bundled-feeder estimation check (slower)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("oracle", help="finite-difference sensitivities for a scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--h-step", type=float, default=0.1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("report", help="render figures from a trace CSV")
    p.add_argument("--trace", required=True)
    p.add_argument("--out-dir", default="figures")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, FeederError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except PowerFlowError as exc:
        print(f"plant error: {exc}", file=sys.stderr)
        return EXIT_PLANT


if __name__ == "__main__":
    raise SystemExit(main())
