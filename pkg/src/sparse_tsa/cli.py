"""Command-line driver.

Exit codes: 0 success, 2 configuration error, 3 ingestion error,
4 solver did not converge (outputs are still written).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import inject, inject_multipath, synth_attack, synth_integrity_violation, zero_trace
from .estimators import TsarmData, tsarm_solve
from .io import (
    EKF_COLUMNS,
    PRESETS,
    SOLUTION_COLUMNS,
    TRUTH_COLUMNS,
    ConfigError,
    IngestError,
    emit_results,
    finish_manifest,
    ingest_measurements_csv,
    load_config,
    load_preset,
    read_series_csv,
    save_config,
    start_manifest,
    write_comparison,
    write_ekf_csv,
    write_json,
    write_measurements_csv,
    write_solution_csv,
    write_trace_csv,
    write_truth_csv,
)
from .measurements import residuals
from .scenario import (
    ScenarioConfig,
    build_measurements,
    format_table,
    prior,
    rmse,
    run_ekf,
    run_scenario,
    sweep_lambda,
)

EXIT_OK, EXIT_CONFIG, EXIT_INGEST, EXIT_SOLVER = 0, 2, 3, 4

log = logging.getLogger("sparse_tsa")


def _config(args) -> ScenarioConfig:
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset")
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = load_preset(args.preset)
    else:
        cfg = ScenarioConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "lam", None) is not None:
        try:
            cfg = replace(cfg, solver=replace(cfg.solver, lam=args.lam))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _say(args, text: str) -> None:
    if not args.quiet:
        print(text)


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _out(args)
    manifest = start_manifest(cfg)
    truth, clean, _, _ = build_measurements(cfg)
    written = [out / "config.json", out / "truth.csv", out / "measurements.csv"]
    save_config(cfg, written[0])
    write_truth_csv(cfg.times_s, truth, written[1])
    write_measurements_csv(clean, written[2])
    finish_manifest(manifest, out, written)
    _say(args, f"wrote {len(clean)} epochs to {written[2]}")
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _config(args)
    epochs = ingest_measurements_csv(args.input)
    out = _out(args)
    manifest = start_manifest(cfg, [args.input])
    n = len(epochs)
    dt = cfg.dt_s
    t0 = epochs[0].t_s
    if cfg.attack is not None:
        trace = synth_attack(cfg.attack, n, dt, t0)
    elif cfg.integrity_violation is not None:
        iv = cfg.integrity_violation
        trace = synth_integrity_violation(n, iv.start_s, iv.bias_max_m, iv.ramp_s, dt, t0)
    else:
        trace = zero_trace(n, dt, t0)
    attacked = inject(epochs, trace)
    if cfg.multipath is not None:
        attacked = inject_multipath(attacked, cfg.multipath)
    written = [out / "measurements.csv", out / "attack_trace.csv", out / "config.json"]
    write_measurements_csv(attacked, written[0])
    write_trace_csv(trace, written[1])
    save_config(cfg, written[2])
    finish_manifest(manifest, out, written)
    _say(args, f"injected {'attack' if cfg.attack or cfg.integrity_violation else 'nothing'} into {n} epochs")
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = _config(args)
    epochs = ingest_measurements_csv(args.input)
    out = _out(args)
    manifest = start_manifest(cfg, [args.input])
    t = np.array([ep.t_s for ep in epochs])
    written = [out / "config.json"]
    save_config(cfg, written[0])
    code = EXIT_OK
    if args.estimator in ("ekf", "both"):
        written.append(out / "ekf.csv")
        write_ekf_csv(t, run_ekf(epochs, cfg), written[-1])
    if args.estimator in ("tsarm", "both"):
        res = residuals(epochs, cfg.user_pos)
        x0, _ = prior(res[0], cfg)
        data = TsarmData.from_residuals(res, cfg.process_noise, cfg.dt_s, prior_mean=x0)
        sol = tsarm_solve(None, None, cfg.dt_s, cfg.solver, data=data)
        written += [out / "tsarm.csv", out / "diagnostics.json"]
        write_solution_csv(t, sol, cfg.dt_s, written[-2])
        diag = sol.diagnostics.as_dict()
        diag.pop("elapsed_s")
        write_json(diag, written[-1])
        if not sol.diagnostics.converged:
            log.error("solver did not converge in %d iterations", sol.diagnostics.iterations)
            code = EXIT_SOLVER
    finish_manifest(manifest, out, written)
    _say(args, f"estimates written to {out}")
    return code


def cmd_evaluate(args) -> int:
    truth = read_series_csv(args.truth, TRUTH_COLUMNS)
    rows = []
    for label, path, cols in (("ekf", args.ekf, EKF_COLUMNS), ("tsarm", args.tsarm, SOLUTION_COLUMNS)):
        if path is None:
            continue
        est = read_series_csv(path, cols)
        if len(est["t_s"]) != len(truth["t_s"]) or not np.allclose(est["t_s"], truth["t_s"]):
            raise IngestError(f"{path}: epochs do not match {args.truth}")
        rows.append((label, rmse(est["bias_est_m"], truth["bias_m"])))
    if not rows:
        raise ConfigError("evaluate needs --ekf and/or --tsarm")
    scores = dict(rows)
    table = [
        {
            "scenario": args.name,
            "lambda": float("nan"),
            "ekf_rmse_m": scores.get("ekf", float("nan")),
            "tsarm_rmse_m": scores.get("tsarm", float("nan")),
            "ratio": scores.get("tsarm", float("nan")) / scores.get("ekf", float("nan")),
        }
    ]
    if args.out:
        write_comparison(table, _out(args))
    _say(args, format_table(table))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    try:
        grid = [float(v) for v in args.grid.split(",")]
    except ValueError:
        raise ConfigError(f"bad --grid {args.grid!r}") from None
    out = _out(args)
    manifest = start_manifest(cfg)
    rows = sweep_lambda(cfg, grid, max_workers=args.workers)
    written = [out / "sweep.csv", out / "config.json"]
    with open(written[0], "w") as fh:
        fh.write("lambda,rmse_m,d2_l1,converged,iterations,kkt_residual\n")
        for r in rows:
            fh.write(f"{r.lam:.12g},{r.rmse_m:.12g},{r.d2_l1:.12g},{int(r.converged)},{r.iterations},{r.kkt_residual:.12g}\n")
    save_config(cfg, written[1])
    finish_manifest(manifest, out, written)
    best = min(rows, key=lambda r: (r.rmse_m, r.lam))
    for r in rows:
        _say(args, f"lambda={r.lam:<10.4g} rmse={r.rmse_m:9.3f} m  |D2 s|_1={r.d2_l1:10.4g}  converged={r.converged}")
    _say(args, f"best lambda {best.lam:g} (rmse {best.rmse_m:.3f} m)")
    return EXIT_OK if all(r.converged for r in rows) else EXIT_SOLVER


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _out(args)
    result = run_scenario(cfg)
    emit_results(result, out, name=args.preset or "scenario")
    _say(args, format_table([
        {
            "scenario": args.preset or "scenario",
            "lambda": cfg.solver.lam,
            "ekf_rmse_m": result.rmse_ekf,
            "tsarm_rmse_m": result.rmse_tsarm,
            "ratio": result.rmse_tsarm / result.rmse_ekf if result.rmse_ekf else float("nan"),
        }
    ]))
    return EXIT_OK if result.tsarm.diagnostics.converged else EXIT_SOLVER


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario config JSON")
    common.add_argument("--preset", choices=PRESETS, help="bundled scenario instead of --config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--quiet", action="store_true", help="print nothing on success")

    p = argparse.ArgumentParser(prog="sparse-tsa", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="truth clock and clean measurements")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("attack", parents=[common], help="inject the configured attack into a measurement file")
    s.add_argument("--in", dest="input", required=True, help="measurement CSV")
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("estimate", parents=[common], help="run the EKF and/or the sparse estimator")
    s.add_argument("--in", dest="input", required=True, help="measurement CSV")
    s.add_argument("--estimator", choices=("ekf", "tsarm", "both"), default="both")
    s.add_argument("--lambda", dest="lam", type=float, help="override the penalty weight")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("evaluate", parents=[common], help="RMSE of estimates against a truth file")
    s.add_argument("--truth", required=True)
    s.add_argument("--ekf")
    s.add_argument("--tsarm")
    s.add_argument("--name", default="scenario")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", parents=[common], help="RMSE over a grid of penalty weights")
    s.add_argument("--grid", default="3,10,30,100,300,1000", help="comma-separated penalty weights")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("run", parents=[common], help="full pipeline with a result bundle")
    s.add_argument("--lambda", dest="lam", type=float, help="override the penalty weight")
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IngestError as exc:
        print(f"ingestion error: {exc}", file=sys.stderr)
        return EXIT_INGEST
    except ValueError as exc:
        # component validation on otherwise well-formed inputs, e.g. an attack past the record
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
