"""
Main script for the robust log-utility solver
Runs the solve / verify / simulate / conjugate workflows on a YAML problem file
"""
import sys
import os
import logging
import argparse
import traceback
from datetime import datetime

import numpy as np
import pandas as pd

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import CONVENTIONS, DEFAULT_PATHS, DEFAULT_WORKERS, ENV_PREFIX, MODES
from errors import ConfigError, RobustLogError, VerificationError
from problem_config import ProblemConfig, load_config
from analysis.bsde_engine import extract_strategy, solve_value_bsde
from analysis.verify import run_verification_suite
from analysis.outputs import (conjugate_frame, curve_frame, parse_grid, paths_frame, save_csv,
                              strategy_frame, value_report_frame, verification_frame)
from market.model import StrategyProcess, brownian_increments, log_wealth_drift, realized_utility, simulate_wealth

logger = logging.getLogger(__name__)

COMMANDS = ("solve", "verify", "simulate", "conjugate")


def print_header(text: str):
    """Print formatted section header"""
    print("\n" + "="*70)
    print(text.center(70))
    print("="*70 + "\n")


def _env(name: str):
    return os.environ.get(ENV_PREFIX + name.upper())


def _resolve(flag, name: str, cast=str):
    """Flag value, else the ROBUSTLOG_<NAME> environment variable, else None"""
    if flag is not None:
        return flag
    value = _env(name)
    return None if value is None else cast(value)


def load_problem(args) -> ProblemConfig:
    """Load the problem file and apply flag / environment overrides"""
    path = _resolve(args.config, "config")
    if path is None:
        raise ConfigError("config", "no problem file given (--config or ROBUSTLOG_CONFIG)")
    config = load_config(path)
    logger.debug("loaded problem %s (instance %s)", path, config.instance_hash())
    return config.with_overrides(
        steps=_resolve(args.steps, "steps", int),
        mode=_resolve(args.mode, "mode"),
        convention=_resolve(args.convention, "convention"),
        seed=_resolve(args.seed, "seed", int),
        output_dir=_resolve(args.out, "out"),
    )


def _workers(args) -> int:
    return _resolve(args.workers, "workers", int) or DEFAULT_WORKERS


def cmd_solve(config: ProblemConfig, workers: int = DEFAULT_WORKERS) -> int:
    """Solve the value BSDE and write value_report.csv, h_rho_curve.csv, strategy.csv"""
    print_header("SOLVE: VALUE BSDE")
    instance = config.instance_hash()
    print(f"Instance: {instance}  (N={config.steps}, mode={config.mode}, convention={config.convention})")

    bundle = config.build_bundle()
    report = solve_value_bsde(bundle, config.steps, config.mode, workers)

    print(f"\nV0 = {report.V0:.10f}")
    print(f"Y0 = {report.Y0:.10f}")
    print(f"h(0) = {report.h0:.10f}")
    print(f"convention = {report.convention}  (solved on the {report.mode} path)\n")

    save_csv(value_report_frame(report, instance), config.output_dir, "value_report.csv", "value report")
    save_csv(curve_frame(report), config.output_dir, "h_rho_curve.csv", "h / rho curve")
    save_csv(strategy_frame(report), config.output_dir, "strategy.csv", "optimal strategy")
    return 0


def cmd_verify(config: ProblemConfig, workers: int = DEFAULT_WORKERS) -> int:
    """
    Run the verification suite and write verify_report.csv

    Raises:
        VerificationError: if any check fails (after the report is written)
    """
    print_header("VERIFY: OPTIMALITY AND ORACLE CHECKS")
    instance = config.instance_hash()
    print(f"Instance: {instance}  (N={config.steps}, mode={config.mode}, convention={config.convention})\n")

    rows = run_verification_suite(config.build_bundle(), config.steps, config.mode, config.verify,
                                  instance, workers)
    for row in rows:
        mark = "✓" if row.passed else "✗"
        print(f"  {mark} {row.check:<28} value={row.value:<14.6g} tol={row.tolerance:<10.3g} {row.detail}")
    print()
    save_csv(verification_frame(rows), config.output_dir, "verify_report.csv", "verification report")

    failed = [r.check for r in rows if not r.passed]
    if failed:
        raise VerificationError(f"{len(failed)} of {len(rows)} checks failed: {', '.join(failed)}")
    print(f"\n✓ All {len(rows)} checks passed")
    return 0


def _time_indexed(strategy: StrategyProcess) -> StrategyProcess:
    """Lattice strategies are node-constant for deterministic coefficients; keep the first node"""
    if strategy.is_time_indexed:
        return strategy
    pi = np.stack([np.asarray(p).reshape(-1, strategy.num_assets)[0] for p in strategy.pi])
    c = np.array([np.asarray(v).reshape(-1)[0] for v in strategy.c])
    return StrategyProcess.time_indexed(strategy.times, pi, c)


def cmd_simulate(config: ProblemConfig, num_paths: int = DEFAULT_PATHS,
                 workers: int = DEFAULT_WORKERS) -> int:
    """Forward-simulate wealth under the optimal strategy; writes paths.csv and simulation_summary.csv"""
    print_header("SIMULATE: WEALTH UNDER THE OPTIMAL STRATEGY")
    bundle = config.build_bundle()
    report = solve_value_bsde(bundle, config.steps, config.mode, workers)
    strategy = _time_indexed(extract_strategy(report))
    model, weights = bundle.model, bundle.weights

    seed = config.verify.seed
    dt = weights.horizon / strategy.steps
    print(f"Paths: {num_paths}, steps: {strategy.steps}, seed: {seed}")
    increments = brownian_increments(num_paths, strategy.steps, model.brownian_dim, dt, seed)
    wealth = simulate_wealth(model, weights, strategy, increments)

    log_terminal = np.log(wealth[:, -1])
    utility = realized_utility(weights, strategy, wealth)
    pi, c = strategy.pi_array(), strategy.c_array()
    expected = np.log(weights.initial_wealth) + sum(
        float(log_wealth_drift(model, strategy.times[k], pi[k], c[k])) * dt for k in range(strategy.steps))
    std_error = float(np.std(log_terminal, ddof=1) / np.sqrt(num_paths)) if num_paths > 1 else np.nan

    summary = pd.DataFrame([
        {"statistic": name, "mean": float(np.mean(values)), "std": float(np.std(values)),
         "q05": float(np.quantile(values, 0.05)), "q50": float(np.quantile(values, 0.5)),
         "q95": float(np.quantile(values, 0.95))}
        for name, values in (("log_terminal_wealth", log_terminal), ("realized_utility", utility))
    ])
    print(f"\nmean ln X_T = {np.mean(log_terminal):.10f}  (std error {std_error:.3g})")
    print(f"drift prediction = {expected:.10f}")
    print(f"mean realized utility = {np.mean(utility):.10f}  (V0 = {report.V0:.10f})\n")

    save_csv(paths_frame(strategy.times, wealth, pi, c), config.output_dir, "paths.csv", "wealth paths")
    save_csv(summary, config.output_dir, "simulation_summary.csv", "simulation summary")
    return 0


def cmd_conjugate(config: ProblemConfig, grid: str) -> int:
    """Tabulate h* on LO:HI:STEP (per coordinate); writes conjugate.csv"""
    print_header("CONJUGATE: LEGENDRE-FENCHEL TRANSFORM OF THE PENALTY")
    spec = config.penalty
    try:
        points = parse_grid(grid, spec.dim)
    except ValueError as e:
        raise ConfigError("grid", str(e))
    print(f"Penalty: {spec.kind} on R^{spec.dim}, {len(points)} grid points\n")
    df = conjugate_frame(spec, points)
    finite = np.isfinite(df["h_star"].to_numpy())
    print(f"  finite h*: {int(finite.sum())} of {len(df)}")
    print(f"  min Fenchel-Young residual: {np.nanmin(df['fenchel_young_residual'].to_numpy()):.3g}\n")
    save_csv(df, config.output_dir, "conjugate.csv", "conjugate table")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Robust log-utility maximization via quadratic BSDEs"
    )
    parser.add_argument("command", choices=COMMANDS, help="Workflow to run")
    parser.add_argument("--config", help="YAML problem file")
    parser.add_argument("--out", help="Output directory (overrides output.directory)")
    parser.add_argument("--paths", type=int, help=f"Simulated paths (default {DEFAULT_PATHS})")
    parser.add_argument("--seed", type=int, help="Random seed (overrides verify.seed)")
    parser.add_argument("--steps", type=int, help="Time steps N (overrides solver.N)")
    parser.add_argument("--mode", choices=MODES, help="Solver path")
    parser.add_argument("--convention", choices=CONVENTIONS, help="Value generator convention")
    parser.add_argument("--workers", type=int, help="Worker threads (never changes results)")
    parser.add_argument("--grid", default="-2:2:1", help="Conjugate grid LO:HI:STEP")
    parser.add_argument("--log-level", help="Logging level (default WARNING)")
    return parser


def main(argv=None) -> int:
    """Main execution function; returns the exit code"""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=(_resolve(args.log_level, "log_level") or "WARNING").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        start_time = datetime.now()
        config = load_problem(args)
        workers = _workers(args)

        if args.command == "solve":
            code = cmd_solve(config, workers)
        elif args.command == "verify":
            code = cmd_verify(config, workers)
        elif args.command == "simulate":
            code = cmd_simulate(config, _resolve(args.paths, "paths", int) or DEFAULT_PATHS, workers)
        else:
            code = cmd_conjugate(config, args.grid)

        duration = datetime.now() - start_time
        print(f"\nTotal execution time: {duration.total_seconds():.1f} seconds")
        return code

    except RobustLogError as e:
        print(f"\n✗ Error: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        print("\n\n✗ Interrupted by user")
        return 1
    except Exception as e:
        print(f"\n✗ Unexpected error: {e}", file=sys.stderr)
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
