"""Command-line driver.

Subcommands: simulate (truth + noisy measurement), smooth (run a
configured smoother), fit-pce (basis policy comparison), jacobian-check
(statistical vs finite-difference propagation Jacobians), sweep (a
matrix of scenario cells). Every invocation needs a scenario file; see
the configs directory for complete examples.

Exit codes: 0 success, 2 configuration problem, 3 numerical flags
promoted to failure by --strict.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .experiments import (
    ConfigError,
    basis_study,
    jacobian_check,
    load_config,
    run_experiment,
    run_sweep,
    write_simulation,
)

_COMMANDS = ("simulate", "smooth", "fit-pce", "jacobian-check", "sweep")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcsmooth",
        description="Twin-experiment smoothing studies on the Lorenz-84 system.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} study")
        p.add_argument("--config", required=True, help="scenario TOML file")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--out", default=None, help="output directory (overrides run.out_dir)")
        p.add_argument(
            "--strict",
            action="store_true",
            help="exit with status 3 if any numerical flag was raised",
        )
    return parser


def _gather_flags(payload) -> list[str]:
    if isinstance(payload, dict):
        out = []
        for key, value in payload.items():
            if key == "flags" and isinstance(value, list):
                out.extend(str(v) for v in value)
            else:
                out.extend(_gather_flags(value))
        return out
    if isinstance(payload, list):
        out = []
        for value in payload:
            out.extend(_gather_flags(value))
        return out
    return []


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed

    try:
        config = load_config(args.config, overrides)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2

    out = args.out if args.out is not None else config.out_dir
    if out is None:
        print("config error: an output directory is required (--out or run.out_dir)",
              file=sys.stderr)
        return 2
    out_path = Path(out)

    flags: list[str] = []
    try:
        if args.command == "simulate":
            report = write_simulation(config, out_path)
            print(f"simulate: wrote truth.csv and measurement.csv to {out_path} "
                  f"(config {report['config_hash']})")
        elif args.command == "smooth":
            summary = run_experiment(config, out_path)
            flags = list(summary.flags)
            print(
                f"smooth[{config.smoother}]: {len(summary.times_hours)} report times, "
                f"coverage {summary.coverage_cells:.3f} (cells) / "
                f"{summary.coverage_times:.3f} (times), "
                f"{summary.wall_clock_s:.1f}s, config {summary.config_hash}"
            )
        elif args.command == "fit-pce":
            report = basis_study(config, out_path)
            flags = _gather_flags(report)
            per = ", ".join(
                f"{pol}: {info['rmse']:.4g}" for pol, info in report["policies"].items()
            )
            print(f"fit-pce at t = {report['horizon_hours']:g} h, validation RMSE {per}")
        elif args.command == "jacobian-check":
            report = jacobian_check(config, out_path)
            flags = _gather_flags(report)
            per = ", ".join(
                f"{w}h: proj {info['projection_rel_error']:.3g} / "
                f"bayes {info['bayes_rel_error']:.3g}"
                for w, info in report["windows"].items()
            )
            print(f"jacobian-check rel. Frobenius errors: {per}")
        else:  # sweep
            report = run_sweep(config, out_path)
            flags = _gather_flags(report)
            n_div = sum(
                any(cell["diverged"]) for cell in report["cells"].values()
            )
            print(f"sweep: {len(report['cells'])} cells, {n_div} with divergence flags")
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2

    if flags:
        for f in flags:
            print(f"flag: {f}", file=sys.stderr)
        if args.strict:
            return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
