"""Command-line front end for the experiment harness.

One subcommand per experiment kind; every run goes through a config file so
results stay reproducible.  Global flags override the seed, thread count, and
output directory without editing the config.  Exit codes: 0 on success, 1 when
a run completes but fails its own standard (selftest check failures, error
budget exceeded), 2 for unusable configs or arguments.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .harness import (
    EXPERIMENT_KINDS,
    ExperimentConfig,
    ExperimentError,
    ExperimentResult,
    load_config,
    run_experiment,
)
from .densities import ConfigError

_USAGE_KINDS = [k for k in EXPERIMENT_KINDS if k != "selftest"]


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, metavar="U64",
                        help="override the base seed")
    common.add_argument("--threads", type=int, default=None, metavar="N",
                        help="override the worker thread count")
    common.add_argument("--out", default=None, metavar="DIR",
                        help="override the output directory")

    parser = argparse.ArgumentParser(
        prog="torspec",
        description="Spectral estimation experiments for weighted Laplacians on the torus.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("selftest", parents=[common],
                       help="run the cross-module invariant suite")
    p.add_argument("--config", default=None, metavar="F",
                   help="optional config file (defaults suffice)")

    for kind in _USAGE_KINDS:
        p = sub.add_parser(kind, parents=[common], help=f"run a {kind} experiment")
        p.add_argument("--config", required=True, metavar="F",
                       help="experiment config file")
    return parser


def _load(args: argparse.Namespace) -> ExperimentConfig:
    if args.config is None:
        config = ExperimentConfig(kind="selftest")
    else:
        config = load_config(args.config)
    if config.kind != args.command:
        raise ConfigError(
            f"config declares kind {config.kind!r} but the {args.command!r} "
            "subcommand was invoked"
        )
    overrides = {}
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError(f"seed must fit in 64 bits, got {args.seed}")
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.out is not None:
        overrides["out_dir"] = args.out
    return dataclasses.replace(config, **overrides) if overrides else config


def _print_selftest(result: ExperimentResult) -> int:
    failures = 0
    for check in result.report["checks"]:
        mark = "ok" if check["passed"] else "FAIL"
        failures += 0 if check["passed"] else 1
        print(f"{mark:4s} {check['name']}: {check['detail']}")
    total = len(result.report["checks"])
    print(f"{total - failures}/{total} checks passed")
    return 0 if failures == 0 else 1


def _print_run(result: ExperimentResult) -> None:
    rep = result.report
    cfg = result.config
    if cfg.kind == "spectrum":
        mean = rep.get("target_cluster_mean")
        tail = f"target cluster mean {mean!r}" if mean is not None else "no admissible target cluster"
        print(f"spectrum: {len(rep['rows'])} eigenvalues, {rep['clusters']} clusters, {tail}")
    elif cfg.kind == "perturbation-bound":
        print(
            f"perturbation-bound: D2/H^-1 ratio max/min {rep['ratio_max_over_min']!r}, "
            f"D2/eps drift {rep['d2_over_eps_drift']!r}"
        )
    else:
        errored = rep["replications_errored"]
        total = rep["replications_total"]
        print(f"{cfg.kind}: {total} replications over n = {cfg.n_grid[0]}..{cfg.n_grid[-1]}, "
              f"{errored} errored")
        fit = rep.get("fit")
        if fit is not None:
            expected = rep["expected"]["slope"]
            print(f"slope {fit['slope']:.4f} +- {fit['stderr']:.4f} "
                  f"(expected {expected:.4f}, r^2 {fit['r_squared']:.4f})")
        elif cfg.kind in ("density-rate", "eigenspace-rate", "eigenvalue-rate", "efficiency"):
            print("rate fit unavailable (degenerate means)")
        paired = rep.get("paired_largest_n")
        if paired is not None:
            print(f"debias gain at n={cfg.n_grid[-1]}: {paired['mean_gain']:.4f} "
                  f"({paired['gain_sigma']:.2f} sigma, {paired['count']} pairs)")
    print("wrote " + " ".join(result.files))


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load(args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        result = run_experiment(config)
    except ExperimentError as exc:
        print(f"error budget exceeded: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if config.kind == "selftest":
        return _print_selftest(result)
    _print_run(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
