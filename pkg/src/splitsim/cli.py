"""Command-line entry points.

Four verbs share one config format: ``optimize`` plans without training,
``simulate`` runs the full pipeline and writes artifacts, ``calibrate``
estimates the bound's model constants, and ``compare`` races several
policies on the same population. Each verb derives everything from the
config plus overrides, so rerunning a verb rewrites identical files.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .harness import (
    POLICIES,
    compare_policies,
    load_config,
    plan_experiment,
    prepare_experiment,
    render_plan,
    render_summary,
    run_experiment,
    write_artifacts,
)
from .optimizer import InfeasibleError
from .types import ValidationError


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="path to a config file")
    parser.add_argument("--seed", type=int, default=None, help="override system.seed")
    parser.add_argument(
        "--out", default="artifacts", help="directory for output files"
    )
    parser.add_argument(
        "--policy", choices=POLICIES, default=None, help="override policy.name"
    )
    parser.add_argument(
        "--noise-cv",
        type=float,
        default=None,
        help="override policy.noise_cv (planner-side probability noise)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splitsim",
        description="Plan, simulate, and compare split federated training runs.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    optimize = sub.add_parser(
        "optimize", help="plan sampling probabilities and cuts, no training"
    )
    _add_common(optimize)

    simulate = sub.add_parser(
        "simulate", help="run the configured policy and write artifacts"
    )
    _add_common(simulate)

    calibrate = sub.add_parser(
        "calibrate", help="estimate the bound's model constants from data"
    )
    _add_common(calibrate)

    compare = sub.add_parser(
        "compare", help="race several policies on one population"
    )
    _add_common(compare)
    compare.add_argument(
        "--policies",
        nargs="+",
        choices=POLICIES,
        default=list(POLICIES),
        help="policies to race (default: all)",
    )
    return parser


def _write(out_dir: str, name: str, content: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(content)
    return path


def _cmd_optimize(args: argparse.Namespace) -> int:
    config = load_config(
        args.config, seed=args.seed, policy=args.policy, noise_cv=args.noise_cv
    )
    prepared = prepare_experiment(config)
    planned = plan_experiment(prepared)
    path = _write(
        args.out,
        "plan.txt",
        render_plan(config.policy, config.seed, planned.plan, planned.bound_total),
    )
    if prepared.report is not None:
        _write(
            args.out,
            "stats.txt",
            "\n".join(prepared.report.to_config_lines()) + "\n",
        )
    print(f"wrote {path}")
    print(f"policy = {config.policy}")
    print(f"bound_total = {planned.bound_total!r}")
    print(f"round_latency = {planned.round_latency!r}")
    return 0


def _cmd_simulate(args: argparse.Namespace) -> int:
    config = load_config(
        args.config, seed=args.seed, policy=args.policy, noise_cv=args.noise_cv
    )
    result = run_experiment(config)
    paths = write_artifacts(result, args.out)
    for path in paths.values():
        print(f"wrote {path}")
    print(render_summary(result), end="")
    return 0


def _cmd_calibrate(args: argparse.Namespace) -> int:
    config = load_config(
        args.config, seed=args.seed, policy=args.policy, noise_cv=args.noise_cv
    )
    # Always measure, even when the config pins stats for the planner.
    prepared = prepare_experiment(replace(config, stats=None))
    report = prepared.report
    content = "\n".join(report.to_config_lines()) + "\n"
    path = _write(args.out, "stats.txt", content)
    print(f"wrote {path}")
    print(content, end="")
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    config = load_config(
        args.config, seed=args.seed, policy=args.policy, noise_cv=args.noise_cv
    )
    variants = [replace(config, policy=policy) for policy in args.policies]
    text = compare_policies(variants)
    path = _write(args.out, "comparison.txt", text)
    print(f"wrote {path}")
    header_rows = text.split("\n\n", 1)[0]
    print(header_rows)
    return 0


_COMMANDS = {
    "optimize": _cmd_optimize,
    "simulate": _cmd_simulate,
    "calibrate": _cmd_calibrate,
    "compare": _cmd_compare,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.verb](args)
    except (ValidationError, InfeasibleError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
