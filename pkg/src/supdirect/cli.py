"""Command line entry point: ``supdirect run|direct-test|metrics``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import direct, harness


def _cmd_run(args) -> int:
    scenario = harness.load_scenario(args.config)
    result = harness.run_scenario(scenario, args.output)
    sys.stdout.write(f"artifacts written to {result.output_dir}\n")
    sys.stdout.write((result.output_dir / "metrics.txt").read_text())
    return 0


def _cmd_direct_test(args) -> int:
    d_star = None
    if args.iters is None:
        if args.d_star is None:
            raise SystemExit("direct-test: give d* or --iters")
        d_star = args.d_star
    res = harness.direct_static(args.fn, args.n_p, d_star=d_star, iterations=args.iters,
                                p_star=args.p_star, eps=args.eps)
    for row in res.log:
        sys.stdout.write(
            f"k={row['k']} optimal={row['optimal']} samples={row['n_samples']} "
            f"distance={row['distance']!r}{' fallback' if row['fallback'] else ''}\n"
        )
    best = ", ".join(repr(float(c)) for c in res.best_point)
    sys.stdout.write(f"best_point=({best})\n")
    sys.stdout.write(f"best_cost={res.best_cost!r}\n")
    sys.stdout.write(f"distance={res.distance!r}\n")
    return 0


def _cmd_metrics(args) -> int:
    metrics = harness.metrics_from_run_dir(args.run_dir, args.threshold)
    sys.stdout.write(metrics.to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="supdirect", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario from a TOML config")
    p.add_argument("config")
    p.add_argument("-o", "--output", help="output directory (overrides output_dir)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("direct-test", help="DIRECT on a static test cost")
    p.add_argument("fn", choices=harness.STATIC_FUNCTIONS)
    p.add_argument("n_p", type=int)
    p.add_argument("d_star", type=float, nargs="?")
    p.add_argument("--iters", type=int)
    p.add_argument("--p-star", type=float, nargs="+")
    p.add_argument("--eps", type=float, default=direct.DEFAULT_EPS)
    p.set_defaults(func=_cmd_direct_test)

    p = sub.add_parser("metrics", help="recompute metrics of a finished run")
    p.add_argument("run_dir")
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=_cmd_metrics)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (harness.ConfigError, direct.DirectError, FileNotFoundError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
