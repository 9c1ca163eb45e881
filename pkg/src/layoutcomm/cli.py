"""``gemm-bench`` command line entry point."""

from __future__ import annotations

import argparse
import sys

from .errors import LayoutCommError
from .gemm import DATASETS, MAJORS, ConfigError, GemmConfig, parse_dataset, report, run_distributed_gemm, validate

EXIT_OK, EXIT_INVALID, EXIT_CONFIG = 0, 1, 2


def _epilog() -> str:
    sizes = "\n".join(f"  {name:<11} ni={ni} nj={nj} nk={nk}" for name, (ni, nj, nk) in DATASETS.items())
    return ("datasets (SMALL, MEDIUM and LARGE are the Polybench sizes rounded up to multiples of 64):\n"
            + sizes + "\n\nexplicit sizes may be given as NIxNJxNK, e.g. --dataset 32x48x16.\n"
            "--majors all runs the eight C/A/B tile major combinations.")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gemm-bench",
        description="Distributed GEMM over simulated ranks with layout-aware scatter/gather.",
        epilog=_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--dataset", default="MINI", help="dataset name or NIxNJxNK (default: MINI)")
    p.add_argument("--ranks", type=int, default=4, help="number of simulated ranks R (default: 4)")
    p.add_argument("--grid-m", type=int, default=None,
                   help="tile rows M, must divide R (default: largest divisor of R not above sqrt(R))")
    p.add_argument("--majors", default="I/I/J", help="tile majors as C/A/B, or 'all' (default: I/I/J)")
    p.add_argument("--repeats", type=int, default=3, help="timed repetitions (default: 3)")
    p.add_argument("--csv", metavar="PATH", help="write timings as CSV to PATH ('-' for stdout)")
    p.add_argument("--validate", action="store_true", help="compare C bit-exactly with a sequential GEMM")
    p.add_argument("--render-plans", action="store_true", help="print the datatype plans of rank 0")
    p.add_argument("--kernel", choices=("numpy", "traverser"), default="numpy",
                   help="tile kernel: strided numpy views or the element-wise traverser loop")
    p.add_argument("--timeout", type=float, default=30.0, help="deadlock timeout in seconds")
    return p


def _default_grid(r: int) -> int:
    m = 1
    for d in range(1, r + 1):
        if r % d == 0 and d * d <= r:
            m = d
    return m


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        name, sizes = parse_dataset(args.dataset)
        majors = MAJORS if args.majors.lower() == "all" else (args.majors.upper(),)
        grid_m = args.grid_m if args.grid_m is not None else _default_grid(args.ranks)
        cfgs = [GemmConfig(name, args.ranks, grid_m, mj, args.repeats, sizes).validate() for mj in majors]
    except ConfigError as e:
        print(f"gemm-bench: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    timings = []
    failed = False
    for cfg in cfgs:
        try:
            run = run_distributed_gemm(cfg, kernel=args.kernel, with_plans=args.render_plans,
                                       timeout=args.timeout)
        except LayoutCommError as e:
            print(f"gemm-bench: {cfg.majors}: {e}", file=sys.stderr)
            return EXIT_CONFIG
        timings.extend(run.timings)
        if args.render_plans:
            print(f"## {cfg.majors}")
            print(run.plans, end="")
        if args.validate:
            v = validate(cfg, run.c)
            print(f"{cfg.majors}: {v}")
            failed |= not v.ok

    text = report(timings)
    if args.csv == "-" or args.csv is None:
        print(text, end="")
    else:
        with open(args.csv, "w", newline="") as f:
            f.write(text)
    return EXIT_INVALID if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
