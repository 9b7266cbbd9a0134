"""Command-line entry point.

    mixnorm run <config> [--seeds ...] [--out dir] [--workers N]
    mixnorm analyze <checkpoint> --layer L [--channels ...] [--k ...] [--out prefix]
    mixnorm plot <csv...> [--window W] --out file.svg
    mixnorm cost [--ks ...] [--batch B] [--out dir]

Exit codes: 0 success, 1 configuration or input error, 2 runtime failure.
The MIXNORM_SEED environment variable replaces the config's seed list.
"""

import argparse
import logging
import sys
from pathlib import Path

from . import analyze as analysis
from .config import ConfigError, load_config, resolve_seeds
from .cost import measure_throughput, retention, write_cost
from .plots import plot_runs
from .runner import CsvFormatError, run_experiment

log = logging.getLogger("mixnorm")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def cmd_run(args):
    try:
        config = load_config(args.config)
        seeds = resolve_seeds(config, args.seeds)
    except ConfigError as err:
        for problem in err.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or config.output_dir)
    log.info("running %d variant(s) x %d seed(s) into %s", len(config.variants), len(seeds), out)
    agg, failed = run_experiment(config, seeds, out, args.workers)
    for row in agg:
        print(f"{row['variant']}: max acc {row['max_acc'][-1]:.4f}, "
              f"steps to {config.reference_variant} max {row['steps_to_ref']}, ratio {row['ratio']:.3f}")
    if failed:
        print(f"failed runs: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"summary: {out / 'summary.md'}")
    return EXIT_OK


def cmd_analyze(args):
    try:
        acts, meta = analysis.activations_from_checkpoint(args.checkpoint, args.layer, args.samples)
        channels = args.channels if args.channels else range(acts.shape[1])
        result = analysis.analyze_distribution(acts, channels, args.k, bins=args.bins, seed=args.seed)
    except (analysis.AnalysisError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    result["checkpoint"] = str(args.checkpoint)
    result["layer"] = args.layer
    result["epoch"] = meta.get("epoch")
    ck = Path(args.checkpoint)
    prefix = Path(args.out) if args.out else ck.with_name(f"{ck.stem}_layer{args.layer}")
    analysis.write_analysis(result, prefix)
    for k in result["k_list"][1:]:
        print(f"K={k} beats K=1 on {analysis.fraction_preferring(result, k):.0%} of channels")
    print(f"wrote {prefix}.json/.csv/.svg")
    return EXIT_OK


def cmd_plot(args):
    try:
        plot_runs(args.csv, args.out, window=args.window)
    except (CsvFormatError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_cost(args):
    rows = measure_throughput(ks=tuple(args.ks), batch=args.batch, steps=args.steps, repeats=args.repeats,
                              subsample=args.subsample)
    write_cost(rows, args.out)
    for k, r in retention(rows).items():
        print(f"K={k}: {r:.0%} of BN iterations/sec")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="mixnorm", description="BN vs mixture normalization experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train every (variant, seed) pair of a config")
    r.add_argument("config")
    r.add_argument("--seeds", type=int, nargs="+")
    r.add_argument("--out")
    r.add_argument("--workers", type=int)
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("analyze", help="fit per-channel densities to a layer's inputs")
    a.add_argument("checkpoint")
    a.add_argument("--layer", type=int, required=True)
    a.add_argument("--channels", type=int, nargs="+")
    a.add_argument("--k", type=int, nargs="+", default=[2, 3])
    a.add_argument("--samples", type=int, default=512)
    a.add_argument("--bins", type=int, default=50)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    pl = sub.add_parser("plot", help="test-error curves with a windowed std band")
    pl.add_argument("csv", nargs="+")
    pl.add_argument("--window", type=float, default=10.0, help="window in epochs")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)

    c = sub.add_parser("cost", help="iterations/sec of BN vs MN on the conv net")
    c.add_argument("--ks", type=int, nargs="+", default=[2, 3, 4, 5])
    c.add_argument("--batch", type=int, default=128)
    c.add_argument("--steps", type=int, default=8)
    c.add_argument("--repeats", type=int, default=3)
    c.add_argument("--subsample", type=float, default=0.25)
    c.add_argument("--out", default="cost")
    c.set_defaults(func=cmd_cost)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as err:  # surface unexpected failures as runtime errors
        log.debug("unhandled", exc_info=True)
        print(f"runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
