"""Command line entry point: ``betula <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager

from . import harness
from .datagen import GridSpec, RandomSpec, ShiftSpec, gen_grid, gen_random, gen_shift, write_csv
from .tree import CFTree, TreeConfig

_TREE_FLAGS = ("distance", "absorption", "form", "max_leaves", "branching", "leaf_capacity",
               "precision", "threshold")


def _floats(text):
    return [float(t) for t in text.split(",") if t]


def _ints(text):
    return [int(float(t)) for t in text.split(",") if t]


def _words(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _add_tree_flags(p, with_form=True):
    g = p.add_argument_group("CF-tree")
    g.add_argument("--distance", choices=["d0", "d1", "d2", "d3", "d4"], default=None,
                   help="descent/split distance (default d4)")
    g.add_argument("--absorption", choices=["r", "d", "e"], default=None,
                   help="absorption criterion (default r)")
    if with_form:
        g.add_argument("--form", choices=["birch", "betula"], default=None,
                       help="feature algebra (default betula)")
    g.add_argument("--max-leaves", type=int, default=None, help="leaf entry budget (default 5000)")
    g.add_argument("--branching", type=int, default=None, help="inner node fan-out (default 7)")
    g.add_argument("--leaf-capacity", type=int, default=None, help="entries per leaf (default 7)")
    g.add_argument("--precision", choices=["single", "double"], default=None,
                   help="storage precision of cluster features (default double)")
    g.add_argument("--threshold", type=float, default=None, help="initial absorption threshold")


def _tree_config(args) -> TreeConfig | None:
    given = {k: getattr(args, k, None) for k in _TREE_FLAGS}
    if all(v is None for v in given.values()):
        return None
    cfg = TreeConfig()
    if given["distance"] is not None:
        cfg.distance = given["distance"]
    if given["absorption"] is not None:
        cfg.absorption = given["absorption"]
    if given["form"] is not None:
        cfg.form = given["form"]
    if given["max_leaves"] is not None:
        cfg.max_leaf_entries = given["max_leaves"]
    if given["branching"] is not None:
        cfg.branching_factor = given["branching"]
    if given["leaf_capacity"] is not None:
        cfg.leaf_capacity = given["leaf_capacity"]
    if given["precision"] is not None:
        cfg.precision = given["precision"]
    if given["threshold"] is not None:
        cfg.initial_threshold = given["threshold"]
    return TreeConfig(**cfg.__dict__)  # re-run validation


def _add_common(p, fmt=True):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-", help="output path ('-' for stdout)")
    if fmt:
        p.add_argument("--format", choices=["csv", "json"], default="csv")


@contextmanager
def _output(path):
    if path == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _add_input(p):
    p.add_argument("input", help="CSV file of points (header optional, 'label' column ignored)")


def cmd_gen(args):
    if args.dataset == "shift":
        data = gen_shift(ShiftSpec(args.points_per_cluster or 15000, args.shift, args.seed,
                                   mode=args.mode))
    elif args.dataset == "grid":
        data = gen_grid(GridSpec(points_per_cluster=args.points_per_cluster or 10000,
                                 multiplier=args.multiplier, seed=args.seed))
    else:
        data = gen_random(RandomSpec(multiplier=args.multiplier, seed=args.seed))
    with _output(args.out) as fh:
        write_csv(fh, data.X, data.labels)


def cmd_tree(args):
    data = harness.ingest_csv(args.input)
    tree = CFTree(_tree_config(args) or TreeConfig())
    tree.insert_many(data.X)
    with _output(args.out) as fh:
        if args.dump:
            fh.write(tree.dump() + "\n")
        elif args.format == "json":
            fh.write(json.dumps(tree.stats().as_dict(), indent=1) + "\n")
        else:
            stats = tree.stats().as_dict()
            fh.write(",".join(stats) + "\n")
            fh.write(",".join(harness.format_value(v) for v in stats.values()) + "\n")


def cmd_fit(args):
    data = harness.ingest_csv(args.input)
    cfg = harness.RunConfig(args.algo, args.k, args.seed, args.reps, _tree_config(args),
                            args.max_iter, args.tol)
    report = harness.run_experiment(data.X, cfg)
    with _output(args.out) as fh:
        fh.write(report.table().render(args.format))
    if args.model_out:
        with open(args.model_out, "w") as fh:
            fh.write(report.records[0].model.to_text() + "\n")
    if args.trace_out:
        with open(args.trace_out, "w") as fh:
            fh.write(report.records[0].model.trace_csv(len(data)))


def _write_table(args, table):
    with _output(args.out) as fh:
        fh.write(table.render(args.format))


def cmd_sweep_stability(args):
    table, _ = harness.run_stability_sweep(
        shifts=args.shifts, algorithms=args.algos, points_per_cluster=args.points_per_cluster,
        k=args.k, seed=args.seed, reps=args.reps, tree=_tree_config(args), mode=args.mode,
        max_iter=args.max_iter)
    _write_table(args, table)


def cmd_sweep_quality(args):
    table, _ = harness.run_quality(
        datasets=args.datasets, multipliers=args.multipliers, algorithms=args.algos, k=args.k,
        seed=args.seed, reps=args.reps, tree=_tree_config(args), max_iter=args.max_iter)
    _write_table(args, table)


def cmd_sweep_scaling(args):
    tree = _tree_config(args)
    table, _ = harness.run_scaling(
        sizes=args.sizes, max_leaves=args.leaf_budgets, algorithms=args.algos, k=args.k,
        seed=args.seed, reps=args.reps, tree=tree, max_iter=args.max_iter)
    _write_table(args, table)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="betula",
                                     description="CF-tree summarization and Gaussian mixture EM")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset as CSV")
    p.add_argument("dataset", choices=["shift", "grid", "random"])
    p.add_argument("--shift", type=float, default=0.0)
    p.add_argument("--mode", choices=["separation", "offset"], default="separation")
    p.add_argument("--points-per-cluster", type=int, default=None)
    p.add_argument("--multiplier", type=float, default=0.1)
    _add_common(p, fmt=False)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("tree", help="build a CF-tree and print its statistics or a dump")
    _add_input(p)
    _add_tree_flags(p)
    p.add_argument("--dump", action="store_true", help="print the indented tree instead of stats")
    _add_common(p)
    p.set_defaults(func=cmd_tree)

    p = sub.add_parser("fit", help="cluster a CSV file and report the fit")
    _add_input(p)
    p.add_argument("--algo", choices=harness.ALGORITHMS, default="betula-igmm")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-7)
    p.add_argument("--model-out", default=None, help="write the first repetition's model here")
    p.add_argument("--trace-out", default=None, help="write its log-likelihood trace (CSV) here")
    _add_tree_flags(p, with_form=False)
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    def sweep(name, helptext, func):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--reps", type=int, default=1)
        p.add_argument("--max-iter", type=int, default=100)
        _add_tree_flags(p, with_form=False)
        _add_common(p)
        p.set_defaults(func=func)
        return p

    p = sweep("sweep-stability", "per-point log-likelihood as clusters move from the origin",
              cmd_sweep_stability)
    p.add_argument("--shifts", type=_floats, default=list(harness.DEFAULT_SHIFTS))
    p.add_argument("--algos", type=_words, default=list(harness.ALGORITHMS))
    p.add_argument("--points-per-cluster", type=int, default=15000)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--mode", choices=["separation", "offset"], default="separation")

    p = sweep("sweep-quality", "log-likelihood on the grid and random datasets", cmd_sweep_quality)
    p.add_argument("--datasets", type=_words, default=["grid", "random"])
    p.add_argument("--multipliers", type=_floats, default=[0.05, 0.1, 0.2])
    p.add_argument("--algos", type=_words, default=list(harness.ALGORITHMS))
    p.add_argument("--k", type=int, default=100)

    p = sweep("sweep-scaling", "build and total time over data and tree sizes", cmd_sweep_scaling)
    p.add_argument("--sizes", type=_ints, default=[25_000, 50_000, 100_000])
    p.add_argument("--leaf-budgets", type=_ints, default=[5000],
                   help="comma separated max leaf entries to compare")
    p.add_argument("--algos", type=_words, default=["stable-igmm", "birch-igmm", "betula-igmm"])
    p.add_argument("--k", type=int, default=100)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("algos",):
        for algo in getattr(args, name, None) or []:
            if algo not in harness.ALGORITHMS:
                parser.error(f"unknown algorithm {algo!r}")
    try:
        args.func(args)
        sys.stdout.flush()
    except BrokenPipeError:
        # reader went away (e.g. piped into head); silence the flush at exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 1
    except (ValueError, OSError) as exc:
        print(f"betula: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
