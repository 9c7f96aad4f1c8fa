"""Experiment plumbing: CSV ingestion, the six clustering pipelines, sweeps and reports."""
from __future__ import annotations

import csv
import json
import math
import statistics
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .datagen import Dataset, GridSpec, RandomSpec, ShiftSpec, gen_grid, gen_random, gen_shift
from .gmm import MixtureModel, em_fit_birch_features, em_fit_features, em_fit_points, log_likelihood
from .metrics import MetricForm
from .tree import CFTree, TreeConfig

__all__ = [
    "ALGORITHMS",
    "CSVFormatError",
    "ExperimentReport",
    "RunConfig",
    "RunRecord",
    "Table",
    "ingest_csv",
    "run_algorithm",
    "run_experiment",
    "run_quality",
    "run_scaling",
    "run_stability_sweep",
    "warmup",
]

ALGORITHMS = ("textbook-igmm", "stable-igmm", "stable-dgmm", "birch-igmm", "betula-igmm",
              "betula-dgmm")
RAW_ALGORITHMS = ALGORITHMS[:3]
DEFAULT_SHIFTS = tuple(10.0 ** e for e in range(0, 11))


class CSVFormatError(ValueError):
    """Malformed CSV input; the message names the offending row and column."""


def _parse_cell(text, row, col):
    try:
        value = float(text)
    except ValueError:
        raise CSVFormatError(f"row {row}, column {col}: {text!r} is not a number") from None
    if not math.isfinite(value):
        raise CSVFormatError(f"row {row}, column {col}: non-finite value {text!r}")
    return value


def ingest_csv(path, label_column="auto") -> Dataset:
    """Read points from CSV.

    A first row that does not parse as numbers is treated as a header. With
    ``label_column="auto"`` a header column named ``label`` becomes the label
    vector; pass an explicit column index (or ``None``) to override.
    Row numbers in error messages are 1-based file lines.
    """
    with open(path, newline="") as fh:
        rows = [(i + 1, r) for i, r in enumerate(csv.reader(fh)) if r and any(c.strip() for c in r)]
    if not rows:
        raise CSVFormatError(f"{path}: no data rows")
    header = None
    first = rows[0][1]
    try:
        [float(c) for c in first]
    except ValueError:
        header = [c.strip() for c in first]
        rows = rows[1:]
        if not rows:
            raise CSVFormatError(f"{path}: header but no data rows")
    width = len(header) if header is not None else len(rows[0][1])
    if label_column == "auto":
        label_column = header.index("label") if header is not None and "label" in header else None
    values = np.empty((len(rows), width))
    for r, (line, cells) in enumerate(rows):
        if len(cells) != width:
            raise CSVFormatError(f"row {line}: expected {width} columns, found {len(cells)}")
        for c, cell in enumerate(cells):
            values[r, c] = _parse_cell(cell.strip(), line, c + 1)
    labels = None
    if label_column is not None:
        labels = values[:, label_column].astype(np.int64)
        values = np.delete(values, label_column, axis=1)
    if values.shape[1] == 0:
        raise CSVFormatError(f"{path}: no coordinate columns")
    return Dataset(values, labels)


@dataclass
class RunConfig:
    """One pipeline invocation. ``tree`` is only meaningful for CF-based algorithms."""

    algorithm: str = "betula-igmm"
    k: int = 2
    seed: int = 0
    reps: int = 1
    tree: TreeConfig | None = None
    max_iter: int = 100
    tol: float = 1e-7

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.algorithm in RAW_ALGORITHMS and self.tree is not None:
            raise ValueError(f"{self.algorithm} runs on raw points and takes no tree settings")

    def tree_config(self) -> TreeConfig:
        """Tree settings with the form forced by the algorithm."""
        base = self.tree if self.tree is not None else TreeConfig()
        form = MetricForm.BIRCH if self.algorithm.startswith("birch") else MetricForm.BETULA
        return replace(base, form=form)


@dataclass
class RunRecord:
    algorithm: str
    seed: int
    n: int
    ll_total: float
    ll_per_point: float
    build_time: float
    total_time: float
    leaf_entries: int
    rebuilds: int
    cancellation_flags: int
    floor_flags: int
    iterations: int
    model: MixtureModel | None = field(default=None, repr=False)

    def row(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "model"}


def run_algorithm(X, config: RunConfig, seed: int | None = None) -> RunRecord:
    """Run one pipeline on points ``X`` and score the model on those points."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    seed = config.seed if seed is None else seed
    algo = config.algorithm
    kind = "dgmm" if algo.endswith("dgmm") else "igmm"
    tree = None
    start = time.perf_counter()
    build = 0.0
    if algo in RAW_ALGORITHMS:
        backend = "textbook" if algo.startswith("textbook") else "stable"
        model = em_fit_points(X, config.k, kind=kind, backend=backend, seed=seed,
                              max_iter=config.max_iter, tol=config.tol)
    else:
        tree = CFTree(config.tree_config())
        tree.insert_many(X)
        build = time.perf_counter() - start
        W, A, S = tree.leaf_arrays()
        k = min(config.k, W.shape[0])
        if algo == "birch-igmm":
            model = em_fit_birch_features((W, A, S[:, 0]), k, seed=seed,
                                          max_iter=config.max_iter, tol=config.tol)
        else:
            model = em_fit_features((W, A, S), k, kind=kind, seed=seed,
                                    max_iter=config.max_iter, tol=config.tol)
    total = time.perf_counter() - start
    ll = log_likelihood(model, X)
    tree_flags = tree.cancellation_flags if tree is not None else 0
    return RunRecord(
        algorithm=algo, seed=seed, n=X.shape[0], ll_total=ll.total, ll_per_point=float(ll.per_point),
        build_time=build, total_time=total,
        leaf_entries=len(tree) if tree is not None else X.shape[0],
        rebuilds=tree.rebuild_count if tree is not None else 0,
        cancellation_flags=tree_flags + model.cancellation_flags, floor_flags=model.floor_flags,
        iterations=model.n_iter, model=model)


_NUMERIC = ("ll_total", "ll_per_point", "build_time", "total_time", "leaf_entries", "rebuilds",
            "cancellation_flags", "floor_flags", "iterations")


@dataclass
class ExperimentReport:
    """Per-repetition records plus a mean row (timings also as medians)."""

    records: list

    def rows(self) -> list[dict]:
        out = [dict(rep=i, **r.row()) for i, r in enumerate(self.records)]
        mean = {"rep": "mean", "algorithm": self.records[0].algorithm, "seed": "",
                "n": self.records[0].n}
        for key in _NUMERIC:
            mean[key] = statistics.fmean(getattr(r, key) for r in self.records)
        out.append(mean)
        for row in out:
            row["build_time_median"] = self.median("build_time")
            row["total_time_median"] = self.median("total_time")
        return out

    def mean(self, key: str) -> float:
        return statistics.fmean(getattr(r, key) for r in self.records)

    def median(self, key: str) -> float:
        return statistics.median(getattr(r, key) for r in self.records)

    def table(self) -> "Table":
        rows = self.rows()
        return Table(list(rows[0].keys()), [list(r.values()) for r in rows])


def run_experiment(X, config: RunConfig) -> ExperimentReport:
    """``config.reps`` runs with seeds ``seed, seed + 1, ...``."""
    return ExperimentReport([run_algorithm(X, config, config.seed + r) for r in range(config.reps)])


@dataclass
class Table:
    columns: list
    rows: list

    def to_csv(self) -> str:
        lines = [",".join(self.columns)]
        for row in self.rows:
            lines.append(",".join(format_value(v) for v in row))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps([dict(zip(self.columns, r)) for r in self.rows], indent=1)

    def render(self, fmt: str = "csv") -> str:
        if fmt == "csv":
            return self.to_csv()
        if fmt == "json":
            return self.to_json()
        raise ValueError(f"unknown format {fmt!r}")

    def column(self, name) -> list:
        j = self.columns.index(name)
        return [r[j] for r in self.rows]


def format_value(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def warmup() -> None:
    """Compile every kernel once so that timings exclude JIT compilation."""
    X = np.random.default_rng(0).normal(size=(64, 2))
    for algo in ALGORITHMS:
        run_algorithm(X, RunConfig(algorithm=algo, k=2, max_iter=2))


def run_stability_sweep(shifts=DEFAULT_SHIFTS, algorithms=ALGORITHMS, points_per_cluster=15000,
                        k=2, seed=0, reps=1, tree: TreeConfig | None = None,
                        mode="separation", max_iter=100, tol=1e-7):
    """Per-point log-likelihood of each algorithm as the clusters move away from the origin.

    Returns ``(table, reports)``: the table has one row per shift with an
    ``<algorithm>`` column (mean per-point log-likelihood) and an
    ``<algorithm>:flags`` column; ``reports`` maps ``(shift, algorithm)`` to the
    full :class:`ExperimentReport`.
    """
    columns = ["shift"] + list(algorithms) + [f"{a}:flags" for a in algorithms]
    rows, reports = [], {}
    for shift in shifts:
        data = gen_shift(ShiftSpec(points_per_cluster, float(shift), seed=seed, mode=mode))
        lls, flags = [], []
        for algo in algorithms:
            cfg = RunConfig(algo, k, seed, reps, None if algo in RAW_ALGORITHMS else tree,
                            max_iter, tol)
            rep = run_experiment(data.X, cfg)
            reports[(shift, algo)] = rep
            lls.append(rep.mean("ll_per_point"))
            flags.append(sum(r.cancellation_flags for r in rep.records))
        rows.append([float(shift)] + lls + flags)
    return Table(columns, rows), reports


def _quality_data(name, multiplier, seed) -> Dataset:
    if name == "grid":
        return gen_grid(GridSpec(multiplier=multiplier, seed=seed))
    if name == "random":
        return gen_random(RandomSpec(multiplier=multiplier, seed=seed))
    raise ValueError(f"unknown dataset {name!r}")


def run_quality(datasets=("grid", "random"), multipliers=(0.05, 0.1, 0.2), algorithms=ALGORITHMS,
                k=100, seed=0, reps=1, tree: TreeConfig | None = None, max_iter=100, tol=1e-7):
    """Per-point log-likelihood of each algorithm on the grid and random datasets."""
    columns = ["dataset", "multiplier", "n"] + list(algorithms)
    rows, reports = [], {}
    for name in datasets:
        for mult in multipliers:
            data = _quality_data(name, mult, seed)
            row = [name, float(mult), len(data)]
            for algo in algorithms:
                cfg = RunConfig(algo, k, seed, reps, None if algo in RAW_ALGORITHMS else tree,
                                max_iter, tol)
                rep = run_experiment(data.X, cfg)
                reports[(name, mult, algo)] = rep
                row.append(rep.mean("ll_per_point"))
            rows.append(row)
    return Table(columns, rows), reports


def run_scaling(sizes=(25_000, 50_000, 100_000), max_leaves=(5000,),
                algorithms=("stable-igmm", "birch-igmm", "betula-igmm"), k=100, seed=0, reps=3,
                tree: TreeConfig | None = None, max_iter=100, tol=1e-7):
    """Build and total wall-clock time over data sizes and tree sizes.

    Data are prefixes of one random dataset, so larger runs contain the smaller ones.
    """
    warmup()
    pool = gen_random(RandomSpec(multiplier=max(sizes) / 1e6 * 1.2, seed=seed))
    order = np.random.default_rng(seed).permutation(len(pool))
    columns = ["n", "max_leaves", "algorithm", "build_time_median", "total_time_median",
               "build_time_mean", "total_time_mean", "leaf_entries", "ll_per_point"]
    rows, reports = [], {}
    base = tree if tree is not None else TreeConfig()
    for n in sizes:
        X = pool.X[order[:n]]
        for leaves in max_leaves:
            for algo in algorithms:
                raw = algo in RAW_ALGORITHMS
                if raw and leaves != max_leaves[0]:
                    continue
                cfg = RunConfig(algo, k, seed, reps, None if raw else replace(base, max_leaf_entries=leaves),
                                max_iter, tol)
                rep = run_experiment(X, cfg)
                reports[(n, leaves, algo)] = rep
                rows.append([n, leaves if not raw else "", algo, rep.median("build_time"),
                             rep.median("total_time"), rep.mean("build_time"),
                             rep.mean("total_time"), max(r.leaf_entries for r in rep.records),
                             rep.mean("ll_per_point")])
    return Table(columns, rows), reports
