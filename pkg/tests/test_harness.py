import csv
import io
import json

import numpy as np
import pytest

from betula import harness
from betula.cli import main
from betula.datagen import ShiftSpec, gen_shift
from betula.harness import (ALGORITHMS, CSVFormatError, RunConfig, ingest_csv, run_algorithm,
                            run_experiment, run_stability_sweep)
from betula.tree import TreeConfig

TIMING = {"build_time", "total_time", "build_time_median", "total_time_median"}


def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


@pytest.fixture(scope="module")
def points():
    return gen_shift(ShiftSpec(points_per_cluster=150, shift=20.0, seed=3)).X


def test_ingest_plain(tmp_path):
    data = ingest_csv(write(tmp_path, "1,2\n3,4\n5,6\n"))
    assert data.X.shape == (3, 2) and data.labels is None
    assert data.X[2].tolist() == [5, 6]


def test_ingest_header_and_labels(tmp_path):
    data = ingest_csv(write(tmp_path, "x1,x2,label\n1.5,2,0\n3,4e2,1\n"))
    assert data.X.tolist() == [[1.5, 2.0], [3.0, 400.0]]
    assert data.labels.tolist() == [0, 1]
    data = ingest_csv(write(tmp_path, "x1,x2,label\n1.5,2,0\n"), label_column=None)
    assert data.X.shape == (1, 3)


def test_ingest_errors_name_the_row(tmp_path):
    with pytest.raises(CSVFormatError, match="row 3"):
        ingest_csv(write(tmp_path, "a,b\n1,2\n3,nan\n"))
    with pytest.raises(CSVFormatError, match="row 2"):
        ingest_csv(write(tmp_path, "1,2\n3,4,5\n"))
    with pytest.raises(CSVFormatError, match="column 1"):
        ingest_csv(write(tmp_path, "1,2\nfoo,4\n"))
    with pytest.raises(CSVFormatError):
        ingest_csv(write(tmp_path, "1,inf\n"))
    with pytest.raises(CSVFormatError):
        ingest_csv(write(tmp_path, ""))
    with pytest.raises(CSVFormatError):
        ingest_csv(write(tmp_path, "x,y\n"))


def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig(algorithm="kmeans")
    with pytest.raises(ValueError):
        RunConfig(algorithm="stable-igmm", tree=TreeConfig())
    with pytest.raises(ValueError):
        RunConfig(reps=0)
    with pytest.raises(ValueError):
        RunConfig(k=0)
    assert RunConfig("birch-igmm", tree=TreeConfig()).tree_config().form.name == "BIRCH"
    assert RunConfig("betula-dgmm").tree_config().form.name == "BETULA"


@pytest.mark.parametrize("algo", ALGORITHMS)
def test_every_algorithm_runs(points, algo):
    rec = run_algorithm(points, RunConfig(algo, k=2, seed=1))
    assert rec.n == len(points)
    assert np.isfinite(rec.ll_total)
    assert rec.ll_per_point == pytest.approx(rec.ll_total / rec.n)
    assert rec.iterations >= 1
    assert rec.model.k == 2


def test_k_capped_by_leaf_count(points):
    tree = TreeConfig(max_leaf_entries=3)
    rec = run_algorithm(points, RunConfig("betula-igmm", k=10, tree=tree))
    assert rec.leaf_entries <= 3 and rec.model.k == rec.leaf_entries


def test_report_rows_and_reproducibility(points):
    cfg = RunConfig("betula-igmm", k=2, seed=5, reps=3)
    a, b = run_experiment(points, cfg), run_experiment(points, cfg)
    rows = a.rows()
    assert len(rows) == 4 and rows[-1]["rep"] == "mean"
    assert [r["seed"] for r in rows[:3]] == [5, 6, 7]
    strip = lambda rs: [{k: v for k, v in r.items() if k not in TIMING} for r in rs]
    assert strip(rows) == strip(b.rows())
    text = a.table().to_csv()
    parsed = list(csv.reader(io.StringIO(text)))
    assert len({len(r) for r in parsed}) == 1 and len(parsed) == 5
    assert float(parsed[1][parsed[0].index("ll_total")]) == rows[0]["ll_total"]
    assert len(json.loads(a.table().to_json())) == 4


def test_stability_sweep_small():
    algos = ["textbook-igmm", "stable-igmm", "betula-igmm"]
    table, reports = run_stability_sweep(shifts=[1.0, 1e8], algorithms=algos,
                                         points_per_cluster=300)
    assert table.column("shift") == [1.0, 1e8]
    assert len(reports) == 6
    textbook, stable, betula = (table.column(a) for a in algos)
    assert abs(betula[1] - stable[1]) < 0.05
    assert table.column("betula-igmm:flags") == [0, 0]
    assert table.column("textbook-igmm:flags")[1] > 0 or textbook[1] < betula[1] - 0.1


def test_quality_rejects_unknown_dataset():
    with pytest.raises(ValueError):
        harness.run_quality(datasets=["spiral"], multipliers=[0.1])


# command line

def run_cli(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_gen_and_fit(tmp_path, capsys):
    data = tmp_path / "shift.csv"
    code, _, _ = run_cli(["gen", "shift", "--shift", "1e6", "--points-per-cluster", "200",
                          "--out", data], capsys)
    assert code == 0
    assert data.read_text().startswith("x1,x2,x3,label\n")
    model, trace = tmp_path / "model.txt", tmp_path / "trace.csv"
    code, out, _ = run_cli(["fit", data, "--algo", "betula-igmm", "--k", "2", "--reps", "2",
                            "--model-out", model, "--trace-out", trace, "--max-leaves", "50"],
                           capsys)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 3 and rows[-1]["rep"] == "mean"
    assert len(model.read_text().strip().splitlines()) == 2
    assert trace.read_text().startswith("iteration,total,per_point\n")


def test_cli_fit_json_is_reproducible(tmp_path, capsys):
    data = tmp_path / "g.csv"
    run_cli(["gen", "grid", "--multiplier", "0.002", "--out", data], capsys)
    outs = []
    for _ in range(2):
        code, out, _ = run_cli(["fit", data, "--algo", "stable-dgmm", "--k", "5", "--format",
                                "json"], capsys)
        assert code == 0
        outs.append([{k: v for k, v in r.items() if k not in TIMING} for r in json.loads(out)])
    assert outs[0] == outs[1]


def test_cli_tree(tmp_path, capsys):
    data = write(tmp_path, "0,0\n0,1\n10,10\n10,11\n")
    code, out, _ = run_cli(["tree", data, "--threshold", "1", "--format", "json"], capsys)
    assert code == 0 and json.loads(out)
    code, out, _ = run_cli(["tree", data, "--dump", "--form", "birch"], capsys)
    assert code == 0 and "L " in out


def test_cli_sweep_stability(capsys):
    code, out, _ = run_cli(["sweep-stability", "--shifts", "1,1e9", "--algos",
                            "stable-igmm,betula-igmm", "--points-per-cluster", "100"], capsys)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [float(r["shift"]) for r in rows] == [1.0, 1e9]


def test_cli_sweep_quality_and_scaling(capsys):
    code, out, _ = run_cli(["sweep-quality", "--datasets", "grid", "--multipliers", "0.001",
                            "--algos", "betula-igmm", "--k", "10"], capsys)
    assert code == 0 and len(out.strip().splitlines()) == 2
    code, out, _ = run_cli(["sweep-scaling", "--sizes", "500,1000", "--leaf-budgets", "50",
                            "--algos", "betula-igmm", "--k", "5", "--reps", "1"], capsys)
    assert code == 0 and len(out.strip().splitlines()) == 3


def test_cli_errors(tmp_path, capsys):
    bad = write(tmp_path, "1,2\n3\n")
    code, _, err = run_cli(["fit", bad], capsys)
    assert code == 1 and "row 2" in err
    code, _, err = run_cli(["fit", tmp_path / "missing.csv"], capsys)
    assert code == 1
    good = write(tmp_path, "1,2\n3,4\n", "good.csv")
    code, _, err = run_cli(["fit", good, "--algo", "stable-igmm", "--max-leaves", "10"], capsys)
    assert code == 1 and "tree" in err
    with pytest.raises(SystemExit):
        main(["sweep-stability", "--algos", "nope"])
    with pytest.raises(SystemExit):
        main(["fit"])
