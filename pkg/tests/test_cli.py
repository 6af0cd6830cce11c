import json

import numpy as np
import pandas as pd
import pytest

from teamfdr.cli import class_labels, main
from teamfdr.ingest import MarkerMatrix, write_matrix
from teamfdr.partition import PartitionSpec, build_partition
from teamfdr.sim import PipelineConfig, get_setting
from teamfdr.team import StoppingRule, run_team


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    rng = np.random.default_rng(42)
    n = 30_000
    v1 = rng.standard_normal((n, 3))
    v2 = rng.standard_normal((n, 3))
    v2[:900, :2] = rng.normal(1.8, 0.2, size=(900, 2))
    m = MarkerMatrix(np.vstack([v1, v2]), np.r_[np.ones(n, int), np.full(n, 2)],
                     ("cd4", "ifng", "il2"))
    path = root / "pooled.csv"
    write_matrix(m, path)
    swapped = root / "swapped.csv"
    write_matrix(m.flipped(), swapped)
    return {"matrix": m, "path": path, "swapped": swapped, "root": root}


def run(*args):
    return main([str(a) for a in args])


def test_run_writes_tables_and_summary(dataset, tmp_path, capsys):
    out = tmp_path / "o"
    assert run("run", dataset["path"], "--dims", "cd4,ifng", "--bins-per-dim", 20,
               "--max-layers", 3, "--out", out) == 0
    table = pd.read_csv(out / "cd4_ifng.leaves.csv")
    assert list(table.columns) == ["leaf_id", "cd4_lo", "cd4_hi", "ifng_lo", "ifng_hi", "n", "X",
                                   "Xtilde", "p_first_tested", "rejected", "rejection_layer"]
    assert len(table) == 400
    summary = json.loads((out / "cd4_ifng.summary.json").read_text())
    assert (summary["N1"], summary["N2"], summary["m"]) == (30_000, 30_000, 400)
    assert summary["theta0"] == 0.5
    assert [r["layer"] for r in summary["layers"]] == [1, 2, 3]

    # the table agrees with a direct library run
    matrix = dataset["matrix"].select(["cd4", "ifng"])
    binning = build_partition(matrix, PartitionSpec("sequential", 20))
    result = run_team(binning, 0.05, StoppingRule(max_layers=3))
    assert table["rejection_layer"].tolist() == result.rejection_layer.tolist()
    assert table["rejected"].sum() == summary["rejected_leaves"] > 0
    assert "[cd4/ifng]" in capsys.readouterr().out


def test_large_grid_size(dataset, tmp_path):
    out = tmp_path / "o"
    big = dataset["root"] / "big.csv"
    rng = np.random.default_rng(0)
    n = 25_000
    m = MarkerMatrix(rng.standard_normal((2 * n, 2)), np.r_[np.ones(n, int), np.full(n, 2)],
                     ("a", "b"))
    write_matrix(m, big)
    assert run("run", big, "--bins-per-dim", 148, "--max-layers", 1, "--out", out) == 0
    assert len(pd.read_csv(out / "a_b.leaves.csv")) == 148 ** 2 == 21_904


def test_run_is_byte_deterministic(dataset, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"o{k}"
        assert run("run", dataset["path"], "--dims", "cd4,ifng", "--dims", "il2",
                   "--bins-per-dim", 12, "--out", out) == 0
        outs.append(out)
    for name in ("cd4_ifng.leaves.csv", "cd4_ifng.summary.json", "il2.leaves.csv",
                 "analyses.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_flip_equals_swapped_input(dataset, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("run", dataset["path"], "--dims", "cd4,ifng", "--bins-per-dim", 15,
               "--flip-cohorts", "--out", a) == 0
    assert run("run", dataset["swapped"], "--dims", "cd4,ifng", "--bins-per-dim", 15,
               "--out", b) == 0
    ta = (a / "cd4_ifng.leaves.csv").read_bytes()
    assert ta == (b / "cd4_ifng.leaves.csv").read_bytes()
    sa = json.loads((a / "cd4_ifng.summary.json").read_text())
    sb = json.loads((b / "cd4_ifng.summary.json").read_text())
    assert sa["flip_cohorts"] and not sb["flip_cohorts"]
    sa.pop("flip_cohorts"), sb.pop("flip_cohorts")
    assert sa == sb


def test_config_file_and_override(dataset, tmp_path):
    cfg = tmp_path / "team.cfg"
    cfg.write_text("# sub-analyses\nalpha = 0.1\nbins_per_dim = 10\ndims = cd4,ifng; il2\n"
                   f"out = {tmp_path / 'fromfile'}\n")
    assert run("run", dataset["path"], "--config", cfg, "--alpha", 0.02) == 0
    summary = json.loads((tmp_path / "fromfile" / "cd4_ifng.summary.json").read_text())
    assert summary["alpha"] == 0.02 and summary["resolution"] == 10
    assert (tmp_path / "fromfile" / "il2.leaves.csv").exists()
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = blue\n")
    assert run("run", dataset["path"], "--config", bad) == 2


def test_two_file_mode(dataset, tmp_path):
    m = dataset["matrix"]
    frame = pd.DataFrame(m.values, columns=m.marker_names)
    frame[m.cohort == 1].to_csv(tmp_path / "c1.csv", index=False, float_format="%.17g")
    frame[m.cohort == 2].to_csv(tmp_path / "c2.csv", index=False, float_format="%.17g")
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    assert run("run", "--cohort1", tmp_path / "c1.csv", "--cohort2", tmp_path / "c2.csv",
               "--dims", "cd4", "--bins-per-dim", 50, "--out", out1) == 0
    assert run("run", dataset["path"], "--dims", "cd4", "--bins-per-dim", 50, "--out", out2) == 0
    assert (out1 / "cd4.leaves.csv").read_bytes() == (out2 / "cd4.leaves.csv").read_bytes()


def test_run_exit_codes(dataset, tmp_path, capsys):
    assert run("run", dataset["path"], "--alpha", 1.5) == 2
    assert "alpha" in capsys.readouterr().err
    assert run("run", tmp_path / "missing.csv") == 3
    bad = tmp_path / "bad.csv"
    bad.write_text("a,cohort\n1,1\nx,2\n")
    assert run("run", bad) == 3
    assert "non-numeric value at row 2, column 'a'" in capsys.readouterr().err
    assert run("run", dataset["path"], "--dims", "nope", "--out", tmp_path / "o") == 3
    assert run("run", dataset["path"], "--scheme", "adaptive", "--bins-per-dim", 0) == 2
    with pytest.raises(SystemExit) as exc:
        run("run", dataset["path"], "--scheme", "hexagonal")
    assert exc.value.code == 2


def test_adaptive_scheme_runs(dataset, tmp_path):
    out = tmp_path / "o"
    assert run("run", dataset["path"], "--dims", "cd4,ifng", "--scheme", "adaptive",
               "--bins-per-dim", 8, "--out", out) == 0
    assert len(pd.read_csv(out / "cd4_ifng.leaves.csv")) == 256


def test_simulate_custom_spec(tmp_path):
    spec = {"name": "toy", "n1": 20000, "n2": 20000,
            "cohort1": {"weights": [1], "means": [[0]], "covs": [[[1]]]},
            "cohort2": {"weights": [0.97, 0.03], "means": [[0], [2]], "covs": [[[1]], [[0.01]]]},
            "bins_per_dim": 256, "max_layers": 3}
    path = tmp_path / "toy.json"
    path.write_text(json.dumps(spec))
    out = tmp_path / "sim"
    assert run("simulate", "--spec", path, "--reps", 2, "--seed", 1, "--out", out) == 0
    per = pd.read_csv(out / "toy.per_rep.csv")
    assert list(per.columns) == ["rep", "layer", "fdp", "false_negatives", "discoveries",
                                 "n_alternatives", "wall_ms"]
    assert sorted(set(per["layer"])) == [1, 2, 3]
    summary = pd.read_csv(out / "toy.summary.csv")
    assert len(summary) == 3


def test_simulate_errors(tmp_path):
    assert run("simulate", "S1", "--reps", 0) == 2
    assert run("simulate", "S7") == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("simulate", "--spec", bad) == 2


def test_simulate_s4_defaults():
    spec, rule = PipelineConfig().resolve(get_setting("S4"))
    assert spec.n_leaves(2) == 8100 and rule.max_layers == 4


def leaf_table(rejected_boxes, name_x="a", name_y="b"):
    rows = []
    k = 0
    for i in range(4):
        for j in range(4):
            k += 1
            rows.append({"leaf_id": k, f"{name_x}_lo": i, f"{name_x}_hi": i + 1,
                         f"{name_y}_lo": j, f"{name_y}_hi": j + 1,
                         "rejected": int((i, j) in rejected_boxes)})
    return pd.DataFrame(rows)


def test_classify_counts_and_bands(tmp_path):
    events = pd.DataFrame({"a": [0.5, 3.5, 1.5, -9.0], "b": [0.5, 3.5, 1.5, 9.0]})
    events.to_csv(tmp_path / "ev.csv", index=False)
    tables = []
    for k in range(6):
        # the first event is in every rejected set, the second in k < 5, the third in k < 2
        boxes = {(0, 0)}
        if k < 5:
            boxes.add((3, 3))
        if k < 2:
            boxes.add((1, 1))
        path = tmp_path / f"t{k}.csv"
        leaf_table(boxes).to_csv(path, index=False)
        tables.append(path)
    out = tmp_path / "cls.csv"
    assert run("classify", "--tables", *tables, "--events", tmp_path / "ev.csv",
               "--out", out) == 0
    got = pd.read_csv(out)
    assert got["count"].tolist() == [6, 5, 2, 0]
    assert got["class"].tolist() == ["polyfunctional", "bifunctional", "nonfunctional",
                                     "nonfunctional"]
    assert got["gap_flag"].tolist() == [0, 0, 1, 0]

    assert run("classify", "--tables", *tables[:3], "--events", tmp_path / "ev.csv",
               "--out", out) == 0
    assert set(pd.read_csv(out)["class"]) == {"unclassified"}


def test_classify_edges_extend_outward(tmp_path):
    # an event beyond the outermost boundary belongs to the outermost leaf
    events = pd.DataFrame({"a": [10.0], "b": [10.0]})
    events.to_csv(tmp_path / "ev.csv", index=False)
    leaf_table({(3, 3)}).to_csv(tmp_path / "t.csv", index=False)
    out = tmp_path / "c.csv"
    assert run("classify", "--tables", tmp_path / "t.csv", "--events", tmp_path / "ev.csv",
               "--out", out) == 0
    assert pd.read_csv(out)["count"].tolist() == [1]


def test_classify_missing_dimension(tmp_path):
    pd.DataFrame({"a": [1.0]}).to_csv(tmp_path / "ev.csv", index=False)
    leaf_table(set()).to_csv(tmp_path / "t.csv", index=False)
    assert run("classify", "--tables", tmp_path / "t.csv", "--events", tmp_path / "ev.csv",
               "--out", tmp_path / "c.csv") == 3


def test_class_bands():
    assert class_labels(np.arange(7), 6) == ["nonfunctional"] * 3 + ["monofunctional"] * 2 + [
        "bifunctional", "polyfunctional"]
