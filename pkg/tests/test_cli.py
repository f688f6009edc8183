import csv
import json

import numpy as np
import pytest

from wpfs import harness
from wpfs.cli import main
from wpfs.harness import RunResult, aggregate

FAST = ["--folds", "3", "--repeats", "1", "--max-iterations", "30", "--patience", "3", "--nmf-iters", "20",
        "--embedding-size", "5", "--hidden", "8,8,4", "--aux-hidden", "8,8"]


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def data_csv(tmp_path):
    out = tmp_path / "synth"
    assert main(["synth", "--preset", "small", "--seed", "1", "--out", str(out), "--n-samples", "30",
                 "--n-features", "20"]) == 0
    return out / "data.csv"


def test_synth_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["synth", "--preset", "small", "--seed", "7", "--out", str(tmp_path / d)]) == 0
    for f in ("data.csv", "informative.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_cv_writes_outputs_and_is_reproducible(tmp_path, data_csv):
    manifests = []
    for d in ("a", "b"):
        out = tmp_path / d
        assert main(["cv", "--data", str(data_csv), "--out", str(out), "--seed", "2", *FAST]) == 0
        manifests.append(json.loads((out / "manifest.json").read_text()))
        assert read_rows(out / "curves" / "r0_f0.csv")[0] == ["iteration", "train_loss", "val_loss"]
        assert read_rows(out / "importance" / "r0_f1.csv")[0] == ["feature_index", "feature_name", "score", "selected"]
        assert (out / "models" / "r0_f2.wpfs").exists()
    a, b = manifests
    a.pop("timestamps"), b.pop("timestamps")
    assert a == b
    assert len(a["runs"]) == 3 and a["config"]["max_iterations"] == 30


def test_manifests_from_two_methods_aggregate(tmp_path, data_csv):
    table = {}
    for method in ("mlp", "wpfs"):
        out = tmp_path / method
        assert main(["cv", "--data", str(data_csv), "--out", str(out), "--method", method, *FAST]) == 0
        m = json.loads((out / "manifest.json").read_text())
        table[method] = [RunResult(r["repeat"], r["fold"], r["seed"], r["test_balanced_accuracy"], 0, 0, 0, 0, 0, "",
                                   [], np.zeros(0), None, None, {}, 0.0, m["protocol"]["plan_id"])
                         for r in m["runs"]]
    assert set(aggregate({"d": table})["average_rank"]) == {"mlp", "wpfs"}


def test_config_file_and_env_seed(tmp_path, data_csv, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"sparsity_lambda": 0.01, "max_iterations": 5}))
    monkeypatch.setenv("WPFS_SEED", "11")
    out = tmp_path / "o"
    assert main(["cv", "--data", str(data_csv), "--out", str(out), "--config", str(cfg), *FAST]) == 0
    m = json.loads((out / "manifest.json").read_text())
    assert m["config"]["sparsity_lambda"] == 0.01
    assert m["config"]["max_iterations"] == 30  # flag beats file
    assert m["seed"] == 11


def test_missing_label_column_exits_2(tmp_path, data_csv, capsys):
    assert main(["cv", "--data", str(data_csv), "--label-col", "target", "--out", str(tmp_path / "o")]) == 2
    assert "'target'" in capsys.readouterr().err


def test_bad_inputs_exit_2(tmp_path, data_csv, capsys):
    assert main(["embed", "--data", str(data_csv), "--method", "pca", "--out", str(tmp_path / "e")]) == 2
    assert "nmf" in capsys.readouterr().err
    assert main(["sweep", "--data", str(data_csv), "--lambdas", "0,-1", "--out", str(tmp_path / "s")]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("a,label\n1,0\noops,1\n")
    assert main(["cv", "--data", str(bad), "--out", str(tmp_path / "c")]) == 2
    assert "row 3" in capsys.readouterr().err


def test_embed_shape(tmp_path, data_csv):
    out = tmp_path / "e"
    assert main(["embed", "--data", str(data_csv), "--method", "nmf", "--k", "4", "--nmf-iters", "20",
                 "--out", str(out)]) == 0
    rows = read_rows(out / "embedding.csv")
    assert rows[0] == ["feature", "nmf_M4_0", "nmf_M4_1", "nmf_M4_2", "nmf_M4_3"]
    assert len(rows) == 1 + 20 and all(len(r) == 5 for r in rows)


def test_importance_threshold_column(tmp_path, data_csv):
    run = tmp_path / "run"
    assert main(["cv", "--data", str(data_csv), "--out", str(run), *FAST]) == 0
    out = tmp_path / "imp"
    assert main(["importance", "--model", str(run / "models" / "r0_f0.wpfs"), "--threshold", "0.5",
                 "--out", str(out)]) == 0
    rows = read_rows(out / "importance.csv")[1:]
    assert len(rows) == 20
    assert all(int(r[3]) == int(float(r[2]) > 0.5) for r in rows)


def test_sweep_summary(tmp_path, data_csv):
    out = tmp_path / "sw"
    assert main(["sweep", "--data", str(data_csv), "--lambdas", "0,0.01", "--out", str(out), *FAST]) == 0
    rows = read_rows(out / "sweep_summary.csv")
    assert rows[0] == ["lambda", "mean_bacc", "std_bacc", "mean_selected_fraction"]
    assert [float(r[0]) for r in rows[1:]] == [0.0, 0.01]
    hist = read_rows(out / "histogram_lambda_0.csv")
    assert sum(int(r[2]) for r in hist[1:]) == 3 * 20
    assert (out / "lambda_ratio_diagnostic.json").exists()


def test_aborted_run_exits_3(tmp_path, data_csv, monkeypatch):
    monkeypatch.setattr(harness, "_eval_loss", lambda *a: float("nan"))
    out = tmp_path / "o"
    assert main(["cv", "--data", str(data_csv), "--out", str(out), *FAST]) == 3
    m = json.loads((out / "manifest.json").read_text())
    assert m["aborted"] is True and m["runs"] == []


def test_nothing_written_outside_out(tmp_path, data_csv, monkeypatch):
    monkeypatch.chdir(tmp_path)
    before = {p for p in tmp_path.rglob("*")}
    out = tmp_path / "only_here"
    assert main(["cv", "--data", str(data_csv), "--out", str(out), *FAST]) == 0
    new = {p for p in tmp_path.rglob("*")} - before
    assert all(out in p.parents or p == out for p in new)
