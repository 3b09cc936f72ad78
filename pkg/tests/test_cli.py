import csv
import json

import numpy as np
import pytest

from tdcm import experiments as ex
from tdcm.cli import main
from tdcm.model import ConfigError


@pytest.fixture
def pair_dir(tmp_path):
    assert main(["generate", "--k", "2", "--dim", "3", "--n-per-cluster", "30", "--out", str(tmp_path / "d")]) == 0
    return tmp_path / "d" / "pair_000"


def test_generate_layout_and_determinism(tmp_path):
    args = ["generate", "--k", "2", "--num-pairs", "3", "--dim", "3", "--n-per-cluster", "5"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 12
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_generate_zero_perturbation(tmp_path):
    assert main(["generate", "--perturbation", "0", "--dim", "2", "--n-per-cluster", "3",
                 "--out", str(tmp_path)]) == 0
    meta = json.loads((tmp_path / "pair_000" / "target.json").read_text())
    assert meta["perturbation_scale"] == 0.0
    assert meta["source_centers"] == meta["target_centers"]


def test_generate_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["generate", "--out", str(blocker / "sub")]) == 2


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("TDCM_OUTPUT_ROOT", str(tmp_path))
    assert main(["generate", "--dim", "2", "--n-per-cluster", "3", "--out", "rel"]) == 0
    assert (tmp_path / "rel" / "pair_000" / "source.csv").exists()


def test_train_eval_trace_report(pair_dir, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--data", str(pair_dir), "--epochs", "3", "--variant-O", "--num-blocks", "3",
                 "--out", str(run)]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert "source" in line and "target" in line and "diff" in line
    record = json.loads((run / "run.json").read_text())
    assert record["config"]["variant_O"] is True and record["config"]["epochs"] == 3
    assert record["model"] == "tdcm-variant-O"
    assert set(record["diff"]) == {"nmi", "ari", "acc"}

    assert main(["eval", "--checkpoint", str(run / "checkpoint.json"), "--data", str(pair_dir),
                 "--out", str(tmp_path / "ev")]) == 0
    again = json.loads((tmp_path / "ev" / "run.json").read_text())
    assert again["target"] == record["target"]

    trace_args = ["trace-centroids", "--checkpoint", str(run / "checkpoint.json"), "--data", str(pair_dir)]
    assert main(trace_args + ["--out", str(tmp_path / "t1.json")]) == 0
    assert main(trace_args + ["--out", str(tmp_path / "t2.json")]) == 0
    assert (tmp_path / "t1.json").read_bytes() == (tmp_path / "t2.json").read_bytes()
    trace = json.loads((tmp_path / "t1.json").read_text())
    blocks = trace["batches"][0]["blocks"]
    assert len(blocks) == 4
    assert all(len(b["centroids"]) == 2 for b in blocks)
    assert len(trace["projection"]["centroids"]) == 4
    assert len(trace["projection"]["centroids"][0][0]) == 2

    assert main(["baseline", "kmeans", "--data", str(pair_dir), "--out", str(tmp_path / "km")]) == 0
    assert main(["report", str(run), str(tmp_path / "km"), "--out", str(tmp_path / "rep.json")]) == 0
    table = json.loads((tmp_path / "rep.json").read_text())["table"]
    assert set(table) == {"tdcm-variant-O", "kmeans"}


def test_missing_dataset_leaves_no_outputs(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_bad_config_exits_2(pair_dir, tmp_path):
    assert main(["train", "--data", str(pair_dir), "--set", "bogus=1", "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--data", str(pair_dir), "--set", "tau=-1", "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--data", str(pair_dir), "--set", "epochs=abc", "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_unknown_baseline_exits_2(pair_dir, tmp_path, capsys):
    assert main(["baseline", "dbscan", "--data", str(pair_dir), "--out", str(tmp_path / "o")]) == 2
    assert "kmeans" in capsys.readouterr().err


def test_runtime_failure_exits_1(pair_dir, tmp_path):
    bad = tmp_path / "ck.json"
    bad.write_text("{not json")
    assert main(["eval", "--checkpoint", str(bad), "--data", str(pair_dir), "--out", str(tmp_path / "o")]) == 1


def test_sweep_rows_and_echo(tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", "--axis", "L", "--values", "2,4", "--seeds", "2", "--epochs", "1",
                 "--set", "n_per_cluster=10", "--set", "dim=3", "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "sweep.csv").open()))
    assert len(rows) == 4
    assert [r["value"] for r in rows] == ["2", "2", "4", "4"]
    echo = json.loads((out / "sweep_config.json").read_text())
    assert echo["config"]["epochs"] == 1 and echo["values"] == [2, 4]


def test_sweep_empty_values(tmp_path):
    assert main(["sweep", "--axis", "tau", "--values", "", "--out", str(tmp_path / "sw")]) == 2
    assert main(["sweep", "--axis", "tau", "--values", "0.1,-1", "--out", str(tmp_path / "sw")]) == 2
    assert not (tmp_path / "sw").exists()


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("# experiment\nn_clusters = 3\ntau = 0.5\nhidden = 8,8\nvariant_R = true\n")
    cfg = ex.load_config(path, {"tau": "2"})
    assert cfg.train.n_clusters == 3 and cfg.train.tau == 2.0
    assert cfg.train.hidden == (8, 8) and cfg.train.variant_R is True
    back = ex.parse_config_text(ex.format_config(cfg))
    assert ex.ExperimentConfig.from_flat({**ex.ExperimentConfig().to_flat(), **back}) == cfg


def test_config_rejects_unknown_and_malformed(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        ex.parse_config_text("nope = 1\n")
    with pytest.raises(ConfigError, match=":1:"):
        ex.parse_config_text("tau 1\n")
    with pytest.raises(ConfigError):
        ex.parse_config_text("tau = 1\ntau = 2\n")


def test_aggregate_means():
    from tdcm.metrics import MetricsReport
    from tdcm.trainer import RunRecord
    runs = [RunRecord("m", {}, MetricsReport(1.0, 1.0, 1.0), MetricsReport(0.5, 0.4, 0.7)),
            RunRecord("m", {}, MetricsReport(0.8, 0.8, 0.9), MetricsReport(0.7, 0.6, 0.9))]
    row = ex.aggregate(runs)["m"]
    assert row["runs"] == 2
    assert row["diff_nmi"] == pytest.approx(np.mean([0.5, 0.1]))
    assert "m" in ex.format_report({"m": row})
