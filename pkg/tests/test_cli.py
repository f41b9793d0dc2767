import csv
import json

import pytest

from neuraldmd import harness as H
from neuraldmd.cli import main
from neuraldmd.ndmd import NdmdModel

SHORT_INI = "[train]\nmax_epochs = 10\npatience = 10\n"


@pytest.fixture
def short_cfg(tmp_path):
    p = tmp_path / "short.ini"
    p.write_text(SHORT_INI)
    return str(p)


def _strip(path):
    rows = json.loads(path.read_text())
    for r in rows:
        r.pop("runtime")
    return rows


def test_generate_then_train_matches_experiment(tmp_path, short_cfg, capsys):
    data = tmp_path / "data"
    assert main(["generate", "--preset", "5.2", "--seed", "1", "--out", str(data)]) == 0
    assert (data / "manifest.json").exists()
    assert main(["train", "--data", str(data / "manifest.json"), "--seed", "1",
                 "--config", short_cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["experiment", "--preset", "5.2", "--seed", "1", "--models", "NDMD",
                 "--config", short_cfg, "--out", str(tmp_path / "b")]) == 0
    a, b = _strip(tmp_path / "a" / "results.json"), _strip(tmp_path / "b" / "results.json")
    # the data path enters the config hash, nothing else differs
    for r in a + b:
        r.pop("config_hash")
    assert a == b


def test_eval_reproduces_training_metrics(tmp_path, short_cfg, capsys):
    out = tmp_path / "run"
    assert main(["train", "--preset", "5.2", "--config", short_cfg, "--out", str(out)]) == 0
    assert main(["generate", "--preset", "5.2", "--out", str(tmp_path / "d")]) == 0
    assert main(["eval", "--checkpoint", str(out / "checkpoint.json"),
                 "--data", str(tmp_path / "d" / "manifest.json"),
                 "--out", str(tmp_path / "ev")]) == 0
    metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    rec = H.read_results(out / "results.json")[0]
    assert metrics["test_mse"] == pytest.approx(rec.test_mse, rel=1e-12)
    assert metrics["chamfer"] == pytest.approx(rec.chamfer, rel=1e-12)


def test_experiment_is_bit_reproducible(tmp_path, short_cfg, capsys):
    for name in ("x", "y"):
        assert main(["experiment", "--preset", "5.1", "--seeds", "2", "--config", short_cfg,
                     "--out", str(tmp_path / name)]) == 0
    assert _strip(tmp_path / "x" / "results.json") == _strip(tmp_path / "y" / "results.json")
    assert "| NDMD |" in capsys.readouterr().out


def test_eigenplot_rows(tmp_path, capsys):
    assert main(["experiment", "--preset", "5.1", "--seeds", "2", "--models", "DMD,DMD-rank-r",
                 "--out", str(tmp_path / "r")]) == 0
    csv_path = tmp_path / "eig.csv"
    assert main(["eigenplot", "--results", str(tmp_path / "r"), "--out", str(csv_path)]) == 0
    rows = list(csv.reader(csv_path.open()))
    records = H.read_results(tmp_path / "r" / "results.json")
    assert rows[0] == ["model", "seed", "obs_dim", "real", "imag"]
    assert len(rows) - 1 == sum(len(r.eigenvalues) for r in records)


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["generate", "--out", "x"],
    ["train", "--preset", "5.1", "--model", "ESN", "--out", "x"],
    ["train", "--preset", "5.1", "--model", "KDMD", "--out", "x"],
    ["experiment", "--preset", "5.1", "--models", "LSTM", "--out", "x"],
    ["experiment", "--preset", "7.7", "--out", "x"],
])
def test_usage_errors_exit_one(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1


def test_bad_config_is_a_usage_error(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nwarmup = 3\n")
    assert main(["train", "--preset", "5.1", "--config", str(cfg), "--out", str(tmp_path)]) == 1


def test_runtime_errors_exit_two(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.json"),
                 "--data", str(tmp_path / "nope.json")]) == 2
    # control model on a dataset without inputs
    assert main(["train", "--preset", "5.1", "--model", "NDMDc",
                 "--out", str(tmp_path / "c")]) == 2


def test_hidden_flag_sets_width(tmp_path, short_cfg, capsys):
    assert main(["train", "--preset", "5.1", "--hidden", "16", "--config", short_cfg,
                 "--out", str(tmp_path)]) == 0
    model, _ = NdmdModel.load(tmp_path / "checkpoint.json")
    assert model.encoder.sizes == [10, 16, 16, 2]
