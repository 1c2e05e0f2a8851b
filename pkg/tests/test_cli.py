import csv
import subprocess
import sys

import numpy as np
import pytest

from dua.cli import main
from dua.features import load_dataset, write_raw
from dua.model import load_checkpoint

SYNTH = ["--subjects", "3", "--trials", "6", "--t-min", "2", "--t-max", "4", "--seed", "1"]
FAST = ["--scale", "desk", "--epochs", "2", "--batch-size", "4"]


@pytest.fixture(scope="module")
def data3(tmp_path_factory):
    out = tmp_path_factory.mktemp("d3")
    assert main(["synth", "--out", str(out), "--task", "3", *SYNTH]) == 0
    return out


@pytest.fixture(scope="module")
def data2(tmp_path_factory):
    out = tmp_path_factory.mktemp("d2")
    assert main(["synth", "--out", str(out), *SYNTH]) == 0
    return out


def read_report(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# ")
    return list(csv.DictReader(lines[1:]))


def test_synth_reports_probe(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), *SYNTH]) == 0
    assert "linear probe" in capsys.readouterr().out
    assert len(load_dataset(tmp_path)) == 18


def test_cv_writes_one_row_per_subject(data3, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["cv", "--dataset", str(data3), "--out", str(out), "--task", "3", "--seed", "7", *FAST]) == 0
    rows = read_report(out / "report.csv")
    assert [r["fold"] for r in rows] == ["0", "1", "2", "mean", "std"]
    assert {r["task"] for r in rows} == {"3"} and {r["seed"] for r in rows} == {"7"}
    conf = list(csv.DictReader((out / "confusion.csv").open()))
    assert len(conf) == 3 * 9
    assert sum(int(r["count"]) for r in conf) == 18
    assert "mean" in capsys.readouterr().out


def test_cv_fold_logs(data2, tmp_path):
    assert main(["cv", "--dataset", str(data2), "--out", str(tmp_path), "--fold-logs", *FAST]) == 0
    logs = sorted(p.name for p in (tmp_path / "folds").iterdir())
    assert logs == ["S00.csv", "S01.csv", "S02.csv"]


def test_train_then_eval(data2, tmp_path, capsys):
    ckpt, log = tmp_path / "m.ckpt", tmp_path / "log.csv"
    assert main(["train", "--dataset", str(data2), "--variant", "temp_only", "--checkpoint", str(ckpt),
                 "--log", str(log), *FAST]) == 0
    assert "held-out S02" in capsys.readouterr().out
    model, _ = load_checkpoint(ckpt)
    assert model.cfg.variant == "temp_only"
    assert len(log.read_text().splitlines()) == 3
    assert main(["eval", "--checkpoint", str(ckpt), "--dataset", str(data2), "--subject", "S01"]) == 0
    assert "over 6 trials" in capsys.readouterr().out


def test_eval_refuses_mismatched_dimensions(data2, tmp_path, capsys):
    other = tmp_path / "other"
    assert main(["synth", "--out", str(other), "--channels", "8", *SYNTH]) == 0
    ckpt = tmp_path / "m.ckpt"
    assert main(["train", "--dataset", str(data2), "--checkpoint", str(ckpt), *FAST]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ckpt), "--dataset", str(other)]) == 1
    assert "checkpoint expects" in capsys.readouterr().err


def test_gradcheck_prints_verdict(capsys):
    assert main(["gradcheck"]) == 0
    assert capsys.readouterr().out.startswith("PASS")
    # an absurd step turns the finite differences into noise
    assert main(["gradcheck", "--h", "0.5"]) == 1
    assert capsys.readouterr().out.startswith("FAIL")


def test_summary(capsys):
    assert main(["summary"]) == 0
    text = capsys.readouterr().out
    assert "423,343" in text or "423343" in text


def test_extract_from_raw_files(tmp_path, capsys):
    raw, out = tmp_path / "raw", tmp_path / "feat"
    raw.mkdir()
    rng = np.random.default_rng(0)
    for i, rating in enumerate([-10, -5, 0, 5, 10]):
        write_raw(raw / f"S0{i % 2}_trial{i}", rng.normal(size=(600, 4)).astype(np.float32), 200.0,
                  subject=f"S0{i % 2}", rating=rating)
    assert main(["extract", "--raw-dir", str(raw), "--out", str(out)]) == 0
    assert "1 excluded" in capsys.readouterr().out
    ds = load_dataset(out)
    assert len(ds) == 4 and ds.subjects == ["S00", "S01"]
    assert ds.trials[0].features.shape == (3, 4, 10)
    assert sorted(t.label for t in ds.trials) == [0, 0, 1, 1]


def test_config_file_supplies_defaults_and_flags_win(data2, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"dataset = {data2}\nscale = desk\nepochs = 2\nbatch-size = 4\nseed = 3\n")
    out = tmp_path / "a"
    assert main(["cv", "--config", str(cfg), "--out", str(out)]) == 0
    assert {r["seed"] for r in read_report(out / "report.csv")} == {"3"}
    out = tmp_path / "b"
    assert main(["cv", "--config", str(cfg), "--out", str(out), "--seed", "4"]) == 0
    assert {r["seed"] for r in read_report(out / "report.csv")} == {"4"}


def test_config_file_rejects_unknown_keys(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate = 0.1\n")
    assert main(["summary", "--config", str(cfg)]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_bad_invocations_exit_nonzero(tmp_path, capsys):
    assert main(["cv", "--dataset", str(tmp_path), "--bogus"]) == 2
    assert main(["cv", "--dataset", str(tmp_path / "missing")]) == 1
    assert "not found" in capsys.readouterr().err
    assert main([]) != 0


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "dua.cli", "summary", "--scale", "desk"],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0 and "total" in proc.stdout
