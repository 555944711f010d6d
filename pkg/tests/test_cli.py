import gzip
import json
from pathlib import Path
import subprocess
import sys

import pytest

from test_experiments import toy_config

from racodp.cli import accountant_report, main
from racodp.datasets import BENCHMARKS, sha256


def test_accountant_json(capsys):
    code = main(["accountant", "--epsilon", "1", "--delta", "1e-5", "--rate", "1", "--sigma", "0.2",
                 "--b", "7", "--n", "1000", "--json"])
    assert code == 0
    rep = json.loads(capsys.readouterr().out)
    first = rep["table"][0]
    assert first["steps"] == 1
    assert first["sigma_min"] == pytest.approx(0.11512925464970229, rel=1e-12)
    assert first["b_min"] == pytest.approx(6.786140424415112, rel=1e-12)
    assert first["feasible"] is True
    assert rep["max_steps"] >= 1


def test_accountant_report_infeasible():
    rep = accountant_report(1.0, 1e-5, 1.0, 0.01, 1.0, 1.0, 1000)
    assert rep["max_steps"] == 0
    assert not any(row["feasible"] for row in rep["table"])


def test_accountant_text_with_batch_size(capsys):
    assert main(["accountant", "--epsilon", "3", "--batch-size", "100", "--n", "10000", "--sigma", "1",
                 "--b", "50", "--steps", "250"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("max steps:") and "250" in out


def test_bad_arguments_exit_2(capsys):
    assert main(["accountant", "--epsilon", "1"]) == 2
    assert main(["nope"]) == 2
    assert main(["sweep", "--config", "x.json", "--gammas", "a,b"]) == 2


def test_missing_config_exit_2(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad)]) == 2
    assert "error" in capsys.readouterr().err


def test_train_exit_0(tmp_path, capsys):
    cfg = toy_config(tmp_path)
    assert main(["train", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "out"),
                 "--seeds", "3"]) == 0
    assert (tmp_path / "out" / "seed_3" / "manifest.json").exists()
    assert "1 runs" in capsys.readouterr().out
    assert cfg.seeds == [0, 1]


def test_run_failure_exit_1(tmp_path, monkeypatch, capsys):
    toy_config(tmp_path)

    def boom(*args, **kwargs):
        raise RuntimeError("diverged")

    monkeypatch.setattr("racodp.cli.run_train", boom)
    assert main(["train", "--config", str(tmp_path / "cfg.json")]) == 1
    assert "diverged" in capsys.readouterr().err


def test_sweep_all_failed_exit_1(tmp_path, capsys):
    toy_config(tmp_path, seeds=[0])
    assert main(["sweep", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "s"),
                 "--gammas", "-1"]) == 1


def test_clipping_and_benchmark_commands(tmp_path, capsys):
    toy_config(tmp_path, constraint={"family": "fnr", "gamma": 0.0, "classes": [0]},
               privacy={"sigma": 0.0, "b": "inf", "steps": 10}, seeds=[0])
    cfg = str(tmp_path / "cfg.json")
    assert main(["clipping-study", "--config", cfg, "--out", str(tmp_path / "c"), "--clip-norms", "1,2"]) == 0
    assert main(["benchmark", "--config", cfg, "--out", str(tmp_path / "b"), "--steps", "3", "--warmup", "1",
                 "--batch-size", "32"]) == 0
    out = capsys.readouterr().out
    assert "C=1 " in out and "raco-dp" in out


def test_fetch_from_raw_dir(tmp_path, capsys):
    src = tmp_path / "raw"
    src.mkdir()
    for name in BENCHMARKS["adult"].files:
        (src / name).write_text("39, State-gov, 77516, Bachelors, 13, Never-married, Adm-clerical, "
                                "Not-in-family, White, Male, 2174, 0, 40, United-States, <=50K\n")
    assert main(["fetch", "adult", "--out", str(tmp_path / "data"), "--raw-dir", str(src)]) == 2
    assert "sha256" in capsys.readouterr().err


RAW_ADULT = Path("/tmp/adult")


@pytest.mark.skipif(not (RAW_ADULT / "adult.data").exists(), reason="no raw Adult files available")
def test_fetch_real_adult(tmp_path):
    assert main(["fetch", "adult", "--out", str(tmp_path), "--raw-dir", str(RAW_ADULT)]) == 0
    with gzip.open(tmp_path / "adult.csv.gz", "rt") as fh:
        rows = fh.read().splitlines()
    assert len(rows) == 48_843 and rows[0].endswith("income")


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "racodp.cli", "accountant", "--epsilon", "1", "--rate", "1",
                           "--sigma", "1", "--b", "10", "--n", "1000", "--json"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["max_steps"] >= 1


def test_sha256_helper(tmp_path):
    p = tmp_path / "f"
    p.write_bytes(b"abc")
    assert sha256(p) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
