import json
import math

import numpy as np
import pandas as pd
import pytest

from racodp.experiments import (
    BENCHMARK_SCHEMA,
    METRICS_SCHEMA,
    SUMMARY_SCHEMA,
    SWEEP_SCHEMA,
    ExperimentConfig,
    load_splits,
    read_csv,
    run_benchmark,
    run_clipping_study,
    run_sweep,
    run_train,
)
from racodp.optimizer import ConfigurationError
from racodp.privacy import ClosedFormAccountant

SCHEMA = {"age": "numeric", "hours": "numeric", "color": "categorical", "sex": "categorical", "y": "label"}


def write_toy_csv(path, n=400, seed=0):
    rng = np.random.default_rng(seed)
    sex = rng.choice(["F", "M"], n)
    age = rng.normal(40, 10, n).round(1)
    hours = rng.normal(40, 5, n).round(1)
    color = rng.choice(["red", "green", "blue"], n)
    score = (age - 40) / 10 + 0.8 * (sex == "M") + rng.normal(0, 0.5, n)
    y = np.where(score > 0.5, "pos", "neg")
    pd.DataFrame({"age": age, "hours": hours, "color": color, "sex": sex, "y": y}).to_csv(path, index=False)
    return path


def toy_config(tmp_path, **overrides):
    write_toy_csv(tmp_path / "toy.csv")
    raw = {
        "dataset": {"path": "toy.csv", "schema": SCHEMA, "sensitive": "sex"},
        "constraint": {"family": "demographic_parity", "gamma": 0.05},
        "privacy": {"epsilon": 3.0, "delta": 1e-5, "steps": 40},
        "hyperparams": {"batch_size": 64, "clip_norm": 1.0, "lr": 0.2, "dual_lr": 0.2, "log_every": 10},
        "seeds": [0, 1],
    }
    for key, value in overrides.items():
        raw[key] = value
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    return ExperimentConfig.load(path)


def schema_line(path):
    with open(path) as fh:
        return fh.readline().strip()


def test_config_validation(tmp_path):
    cfg = toy_config(tmp_path)
    raw = cfg.to_dict()
    with pytest.raises(ConfigurationError, match="unknown"):
        ExperimentConfig.from_dict({**raw, "typo": 1})
    with pytest.raises(ConfigurationError, match="gamma"):
        cfg.replace(**{"constraint.gamma": -0.1})
    with pytest.raises(ConfigurationError, match="privacy"):
        cfg.replace(privacy={"epsilon": 1.0, "sigma": 1.0, "b": 1.0, "steps": 10})
    with pytest.raises(ConfigurationError, match="seed"):
        cfg.replace(seeds=[])
    assert cfg.dataset_path() == tmp_path / "toy.csv"


def test_config_infinity_roundtrip(tmp_path):
    cfg = toy_config(tmp_path, privacy={"sigma": 0.0, "b": "inf", "steps": 5},
                     hyperparams={"batch_size": 64, "clip_norm": "inf"})
    res = run_train(cfg, tmp_path / "out")
    m = json.loads((tmp_path / "out" / "seed_0" / "manifest.json").read_text())
    assert m["non_private"] is True
    assert m["algorithm_inputs"]["clip_norm"] == "inf"
    assert m["certification"]["epsilon"] == "inf"
    assert res["n_seeds"] == 2


def test_train_outputs(tmp_path):
    cfg = toy_config(tmp_path)
    res = run_train(cfg, tmp_path / "out")
    seed_dir = tmp_path / "out" / "seed_0"
    m = json.loads((seed_dir / "manifest.json").read_text())
    assert m["non_private"] is False and m["seed"] == 0
    inputs = m["algorithm_inputs"]
    for key in ("sigma", "b", "clip_norm", "sampling_rate", "steps", "lr", "dual_lr", "lambda_max", "kappa",
                "temperature", "softmax_sign"):
        assert key in inputs
    n = inputs["n_train"]
    certified = ClosedFormAccountant().epsilon(1e-5, inputs["sampling_rate"], 40, inputs["sigma"], inputs["b"],
                                              1.0, n)
    assert m["certification"]["epsilon"] == pytest.approx(certified, rel=1e-12)
    assert certified <= 3.0 * (1 + 1e-12)

    assert schema_line(seed_dir / "metrics.csv") == METRICS_SCHEMA
    rows = read_csv(seed_dir / "metrics.csv")
    assert {r["split"] for r in rows} == {"train", "val", "test"}
    assert sorted({int(r["step"]) for r in rows}) == [10, 20, 30, 40]
    assert len(list((seed_dir / "checkpoints").glob("step_*.json"))) == 4

    assert schema_line(tmp_path / "out" / "summary.csv") == SUMMARY_SCHEMA
    summary = read_csv(tmp_path / "out" / "summary.csv")
    err = np.array([float(r["test_error"]) for r in summary])
    viol = np.array([float(r["test_violation"]) for r in summary])
    assert abs(err.mean() - res["mean_err"]) < 1e-12
    assert abs(err.std(ddof=1) - res["std_err"]) < 1e-12
    assert abs(viol.mean() - res["mean_viol"]) < 1e-12


def test_train_replay_identical(tmp_path):
    cfg = toy_config(tmp_path)
    run_train(cfg, tmp_path / "a")
    run_train(cfg, tmp_path / "b")
    for name in ("summary.csv", "seed_1/metrics.csv"):
        assert (tmp_path / "a" / name).read_text() == (tmp_path / "b" / name).read_text()


def test_train_jobs_match_serial(tmp_path):
    cfg = toy_config(tmp_path)
    run_train(cfg, tmp_path / "serial")
    run_train(cfg.replace(n_jobs=2), tmp_path / "pool")
    assert (tmp_path / "serial" / "summary.csv").read_text() == (tmp_path / "pool" / "summary.csv").read_text()


def test_single_point_sweep_equals_train(tmp_path):
    cfg = toy_config(tmp_path)
    res = run_train(cfg, tmp_path / "train")
    rows = run_sweep(cfg, [0.05], [3.0], tmp_path / "sweep")
    assert len(rows) == 1 and rows[0]["status"] == "ok"
    for key in ("mean_err", "std_err", "mean_viol", "std_viol"):
        assert rows[0][key] == res[key]
    assert schema_line(tmp_path / "sweep" / "sweep.csv") == SWEEP_SCHEMA


def test_sweep_failed_point_recorded(tmp_path):
    cfg = toy_config(tmp_path, seeds=[0])
    rows = run_sweep(cfg, [0.05, -1.0], None, tmp_path / "sweep")
    assert [r["status"] for r in rows] == ["ok", "failed"]
    assert "gamma" in rows[1]["message"]
    saved = read_csv(tmp_path / "sweep" / "sweep.csv")
    assert saved[1]["status"] == "failed" and math.isnan(float(saved[1]["mean_err"]))


def test_sweep_empty_grid(tmp_path):
    with pytest.raises(ConfigurationError):
        run_sweep(toy_config(tmp_path), [], None, tmp_path / "sweep")


def fnr_config(tmp_path):
    return toy_config(tmp_path, constraint={"family": "fnr", "gamma": 0.0, "classes": [0]},
                      privacy={"sigma": 0.0, "b": "inf", "steps": 30}, seeds=[0])


def test_clipping_inf_matches_unclipped(tmp_path):
    cfg = fnr_config(tmp_path)
    rows = run_clipping_study(cfg, [math.inf, 1.0], tmp_path / "clip")
    plain = cfg.replace(**{"hyperparams.clip_norm": "inf"})
    ref = run_train(plain, tmp_path / "plain", select=False)
    assert rows[0]["mean_viol"] == ref["mean_viol"] and rows[0]["mean_err"] == ref["mean_err"]
    assert len(read_csv(tmp_path / "clip" / "clipping.csv")) == 2


def test_clipping_requires_fnr(tmp_path):
    with pytest.raises(ConfigurationError):
        run_clipping_study(toy_config(tmp_path), [1.0], tmp_path / "clip")


def test_benchmark_rows(tmp_path):
    cfg = toy_config(tmp_path)
    rows = run_benchmark(cfg, steps=5, warmup=1, batch_size=32, out_dir=tmp_path / "bench",
                         extra_constraints=[{"family": "fnr", "classes": [0]}])
    assert [r["method"] for r in rows] == ["sgd", "dp-sgd", "raco-dp", "raco-dp[fnr]"]
    assert rows[2]["n_constraints"] == 4 and rows[3]["n_constraints"] == 1
    assert all(r["mean_ms"] > 0 for r in rows)
    assert schema_line(tmp_path / "bench" / "benchmark.csv") == BENCHMARK_SCHEMA


def test_splits_fit_on_train_only(tmp_path):
    splits = load_splits(toy_config(tmp_path))
    age = splits.train.features[:, 0]
    assert abs(age.mean()) < 1e-9
    assert len(splits.train) + len(splits.val) + len(splits.test) == 400
