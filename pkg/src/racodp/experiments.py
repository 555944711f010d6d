"""Config-driven runs: training, sweeps, the clipping study and timing.

Every CSV starts with a ``# racodp-<kind>/v<N>`` comment line naming its
schema version.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .constraints import evaluate_dataset
from .data import build_partition, load_csv, poisson_sample, preprocess, split, split_indices
from .datasets import BENCHMARKS
from .estimator import build_constraints, resolve_privacy
from .model import save_checkpoint
from .optimizer import (
    ConfigurationError,
    Hyperparams,
    init_state,
    select_checkpoint,
    sgd_step,
    step,
    train,
)
from .privacy import ClosedFormAccountant, NoiseStream, PrivacyConfig

logger = logging.getLogger(__name__)

METRICS_SCHEMA = "# racodp-metrics/v1"
SUMMARY_SCHEMA = "# racodp-summary/v1"
SWEEP_SCHEMA = "# racodp-sweep/v1"
CLIPPING_SCHEMA = "# racodp-clipping/v1"
BENCHMARK_SCHEMA = "# racodp-benchmark/v1"

DEFAULT_FRACTIONS = (0.6375, 0.1125, 0.25)


def _number(value):
    """JSON cannot hold infinity; accept ``"inf"`` and ``null`` for it."""
    if value is None or (isinstance(value, str) and value.lower() in ("inf", "infinity")):
        return math.inf
    return float(value)


def _json_number(value):
    return "inf" if value == math.inf else value


@dataclass
class ExperimentConfig:
    """Everything one experiment needs, loaded from a single JSON file.

    ``privacy`` holds either a budget ``{"epsilon", "delta", "steps"}`` (or
    ``{"epsilon", "delta", "sigma", "b"}`` to solve for the steps) or
    explicit noise ``{"sigma", "b", "steps"}``.
    """

    dataset: dict
    constraint: dict
    privacy: dict
    hyperparams: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0])
    split_seed: int = 0
    fractions: tuple = DEFAULT_FRACTIONS
    output_dir: str = "runs"
    n_jobs: int = 1
    base_dir: str = "."

    def __post_init__(self):
        if "path" not in self.dataset:
            raise ConfigurationError("dataset.path is required")
        if "schema" not in self.dataset and self.dataset.get("name") not in BENCHMARKS:
            raise ConfigurationError("dataset needs a schema or a known benchmark name")
        gamma = self.constraint.get("gamma", 0.0)
        if np.any(np.asarray(gamma, dtype=float) < 0):
            raise ConfigurationError("gamma must be >= 0")
        keys = set(self.privacy) - {"delta"}
        budget = "epsilon" in keys
        explicit = {"sigma", "b", "steps"} <= keys
        if budget == explicit and not (budget and keys == {"epsilon", "sigma", "b"}):
            raise ConfigurationError(
                "privacy needs exactly one of {epsilon, delta, steps} or {sigma, b, steps}"
            )
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")

    @classmethod
    def from_dict(cls, raw: dict, base_dir=".") -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(raw) - known
        if extra:
            raise ConfigurationError(f"unknown config keys {sorted(extra)}")
        return cls(**{**raw, "base_dir": str(raw.get("base_dir", base_dir))})

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw, base_dir=path.parent)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["fractions"] = list(self.fractions)
        return out

    def dataset_path(self) -> Path:
        p = Path(self.dataset["path"])
        return p if p.is_absolute() else Path(self.base_dir) / p

    def replace(self, **changes) -> "ExperimentConfig":
        raw = copy.deepcopy(self.to_dict())
        for key, value in changes.items():
            section, _, name = key.partition(".")
            if name:
                raw[section][name] = value
            else:
                raw[section] = value
        return ExperimentConfig.from_dict(raw)

    def hp(self) -> Hyperparams:
        h = self.hyperparams
        return Hyperparams(
            lr=h.get("lr", 0.1), dual_lr=h.get("dual_lr", 0.1), lambda_max=h.get("lambda_max", 10.0),
            kappa=h.get("kappa", 1.0), log_every=h.get("log_every", 10), hard_dual=h.get("hard_dual", False),
        )


@dataclass
class Splits:
    train: object
    val: object
    test: object
    constraints: object


def load_splits(cfg: ExperimentConfig) -> Splits:
    """Load, encode (statistics from the train rows only) and partition."""
    ds = cfg.dataset
    bench = BENCHMARKS.get(ds.get("name"))
    schema = ds.get("schema") or bench.schema
    sensitive = ds.get("sensitive", bench.sensitive if bench else None)
    table = load_csv(cfg.dataset_path(), schema, sensitive)
    train_rows, _, _ = split_indices(len(table), cfg.fractions, cfg.split_seed)
    prepared = preprocess(table, fit_rows=train_rows, exclude_sensitive=ds.get("exclude_sensitive", False))

    c = cfg.constraint
    family = c.get("family", "demographic_parity")
    groups = c.get("groups")
    if groups is None and sensitive is not None:
        groups = sorted(prepared.attributes[sensitive].unique())
    h = cfg.hyperparams
    cs = build_constraints(
        family, groups or [], len(prepared.classes), c.get("gamma", 0.0), h.get("temperature", 1.0),
        h.get("softmax_sign", "standard"), c.get("variant", "counterfactual"), c.get("classes"),
    )
    if family == "demographic_parity":
        spec = [{sensitive: g} for g in groups]
    elif family == "equalized_odds":
        spec = [{"label": k, sensitive: g} for k in range(len(prepared.classes)) for g in groups]
    else:
        spec = [{"label": k} for k in range(len(prepared.classes))]
    tr, va, te = split(build_partition(prepared, spec), cfg.fractions, cfg.split_seed)
    return Splits(tr, va, te, cs)


def privacy_for(cfg: ExperimentConfig, n: int) -> PrivacyConfig:
    p = cfg.privacy
    rate = min(1.0, cfg.hyperparams.get("batch_size", 512) / n)
    clip_norm = _number(cfg.hyperparams.get("clip_norm", 1.0))
    sigma = p.get("sigma")
    b = _number(p["b"]) if "b" in p else None
    return resolve_privacy(p.get("epsilon"), p.get("delta", 1e-5), sigma, b, p.get("steps"), rate, clip_norm, n)


def _eval(theta, data, cs):
    pred = np.argmax(data.features @ theta.T, axis=1)
    err = float(np.mean(pred != data.labels))
    if cs is None:
        return err, float("nan"), []
    values = evaluate_dataset(cs, data, theta, "hard")
    return err, float(np.max(values - cs.gammas)), values.tolist()


def _write_csv(path, schema, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(schema + "\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def read_csv(path) -> list[dict]:
    """Rows of a harness CSV, skipping the schema comment line."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def manifest(cfg: ExperimentConfig, seed: int, privacy: PrivacyConfig, n: int) -> dict:
    """Audit record with every algorithm input, defaults included."""
    hp = cfg.hp()
    eps = ClosedFormAccountant().epsilon(
        privacy.delta, privacy.sampling_rate, privacy.steps, privacy.sigma, privacy.b, privacy.clip_norm, n
    )
    h = cfg.hyperparams
    return {
        "config": cfg.to_dict(),
        "seed": seed,
        "non_private": not privacy.certified,
        "algorithm_inputs": {
            "n_train": n,
            "sampling_rate": privacy.sampling_rate,
            "batch_size": h.get("batch_size", 512),
            "steps": privacy.steps,
            "sigma": privacy.sigma,
            "b": _json_number(privacy.b),
            "clip_norm": _json_number(privacy.clip_norm),
            "lr": hp.lr,
            "dual_lr": hp.dual_lr,
            "lambda_max": hp.lambda_max,
            "kappa": hp.kappa,
            "temperature": h.get("temperature", 1.0),
            "softmax_sign": h.get("softmax_sign", "standard"),
            "hard_dual": hp.hard_dual,
            "log_every": hp.log_every,
        },
        "certification": {
            "accountant": ClosedFormAccountant.name,
            "epsilon": _json_number(eps),
            "delta": privacy.delta,
            "target_epsilon": _json_number(privacy.epsilon),
            "steps": privacy.steps,
            "sigma": privacy.sigma,
            "b": _json_number(privacy.b),
        },
    }


def _train_seed(cfg: ExperimentConfig, splits: Splits, seed: int, out: Path, select: bool = True) -> dict:
    tr, va, te, cs = splits.train, splits.val, splits.test, splits.constraints
    privacy = privacy_for(cfg, len(tr))
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest(cfg, seed, privacy, len(tr)), indent=2))

    state = train(tr, cs, privacy, cfg.hp(), seed=seed, val=va)
    rows = []
    ckdir = out / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    for ck in state.checkpoints:
        save_checkpoint(ck.theta, ckdir / f"step_{ck.step:06d}.json", step=ck.step, lam=ck.lam.tolist())
        lam = json.dumps(ck.lam.tolist())
        eps = ck.metrics["epsilon"]
        for name, data in (("train", tr), ("val", va), ("test", te)):
            err, viol, _ = _eval(ck.theta, data, cs)
            rows.append([ck.step, name, err, viol, lam, eps])
    _write_csv(out / "metrics.csv", METRICS_SCHEMA,
               ["step", "split", "error", "violation", "lambda", "epsilon"], rows)

    if select and state.checkpoints:
        chosen = select_checkpoint(state.checkpoints)
        theta, chosen_step = chosen.theta, chosen.step
    else:
        theta, chosen_step = state.theta, state.step
    err, viol, values = _eval(theta, te, cs)
    return {"seed": seed, "selected_step": chosen_step, "test_error": err, "test_violation": viol,
            "test_constraint_values": values, "epsilon": state.history[-1]["epsilon"] if state.history else None}


def run_train(cfg: ExperimentConfig, out_dir=None, splits: Splits | None = None, select: bool = True) -> dict:
    """One run per seed under ``out_dir/seed_<s>``; writes ``summary.csv``."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = splits or load_splits(cfg)
    if cfg.n_jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(cfg.n_jobs) as pool:
            futures = [pool.submit(_train_seed, cfg, splits, s, out / f"seed_{s}", select) for s in cfg.seeds]
            results = [f.result() for f in futures]
    else:
        results = [_train_seed(cfg, splits, s, out / f"seed_{s}", select) for s in cfg.seeds]
    _write_csv(out / "summary.csv", SUMMARY_SCHEMA,
               ["seed", "selected_step", "test_error", "test_violation", "epsilon"],
               [[r["seed"], r["selected_step"], r["test_error"], r["test_violation"], r["epsilon"]]
                for r in results])
    return {"out_dir": str(out), "runs": results, **aggregate(results)}


def aggregate(results: list[dict]) -> dict:
    """Mean and sample standard deviation (ddof=1; 0 for a single seed)."""
    err = np.array([r["test_error"] for r in results], dtype=float)
    viol = np.array([r["test_violation"] for r in results], dtype=float)
    ddof = 1 if len(results) > 1 else 0
    return {"mean_err": float(err.mean()), "std_err": float(err.std(ddof=ddof)),
            "mean_viol": float(viol.mean()), "std_viol": float(viol.std(ddof=ddof)), "n_seeds": len(results)}


SWEEP_COLUMNS = ["epsilon", "gamma", "mean_err", "std_err", "mean_viol", "std_viol", "n_seeds", "status", "message"]


def run_sweep(cfg: ExperimentConfig, gammas=None, epsilons=None, out_dir=None) -> list[dict]:
    """Grid over ``gamma`` and/or ``epsilon``; failed points become failed rows."""
    gammas = list(gammas) if gammas is not None else [cfg.constraint.get("gamma", 0.0)]
    epsilons = list(epsilons) if epsilons is not None else [cfg.privacy.get("epsilon")]
    if not gammas or not epsilons:
        raise ConfigurationError("sweep grid is empty")
    out = Path(out_dir or cfg.output_dir)
    rows = []
    for eps in epsilons:
        for gamma in gammas:
            row = {"epsilon": eps, "gamma": gamma}
            try:
                point = cfg.replace(**{"constraint.gamma": gamma})
                if eps is not None:
                    point = point.replace(**{"privacy.epsilon": eps})
                res = run_train(point, out / f"eps_{eps}_gamma_{gamma}")
                row.update({k: res[k] for k in ("mean_err", "std_err", "mean_viol", "std_viol", "n_seeds")})
                row.update(status="ok", message="")
            except Exception as exc:  # noqa: BLE001 - a failing point must not stop the sweep
                logger.exception("sweep point eps=%s gamma=%s failed", eps, gamma)
                row.update({k: float("nan") for k in ("mean_err", "std_err", "mean_viol", "std_viol")})
                row.update(n_seeds=0, status="failed", message=f"{type(exc).__name__}: {exc}")
            rows.append(row)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "sweep.csv", SWEEP_SCHEMA, SWEEP_COLUMNS, [[r[c] for c in SWEEP_COLUMNS] for r in rows])
    return rows


DEFAULT_CLIP_GRID = (1.0, 2.0, 5.0, 12.5, 25.0)


def run_clipping_study(cfg: ExperimentConfig, clip_norms=DEFAULT_CLIP_GRID, out_dir=None) -> list[dict]:
    """Final-iterate hard violation on the test split per clipping norm, noise off."""
    if cfg.constraint.get("family") != "fnr" or np.any(np.asarray(cfg.constraint.get("gamma", 0.0)) != 0):
        raise ConfigurationError("the clipping study expects an FNR constraint with gamma = 0")
    steps = cfg.privacy.get("steps")
    if steps is None:
        raise ConfigurationError("the clipping study needs privacy.steps")
    base = cfg.replace(privacy={"sigma": 0.0, "b": "inf", "steps": steps, "delta": cfg.privacy.get("delta", 1e-5)})
    splits = load_splits(base)
    out = Path(out_dir or cfg.output_dir)
    rows = []
    for C in clip_norms:
        point = base.replace(**{"hyperparams.clip_norm": _json_number(float(C))})
        res = run_train(point, out / f"clip_{C}", splits=splits, select=False)
        rows.append({"clip_norm": float(C), **{k: res[k] for k in ("mean_viol", "std_viol", "mean_err", "n_seeds")}})
    _write_csv(out / "clipping.csv", CLIPPING_SCHEMA, ["clip_norm", "mean_viol", "std_viol", "mean_err", "n_seeds"],
               [[r["clip_norm"], r["mean_viol"], r["std_viol"], r["mean_err"], r["n_seeds"]] for r in rows])
    return rows


def _time_steps(fn, steps, warmup):
    for t in range(warmup):
        fn(t)
    times = np.empty(steps)
    for t in range(steps):
        start = time.perf_counter()
        fn(warmup + t)
        times[t] = time.perf_counter() - start
    return times


def run_benchmark(cfg: ExperimentConfig, steps: int = 1000, warmup: int = 100, batch_size: int = 512,
                  out_dir=None, extra_constraints=()) -> list[dict]:
    """Mean and std wall time per step of SGD, DP-SGD and RaCO-DP.

    All methods share the data, batch size and noise scales; DP-SGD is the
    same step with no constraints. ``extra_constraints`` adds RaCO-DP rows
    for other constraint configs (dicts merged into ``cfg.constraint``).
    """
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    cfg = cfg.replace(**{"hyperparams.batch_size": batch_size})
    splits = load_splits(cfg)
    tr = splits.train
    n = len(tr)
    privacy = privacy_for(cfg, n)
    if not privacy.certified:
        privacy = PrivacyConfig(1.0, 1.0, privacy.clip_norm if privacy.clip_norm < math.inf else 1.0,
                                privacy.sampling_rate, privacy.steps, privacy.delta)
    hp = cfg.hp()
    stream = NoiseStream(0)
    lr = hp.lr

    def runner(data, cs):
        state = init_state(data, cs, hp)
        return lambda t: step(state, data, cs, privacy, hp, stream, t)

    theta = np.zeros((tr.n_classes, tr.n_features))

    def sgd(t):
        nonlocal theta
        batch = poisson_sample(n, privacy.sampling_rate, stream.generator(t, "sample"))
        theta = sgd_step(theta, tr, batch, lr)

    methods = [("sgd", 0, sgd), ("dp-sgd", 0, runner(tr, None)),
               ("raco-dp", len(splits.constraints or ()), runner(tr, splits.constraints))]
    for extra in extra_constraints:
        sub = load_splits(cfg.replace(constraint={**cfg.constraint, **extra}))
        methods.append((f"raco-dp[{extra.get('family', cfg.constraint.get('family'))}]",
                        len(sub.constraints), runner(sub.train, sub.constraints)))

    rows = []
    for name, J, fn in methods:
        times = _time_steps(fn, steps, warmup) * 1e3
        rows.append({"method": name, "n_constraints": J, "mean_ms": float(times.mean()),
                     "std_ms": float(times.std(ddof=1)) if steps > 1 else 0.0, "steps": steps,
                     "batch_size": batch_size})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = ["method", "n_constraints", "mean_ms", "std_ms", "steps", "batch_size"]
        _write_csv(out / "benchmark.csv", BENCHMARK_SCHEMA, cols, [[r[c] for c in cols] for r in rows])
    return rows
