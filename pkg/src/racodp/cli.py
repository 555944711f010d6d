"""Command-line entry point.

Exit codes: 0 success, 1 run failure, 2 configuration or I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys

from .constraints import EmptyRateError
from .data import DataError
from .datasets import BENCHMARKS, ChecksumError, fetch
from .experiments import (
    DEFAULT_CLIP_GRID,
    ExperimentConfig,
    run_benchmark,
    run_clipping_study,
    run_sweep,
    run_train,
)
from .optimizer import ConfigurationError
from .privacy import ClosedFormAccountant, InfeasibleBudgetError

EXIT_OK, EXIT_RUN, EXIT_CONFIG = 0, 1, 2
CONFIG_ERRORS = (ConfigurationError, DataError, EmptyRateError, InfeasibleBudgetError, ChecksumError,
                 OSError, KeyError, ValueError)

logger = logging.getLogger("racodp")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _config(args):
    cfg = ExperimentConfig.load(args.config)
    changes = {}
    if getattr(args, "seeds", None):
        changes["seeds"] = [int(s) for s in args.seeds]
    if getattr(args, "jobs", None):
        changes["n_jobs"] = args.jobs
    return cfg.replace(**changes) if changes else cfg


def cmd_fetch(args):
    result = fetch(args.name, args.out, raw_dir=args.raw_dir, timeout=args.timeout)
    print(json.dumps(result, indent=2))


def cmd_train(args):
    cfg = _config(args)
    res = run_train(cfg, args.out)
    print(f"{res['n_seeds']} runs in {res['out_dir']}: test error {res['mean_err']:.4f} "
          f"± {res['std_err']:.4f}, violation {res['mean_viol']:.4f} ± {res['std_viol']:.4f}")


def cmd_sweep(args):
    cfg = _config(args)
    rows = run_sweep(cfg, args.gammas, args.epsilons, args.out)
    for r in rows:
        print(f"eps={r['epsilon']} gamma={r['gamma']} err={r['mean_err']:.4f} viol={r['mean_viol']:.4f} "
              f"[{r['status']}] {r['message']}")
    if all(r["status"] == "failed" for r in rows):
        return EXIT_RUN


def cmd_clipping(args):
    cfg = _config(args)
    for r in run_clipping_study(cfg, args.clip_norms, args.out):
        print(f"C={r['clip_norm']:g} violation={r['mean_viol']:.4f} ± {r['std_viol']:.4f}")


def cmd_benchmark(args):
    cfg = _config(args)
    extra = [{"family": "fnr", "classes": [0]}] if args.compare_single else []
    rows = run_benchmark(cfg, args.steps, args.warmup, args.batch_size, args.out, extra)
    for r in rows:
        print(f"{r['method']:<16} J={r['n_constraints']:<3} {r['mean_ms']:.4f} ± {r['std_ms']:.4f} ms/step")


def accountant_report(epsilon, delta, rate, sigma, b, clip_norm, n, steps=()):
    acc = ClosedFormAccountant()
    try:
        max_t = acc.max_steps(epsilon, delta, rate, sigma, b, clip_norm, n)
    except InfeasibleBudgetError:
        max_t = 0
    grid = sorted({*steps} | ({max_t} if max_t else set()) | {1, 10, 100, 1000})
    table = []
    for T in grid:
        s_min, b_min = acc.calibrate(epsilon, delta, rate, T, clip_norm, n)
        table.append({"steps": T, "sigma_min": s_min, "b_min": b_min,
                      "feasible": bool(sigma >= s_min and b >= b_min)})
    return {"epsilon": epsilon, "delta": delta, "sampling_rate": rate, "sigma": sigma,
            "b": "inf" if b == math.inf else b, "clip_norm": clip_norm, "n": n, "max_steps": max_t,
            "table": table}


def cmd_accountant(args):
    rate = args.rate if args.rate is not None else args.batch_size / args.n
    rep = accountant_report(args.epsilon, args.delta, rate, args.sigma, args.b, args.clip_norm, args.n,
                            [int(t) for t in args.steps])
    if args.json:
        print(json.dumps(rep, indent=2))
        return
    print(f"max steps: {rep['max_steps']}")
    print(f"{'T':>10} {'sigma_min':>12} {'b_min':>12} feasible")
    for row in rep["table"]:
        print(f"{row['steps']:>10d} {row['sigma_min']:>12.6g} {row['b_min']:>12.6g} {row['feasible']}")


def build_parser():
    parser = argparse.ArgumentParser(prog="racodp", description="Private rate-constrained training.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch", help="download and convert a benchmark dataset")
    p.add_argument("name", choices=sorted(BENCHMARKS))
    p.add_argument("--out", default="data")
    p.add_argument("--raw-dir", help="use already-downloaded raw files from this directory")
    p.add_argument("--timeout", type=float, default=60.0)
    p.set_defaults(func=cmd_fetch)

    def experiment(name, func, help_):
        q = sub.add_parser(name, help=help_)
        q.add_argument("--config", required=True)
        q.add_argument("--out", help="output directory (default: config output_dir)")
        q.add_argument("--seeds", nargs="+", help="override config seeds")
        q.add_argument("--jobs", type=int, help="parallel seed processes")
        q.set_defaults(func=func)
        return q

    experiment("train", cmd_train, "train one run per seed")
    q = experiment("sweep", cmd_sweep, "grid over gamma and/or epsilon")
    q.add_argument("--gammas", type=_floats)
    q.add_argument("--epsilons", type=_floats)
    q = experiment("clipping-study", cmd_clipping, "noise-free runs over clipping norms")
    q.add_argument("--clip-norms", type=_floats, default=list(DEFAULT_CLIP_GRID))
    q = experiment("benchmark", cmd_benchmark, "wall time per step")
    q.add_argument("--steps", type=int, default=1000)
    q.add_argument("--warmup", type=int, default=100)
    q.add_argument("--batch-size", type=int, default=512)
    q.add_argument("--compare-single", action="store_true", help="also time a one-constraint config")

    p = sub.add_parser("accountant", help="closed-form privacy calibration")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, default=1e-5)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--rate", type=float)
    g.add_argument("--batch-size", type=int)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--b", type=float, required=True)
    p.add_argument("--clip-norm", type=float, default=1.0)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--steps", nargs="*", default=[], help="extra step counts for the table")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=cmd_accountant)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN
    return code or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
