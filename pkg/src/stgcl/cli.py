"""Command-line driver: synth, train, eval, report, gradcheck.

Human-readable summaries go to stdout; every artifact goes to files. Failures
print one JSON line on stderr and exit with 2 (config), 3 (data) or 4
(numeric).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .augment import AugmentError
from .config import ConfigError, ExperimentConfig, array_digest, build_data, parse_config
from .contrast import ContrastError
from .data import DataError, synth_generate, write_stgs
from .graph import GraphError, write_edge_list
from .gradcheck import TOLERANCE, run_gradcheck
from .model import ModelError, load_checkpoint
from .tensor import NumericError, ShapeError, TapeError
from .train import (RunReport, TrainError, format_mean_std, metrics, predict, run,
                    welch_t_test)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "STGCL_THREADS"


def classify(exc: BaseException) -> tuple[int, str]:
    # numeric checks first: ShapeError is also a ValueError
    if isinstance(exc, (NumericError, ShapeError, TapeError, FloatingPointError)):
        return EXIT_NUMERIC, "numeric"
    if isinstance(exc, (DataError, GraphError, OSError, EOFError)):
        return EXIT_DATA, "data"
    if isinstance(exc, (ConfigError, TrainError, ModelError, AugmentError, ContrastError, ValueError)):
        return EXIT_CONFIG, "config"
    return EXIT_NUMERIC, "internal"


def _fail(code: int, kind: str, message: str) -> int:
    line = json.dumps({"error": kind, "code": code, "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)
    return code


# -- synth ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = synth_generate(args.nodes, args.days, args.steps_per_day, args.seed)
    write_stgs(out / "series.stgs", ds.series, ds.steps_per_day, ds.interval_minutes)
    write_edge_list(out / "edges.csv", ds.distances)
    (out / "meta.json").write_text(json.dumps(ds.meta | {"version": __version__}, indent=2))
    print(f"wrote {out / 'series.stgs'}: {ds.num_steps} steps x {ds.num_nodes} nodes, "
          f"{ds.steps_per_day} steps/day ({ds.interval_minutes} min)")
    print(f"wrote {out / 'edges.csv'}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------

def _resolve_paths(raw: dict, base: Path) -> dict:
    raw = json.loads(json.dumps(raw))
    ds = raw.get("dataset", {})
    if isinstance(ds, dict) and ds.get("path"):
        ds["path"] = str((base / ds["path"]).resolve())
    gr = raw.get("graph", {})
    if isinstance(gr, dict) and gr.get("edges"):
        gr["edges"] = str((base / gr["edges"]).resolve())
    return raw


def _experiment(args) -> ExperimentConfig:
    if args.config:
        path = Path(args.config)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError([f"{path}: {exc}"]) from None
        raw = _resolve_paths(raw, path.parent)
    else:
        raw = {}
    train = dict(raw.get("train", {})) if isinstance(raw.get("train", {}), dict) else raw.get("train")
    if isinstance(train, dict):
        if args.scheme:
            train["scheme"] = args.scheme
        if args.contrast:
            train["level"] = args.contrast
        if args.epochs is not None:
            train["epochs"] = args.epochs
        raw["train"] = train
    if args.out:
        raw["output_dir"] = args.out
    return parse_config(raw)


def worker_count(jobs: int) -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        cap = os.cpu_count() or 1
    else:
        try:
            cap = int(raw)
        except ValueError:
            raise ConfigError([f"{THREADS_ENV}: expected a positive integer, got {raw!r}"]) from None
        if cap < 1:
            raise ConfigError([f"{THREADS_ENV}: expected a positive integer, got {raw!r}"])
    return max(1, min(cap, jobs))


def run_seed(exp_dict: dict, seed: int, out_dir: str) -> dict:
    """Train one seed of an experiment; module-level so worker processes can pickle it."""
    exp = parse_config(exp_dict)
    cfg = dataclasses.replace(exp.train, seed=seed)
    dataset, graph = build_data(exp)
    echo = exp.to_dict()
    echo["train"] = cfg.to_dict()
    echo["seed"] = seed
    echo["dataset_digest"] = array_digest(dataset.series)
    report = run(cfg, dataset, graph, exp.model, out_dir, echo)
    return report.to_dict()


def cmd_train(args) -> int:
    exp = _experiment(args)
    first = exp.train.seed if args.seed is None else args.seed
    seeds = [first + k for k in range(args.seeds)]
    root = Path(exp.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    exp_dict = exp.to_dict()
    (root / "config.json").write_text(json.dumps(exp_dict | {"version": __version__}, indent=2))
    # data problems surface before any worker starts
    build_data(exp)
    jobs = [(exp_dict, s, str(root / f"seed_{s}")) for s in seeds]
    workers = worker_count(len(jobs))
    if workers == 1:
        reports = [run_seed(*job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(run_seed, *zip(*jobs)))
    t = exp.train
    print(f"scheme={t.scheme} level={t.level} lambda={t.lam} seeds={seeds} -> {root}")
    for rep in reports:
        avg = rep["test"]["average"]
        print(f"  seed {rep['seed']}: best epoch {rep['best_epoch']}, test MAE {avg['mae']:.3f} "
              f"RMSE {avg['rmse']:.3f} MAPE {avg['mape']:.2f}% ({rep['wall_clock']:.1f}s)")
    if len(reports) > 1:
        maes = [r["test"]["average"]["mae"] for r in reports]
        print(f"  mean test MAE {format_mean_std(maes)}")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------

def _experiment_from_echo(echo: dict) -> ExperimentConfig:
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    raw = {k: v for k, v in echo.items() if k in names}
    if "dataset" not in raw:
        raise ConfigError(["checkpoint carries no dataset block; pass --config"])
    return parse_config(raw)


def cmd_eval(args) -> int:
    params, echo = load_checkpoint(args.ckpt)
    exp = _experiment(args) if args.config else _experiment_from_echo(echo)
    dataset, graph = build_data(exp)
    y_hat, y = predict(params, dataset, graph, args.split, exp.train.eval_batch)
    result = metrics(y_hat, y, exp.train.horizons)
    out = Path(args.out) if args.out else Path(args.ckpt).parent / f"eval_{args.split}.json"
    out.write_text(json.dumps({"ckpt": str(args.ckpt), "split": args.split, "metrics": result,
                               "config": echo}, indent=2))
    print(f"{args.ckpt} on {args.split} ({len(y)} windows)")
    print(_horizon_table({"model": [result]}))
    print(f"wrote {out}")
    return EXIT_OK


# -- report --------------------------------------------------------------------

def load_arm(path) -> list[RunReport]:
    path = Path(path)
    files = sorted(path.glob("seed_*/report.json"), key=lambda p: int(p.parent.name.split("_")[1]))
    if not files and (path / "report.json").exists():
        files = [path / "report.json"]
    if not files:
        raise DataError(f"{path}: no report.json found (expected seed_*/report.json)")
    return [RunReport.from_dict(json.loads(f.read_text())) for f in files]


def _metric(tests: list[dict], horizon: str, name: str) -> list[float]:
    return [t[horizon][name] for t in tests]


def _cell(values: list[float]) -> str:
    return format_mean_std(values) if len(values) > 1 else f"{values[0]:.2f}"


def _horizon_table(arms: dict[str, list[dict]]) -> str:
    """Per-horizon MAE/RMSE/MAPE, one row per arm and horizon."""
    lines = [f"{'arm':<24}{'horizon':<10}{'MAE':>16}{'RMSE':>16}{'MAPE(%)':>16}"]
    for arm, tests in arms.items():
        for h in tests[0]:
            cells = [_cell(_metric(tests, h, m)) for m in ("mae", "rmse", "mape")]
            lines.append(f"{arm:<24}{h:<10}" + "".join(f"{c:>16}" for c in cells))
    return "\n".join(lines)


def cmd_report(args) -> int:
    arms = {Path(p).name or str(p): load_arm(p) for p in args.runs}
    tests = {name: [r.test for r in reps] for name, reps in arms.items()}
    out = Path(args.out) if args.out else Path(args.runs[0]).parent
    out.mkdir(parents=True, exist_ok=True)

    print(f"{'arm':<24}{'seeds':>6}{'MAE':>16}{'RMSE':>16}{'MAPE(%)':>16}")
    for name, reps in arms.items():
        cells = [format_mean_std(_metric(tests[name], "average", m)) for m in ("mae", "rmse", "mape")]
        print(f"{name:<24}{len(reps):>6}" + "".join(f"{c:>16}" for c in cells))
    print()
    print(_horizon_table(tests))

    summary = {"arms": {}, "tests": {}}
    for name, reps in arms.items():
        summary["arms"][name] = {
            "seeds": [r.seed for r in reps],
            "test": {h: {m: format_mean_std(_metric(tests[name], h, m)) for m in ("mae", "rmse", "mape")}
                     for h in reps[0].test},
        }
    names = list(arms)
    if len(names) > 1:
        print()
        ref = names[0]
        for other in names[1:]:
            if min(len(arms[ref]), len(arms[other])) < 2:
                continue
            rows = {}
            for h in arms[ref][0].test:
                rows[h] = welch_t_test(_metric(tests[ref], h, "mae"), _metric(tests[other], h, "mae"))
            summary["tests"][f"{ref} vs {other}"] = rows
            avg = rows["average"]
            print(f"Welch t-test on MAE, {ref} vs {other}: t={avg['t']:.3f} p={avg['p']:.4f}")

    with open(out / "curves.tsv", "w") as fh:
        fh.write("arm\tseed\tepoch\tseries\tvalue\n")
        for name, reps in arms.items():
            for r in reps:
                for row in r.pretrain:
                    fh.write(f"{name}\t{r.seed}\t{row['epoch']}\tpretrain_l_cl\t{row['l_cl']!r}\n")
                for row in r.epochs:
                    for key in ("l_pred", "l_cl", "val_mae"):
                        if row.get(key) is not None:
                            fh.write(f"{name}\t{r.seed}\t{row['epoch']}\t{key}\t{row[key]!r}\n")
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"\nwrote {out / 'summary.json'} and {out / 'curves.tsv'}")
    return EXIT_OK


# -- gradcheck -----------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    results, seconds = run_gradcheck(args.instances, args.seed)
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<26} max rel err {r.max_rel_error:.2e}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} ops within {TOLERANCE:g} in {seconds:.1f}s")
    if failed:
        return _fail(EXIT_NUMERIC, "numeric", f"gradcheck failed for: {', '.join(failed)}")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stgcl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"stgcl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--nodes", type=int, default=15)
    p.add_argument("--days", type=int, default=30)
    p.add_argument("--steps-per-day", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one or more seeds")
    p.add_argument("--config")
    p.add_argument("--scheme", choices=("joint", "pretrain_finetune", "base_only"))
    p.add_argument("--contrast", choices=("graph", "node"))
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--config", help="dataset/graph config (defaults to the checkpoint's echo)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval, scheme=None, contrast=None, epochs=None)

    p = sub.add_parser("report", help="compare run directories")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.command == "train" and args.seeds < 1:
        return _fail(EXIT_CONFIG, "config", "--seeds must be >= 1")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001
        code, kind = classify(exc)
        return _fail(code, kind, f"{type(exc).__name__}: {exc}")
