"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

from . import trainer
from .config import ConfigError, apply_overrides, config_from_dict, resolved_dict
from .data import DataError, convert_svhn, load_dataset
from .trainer import CheckpointError, NumericalDivergence

log = logging.getLogger("ccgan")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
SUMMARY_COLUMNS = ("param", "value", "n_runs", "n_failed", "student_error_mean", "student_error_std",
                   "teacher_error_mean", "teacher_error_std")
RUNS_COLUMNS = ("param", "value", "seed", "status", "student_error", "teacher_error", "run_dir")
MANIFEST_KIND = "ccgan-run-manifest"


def git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             timeout=10, cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() or "unknown"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def read_config_source(path) -> dict:
    """Config dict from a JSON config or from a run manifest."""
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if isinstance(data, dict) and data.get("kind") == MANIFEST_KIND:
        return data["config"]
    return data


def run_training(cfg_dict: dict, out_dir: Path) -> trainer.TrainState:
    """Train one configuration into ``out_dir`` with a manifest describing it."""
    cfg = config_from_dict(cfg_dict)
    out_dir.mkdir(parents=True, exist_ok=True)
    for stale in ("metrics.csv", "timing.csv"):
        (out_dir / stale).unlink(missing_ok=True)
    manifest = {
        "kind": MANIFEST_KIND,
        "config": resolved_dict(cfg),
        "artifacts": {"metrics": "metrics.csv", "timing": "timing.csv", "checkpoint": "checkpoint.ckpt"},
        "git_describe": git_describe(),
        "started": _now(),
        "finished": None,
        "status": "running",
    }
    _write_manifest(out_dir, manifest)
    try:
        state, _ = trainer.train(cfg, out_dir)
    except NumericalDivergence:
        manifest.update(finished=_now(), status="diverged")
        _write_manifest(out_dir, manifest)
        raise
    manifest.update(finished=_now(), status="completed")
    _write_manifest(out_dir, manifest)
    return state


def _write_manifest(out_dir: Path, manifest: dict) -> None:
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg_dict = apply_overrides(read_config_source(args.config), args.set or [])
    state = run_training(cfg_dict, Path(args.out))
    print(json.dumps({"out": str(args.out), "epoch": state.epoch,
                      "student_error": trainer.evaluate(state.student, state.test_set),
                      "teacher_error": trainer.evaluate(state.teacher, state.test_set)}))
    return EXIT_OK


def _load_eval_set(state: trainer.TrainState, dataset: str | None, split: str):
    if dataset is None or dataset == state.config.data.name:
        return state.test_set if split == "test" else state.train_set
    d = state.config.data
    return load_dataset(dataset, split, n=d.n_test if split == "test" else d.n, noise=d.noise, seed=d.seed,
                        num_classes=d.num_classes)


def cmd_eval(args) -> int:
    state = trainer.checkpoint_load(args.checkpoint)
    ds = _load_eval_set(state, args.dataset, args.split)
    print(json.dumps({"dataset": ds.name, "n": len(ds), "epoch": state.epoch,
                      "student_error": trainer.evaluate(state.student, ds),
                      "teacher_error": trainer.evaluate(state.teacher, ds)}))
    return EXIT_OK


def _sweep_one(job: tuple) -> dict:
    cfg_dict, param, value, seed, run_dir = job
    row = {"param": param, "value": value, "seed": seed, "run_dir": str(run_dir)}
    try:
        d = apply_overrides(cfg_dict, [f"{param}={value}", f"seed={seed}"])
        state = run_training(d, Path(run_dir))
        row.update(status="ok", student_error=trainer.evaluate(state.student, state.test_set),
                   teacher_error=trainer.evaluate(state.teacher, state.test_set))
    except (ConfigError, DataError):
        raise
    except Exception as exc:  # per-run failures are recorded, not fatal
        log.error("run %s=%s seed=%d failed: %s", param, value, seed, exc)
        row.update(status=f"failed: {type(exc).__name__}", student_error="", teacher_error="")
    return row


def _std(xs: list[float]) -> float:
    return statistics.stdev(xs) if len(xs) > 1 else 0.0


def summarize(rows: list[dict], param: str, values: list[str]) -> list[list]:
    out = []
    for v in values:
        runs = [r for r in rows if r["value"] == v]
        ok = [r for r in runs if r["status"] == "ok"]
        s = [float(r["student_error"]) for r in ok]
        t = [float(r["teacher_error"]) for r in ok]
        out.append([param, v, len(runs), len(runs) - len(ok),
                    repr(statistics.fmean(s)) if s else "", repr(_std(s)) if s else "",
                    repr(statistics.fmean(t)) if t else "", repr(_std(t)) if t else ""])
    return out


def run_sweep(cfg_dict: dict, param: str, values: list[str], seeds: int, out_dir: Path, jobs: int = 1) -> Path:
    """Train every (value, seed) pair; write ``runs.csv`` and ``summary.csv`` under ``out_dir``."""
    if not values:
        raise ConfigError("sweep needs at least one value")
    for v in values:  # fail fast on a bad key or value before any run starts
        config_from_dict(apply_overrides(cfg_dict, [f"{param}={v}"]))
    out_dir.mkdir(parents=True, exist_ok=True)
    work = [(cfg_dict, param, v, s, out_dir / f"{param}={v}" / f"seed={s}") for v in values for s in range(seeds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_one, work))
    else:
        rows = [_sweep_one(j) for j in work]
    with open(out_dir / "runs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, RUNS_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in RUNS_COLUMNS})
    summary = out_dir / "summary.csv"
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        w.writerows(summarize(rows, param, values))
    return summary


def cmd_sweep(args) -> int:
    cfg_dict = apply_overrides(read_config_source(args.config), args.set or [])
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    summary = run_sweep(cfg_dict, args.param, values, args.seeds, Path(args.out), jobs=args.jobs)
    print(summary)
    return EXIT_OK


def cmd_consistency_report(args) -> int:
    state = trainer.checkpoint_load(args.checkpoint)
    ds = _load_eval_set(state, args.dataset, args.split)
    model = state.teacher if args.model == "teacher" else state.student
    rows = trainer.consistency_report(model, ds, args.n_samples, args.seed, state.aug_spec)
    trainer.write_report(rows, args.out)
    print(json.dumps({"out": str(args.out), "n": len(rows), "disagreement": trainer.disagreement_rate(rows)}))
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    state = trainer.checkpoint_load(args.checkpoint)
    ds = _load_eval_set(state, args.dataset, args.split)
    model = state.teacher if args.model == "teacher" else state.student
    trainer.export_embeddings(model, ds, args.out)
    print(args.out)
    return EXIT_OK


def cmd_convert_svhn(args) -> int:
    n = convert_svhn(args.mat, args.out)
    print(json.dumps({"out": str(args.out), "records": n}))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccgan", description="Semi-supervised GAN with composite consistency.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", help="JSON config or run manifest")
    t.add_argument("--out", required=True)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-path override")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sweep", help="grid over one config key and several seeds")
    s.add_argument("--config")
    s.add_argument("--param", required=True)
    s.add_argument("--values", required=True, help="comma separated")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(fn=cmd_sweep)

    def add_ckpt_args(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--dataset", help="dataset name (default: the one trained on)")
        sp.add_argument("--split", default="test", choices=("train", "test"))
        sp.add_argument("--model", default="student", choices=("student", "teacher"))

    e = sub.add_parser("eval", help="test error of a checkpoint")
    add_ckpt_args(e)
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("consistency-report", help="top-2 predictions under two augmentations")
    add_ckpt_args(r)
    r.add_argument("--n-samples", type=int, default=100)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_consistency_report)

    x = sub.add_parser("export-embeddings", help="feature vectors feeding the classifier head, as CSV")
    add_ckpt_args(x)
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_export_embeddings)

    c = sub.add_parser("convert-svhn", help="convert an SVHN .mat file to 3073-byte records")
    c.add_argument("--mat", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_convert_svhn)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalDivergence as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
