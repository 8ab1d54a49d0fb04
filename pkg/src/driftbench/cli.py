"""``driftbench`` command line: run, compare, inspect-buffer, gradcheck."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .buffer import SnapshotDecodeError, restore, snapshot
from .config import ConfigError, ExperimentConfig, parse_config
from .metrics import AccuracyMatrix, backward_transfer, last_accuracy
from .model import save_checkpoint
from .streams import DatasetSchemaError, generate, load_external
from .trainer import MetricsReport, TrainConfigError, run_experiment

log = logging.getLogger("driftbench")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4

METRIC_FILES = ("accuracy_matrix.csv", "summary.csv", "task1_accuracy.csv", "drift.csv",
                "calibration.csv", "logit_norms.csv")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _csv(rows: list[list], header: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows([[_fmt(v) for v in row] for row in rows])
    return buf.getvalue()


def report_files(report: MetricsReport) -> dict[str, str]:
    """Render every metric file of a run; a pure function of the report."""
    acc = report.accuracy.values
    n = acc.shape[0]
    files = {
        "accuracy_matrix.csv": _csv([[k + 1, *acc[k]] for k in range(n)],
                                    ["task", *[f"after_task_{j + 1}" for j in range(n)]]),
        "summary.csv": _csv([["last_accuracy", report.last_accuracy], ["bwt", report.bwt],
                             *[[f"ece_{g}", c.ece] for g, c in report.calibration.items()],
                             *[[f"offers_task_{t}", v] for t, v in sorted(report.offers_per_task.items())]],
                            ["metric", "value"]),
        "task1_accuracy.csv": _csv([list(r) for r in report.task1_accuracy], ["iteration", "accuracy"]),
        "drift.csv": _csv([[r.iteration, r.task_id, r.drift, r.boundary] for r in report.drift.records],
                          ["iteration", "task_id", "drift", "boundary"]),
        "calibration.csv": _csv([[g, i, b.lower, b.upper, b.mean_confidence, b.accuracy, b.count]
                                 for g, c in report.calibration.items() for i, b in enumerate(c.bins)],
                                ["group", "bin", "lower", "upper", "mean_confidence", "accuracy", "count"]),
        "logit_norms.csv": _csv([[t + 1, m, s] for t, (m, s) in enumerate(report.logit_norms)],
                                ["task", "mean_norm", "std_norm"]),
    }
    return files


def read_accuracy_matrix(run_dir) -> AccuracyMatrix:
    path = Path(run_dir) / "accuracy_matrix.csv"
    if not path.exists():
        raise FileNotFoundError(f"{run_dir}: missing accuracy_matrix.csv")
    with path.open() as fh:
        rows = list(csv.reader(fh))[1:]
    return AccuracyMatrix.from_array([[float(v) for v in row[1:]] for row in rows])


def _load_tasks(cfg: ExperimentConfig):
    if cfg.dataset_path:
        return load_external(cfg.dataset_path)
    return generate(cfg.stream)


def _run_one(cfg: ExperimentConfig, seed: int) -> str:
    """Train one seed and write its run directory atomically; returns the path."""
    train = dataclasses.replace(cfg.train, seed=seed)
    started = time.time()
    report = run_experiment(cfg.method, _load_tasks(cfg), train)
    elapsed = time.time() - started

    parent = Path(cfg.out) / cfg.method.replace("+", "p")
    parent.mkdir(parents=True, exist_ok=True)
    final = parent / f"seed{seed}"
    tmp = Path(tempfile.mkdtemp(prefix=f".seed{seed}.", dir=parent))
    try:
        for name, text in report_files(report).items():
            (tmp / name).write_text(text)
        if cfg.save_checkpoint:
            save_checkpoint(report.eval_model, tmp / "model.ckpt")
        if cfg.save_buffer and report.buffer is not None:
            (tmp / "buffer.bin").write_bytes(snapshot(report.buffer))
        echo = cfg.to_dict()
        echo["train"]["seed"] = seed
        meta = {
            "config": echo,
            "seed": seed,
            "method": cfg.method,
            "version": __version__,
            "wall_time_seconds": round(elapsed, 3),
            "files": sorted(os.listdir(tmp)),
        }
        (tmp / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        if final.exists():
            shutil.rmtree(final)
        os.replace(tmp, final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return str(final)


def cmd_run(cfg: ExperimentConfig, jobs: int = 1) -> int:
    try:
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        probe = Path(cfg.out) / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        print(f"error: output directory {cfg.out} is not writable: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        if jobs > 1 and len(cfg.seeds) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                paths = list(pool.map(_run_one, [cfg] * len(cfg.seeds), cfg.seeds))
        else:
            paths = [_run_one(cfg, s) for s in cfg.seeds]
    except (ConfigError, TrainConfigError, DatasetSchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for path in paths:
        print(path)
    return EXIT_OK


def _find_runs(dirs) -> list[Path]:
    runs = []
    for d in dirs:
        d = Path(d)
        if not d.is_dir():
            raise FileNotFoundError(f"{d} is not a directory")
        found = [p.parent for p in sorted(d.rglob("metadata.json")) if not p.parent.name.startswith(".")]
        if not found:
            raise FileNotFoundError(f"{d}: no run directories (metadata.json) found")
        runs.extend(found)
    return runs


def compare_rows(dirs, metric: str = "last_accuracy") -> list[dict]:
    groups: dict[tuple[str, int], list[tuple[float, float | None]]] = {}
    for run in _find_runs(dirs):
        meta = json.loads((run / "metadata.json").read_text())
        acc = read_accuracy_matrix(run)
        bwt = backward_transfer(acc) if acc.num_tasks >= 2 else None
        method = meta["method"]
        size = meta["config"]["train"]["buffer_size"] if method not in ("sgd", "joint") else 0
        groups.setdefault((method, size), []).append((last_accuracy(acc), bwt))
    rows = []
    for (method, size), values in groups.items():
        a = np.array([v[0] for v in values])
        b = np.array([np.nan if v[1] is None else v[1] for v in values])
        rows.append({"method": method, "buffer_size": size, "seeds": len(values),
                     "last_accuracy_median": float(np.median(a)), "last_accuracy_std": float(np.std(a)),
                     "bwt_median": float(np.median(b)), "bwt_std": float(np.std(b))})
    key = "last_accuracy_median" if metric == "last_accuracy" else "bwt_median"
    rows.sort(key=lambda r: (-np.nan_to_num(r[key], nan=-np.inf), r["method"]))
    return rows


def cmd_compare(dirs, metric: str = "last_accuracy", summary_path=None) -> int:
    try:
        rows = compare_rows(dirs, metric)
    except (FileNotFoundError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"{'method':<8} {'buffer':>6} {'seeds':>5} {'A_last':>16} {'BWT':>17}")
    for r in rows:
        print(f"{r['method']:<8} {r['buffer_size']:>6} {r['seeds']:>5} "
              f"{100 * r['last_accuracy_median']:>8.2f}±{100 * r['last_accuracy_std']:<6.2f} "
              f"{100 * r['bwt_median']:>8.2f}±{100 * r['bwt_std']:<6.2f}")
    header = list(rows[0]) if rows else ["method"]
    Path(summary_path or "compare_summary.csv").write_text(_csv([[r[h] for h in header] for r in rows], header))
    return EXIT_OK


def buffer_histogram(data: bytes) -> tuple[dict[int, int], dict[int, int]]:
    buf = restore(data)
    epochs: dict[int, int] = {}
    tasks: dict[int, int] = {}
    for e in buf.entries:
        epochs[e.epoch_of_origin] = epochs.get(e.epoch_of_origin, 0) + 1
        tasks[e.task_id] = tasks.get(e.task_id, 0) + 1
    return dict(sorted(epochs.items())), dict(sorted(tasks.items()))


def cmd_inspect_buffer(path, counts_path=None) -> int:
    try:
        epochs, tasks = buffer_histogram(Path(path).read_bytes())
    except SnapshotDecodeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    total = sum(epochs.values())
    print(f"{total} entries")
    print("epoch_of_origin histogram:")
    for epoch, count in epochs.items():
        print(f"  {epoch:>4} {count:>5} {'#' * count}")
    print("per-task counts:")
    for task, count in tasks.items():
        print(f"  task {task:>3}: {count}")
    rows = [["epoch", k, v] for k, v in epochs.items()] + [["task", k, v] for k, v in tasks.items()]
    Path(counts_path or f"{path}.counts.csv").write_text(_csv(rows, ["kind", "key", "count"]))
    return EXIT_OK


def cmd_gradcheck(tolerance: float = 1e-4) -> int:
    from .gradcheck import run_suite

    worst = run_suite()
    ok = True
    for name, err in worst.items():
        status = "ok" if err < tolerance else "FAIL"
        ok &= err < tolerance
        print(f"{name:<7} max rel err {err:.3e}  {status}")
    return EXIT_OK if ok else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="driftbench", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one method over one or more seeds")
    run.add_argument("--config", help="YAML or JSON experiment config")
    run.add_argument("--method")
    run.add_argument("--buffer-size", type=int)
    run.add_argument("--learning-rate", type=float)
    run.add_argument("--epochs", type=int, dest="epochs_per_task")
    run.add_argument("--eval-every", type=int)
    run.add_argument("--seed", type=int, nargs="+", dest="seeds")
    run.add_argument("--out")
    run.add_argument("--jobs", type=int, default=1)

    cmp_ = sub.add_parser("compare", help="summarize finished runs")
    cmp_.add_argument("dirs", nargs="+")
    cmp_.add_argument("--metric", choices=("last_accuracy", "bwt"), default="last_accuracy")
    cmp_.add_argument("--summary", help="summary CSV path (default ./compare_summary.csv)")

    insp = sub.add_parser("inspect-buffer", help="epoch-of-origin histogram of a buffer snapshot")
    insp.add_argument("snapshot")
    insp.add_argument("--counts", help="counts CSV path (default <snapshot>.counts.csv)")

    sub.add_parser("gradcheck", help="finite-difference check of every objective")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        overrides = {"method": args.method, "buffer_size": args.buffer_size, "seeds": args.seeds,
                     "out": args.out, "learning_rate": args.learning_rate,
                     "epochs_per_task": args.epochs_per_task, "eval_every": args.eval_every}
        try:
            cfg = parse_config(args.config, overrides)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except OSError as exc:
            print(f"I/O error: {exc}", file=sys.stderr)
            return EXIT_IO
        return cmd_run(cfg, args.jobs)
    if args.command == "compare":
        return cmd_compare(args.dirs, args.metric, args.summary)
    if args.command == "inspect-buffer":
        return cmd_inspect_buffer(args.snapshot, args.counts)
    return cmd_gradcheck()


if __name__ == "__main__":
    sys.exit(main())
