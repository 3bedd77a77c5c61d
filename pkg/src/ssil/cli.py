"""Command-line entry point: ``ssil run | gradcheck | compare | report``.

Exit codes: 0 success, 1 gradient check violation, 2 bad config or bad
input directories, 3 numeric failure during training.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .checkpoint import save_checkpoint
from .config import OUTPUT_ENV, ConfigError, ExperimentConfig, load_config, load_datasets
from .data import relabel, split_tasks
from .errors import IngestionError, NumericFailure
from .eval import EvalReport, average_incremental_accuracy, old_into_latest_fraction, \
    old_predicted_latest_fraction
from .layout import class_ordering
from .trainer import Method, run_incremental

METRICS_HEADER = ["method", "seed", "task", "seen_classes", "metric", "value"]
SUMMARY_HEADER = ["method", "seed", "k", "average_accuracy"]
COMPARE_HEADER = ["run", "method", "seed", "k", "average_accuracy", "delta_vs_first"]


def _num(v: float) -> str:
    return repr(float(v))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def metrics_rows(reports, method: str, seed: int, classes_per_task: int):
    rows = []
    for r in reports:
        seen = r.after_task * classes_per_task
        for k in sorted(r.topk):
            rows.append([method, seed, r.after_task, seen, f"top{k}", _num(r.topk[k])])
        cm = r.task_confusion
        rows.append([method, seed, r.after_task, seen, "old_into_latest",
                     _num(old_into_latest_fraction(cm))])
        rows.append([method, seed, r.after_task, seen, "old_predicted_latest",
                     _num(old_predicted_latest_fraction(cm))])
    return rows


def _confusion_rows(cm: np.ndarray):
    t = cm.shape[0]
    header = ["true_task"] + [f"pred_task{j + 1}" for j in range(t)]
    return header, [[i + 1] + [int(v) for v in cm[i]] for i in range(t)]


def _bias_doc(reports) -> dict:
    out = []
    for r in reports:
        ratio = r.new_data_task_ratio
        out.append({
            "after_task": r.after_task,
            "new_data_task_ratio": None if ratio is None else [float(v) for v in ratio],
            "old_into_latest": old_into_latest_fraction(r.task_confusion),
            "old_predicted_latest": old_predicted_latest_fraction(r.task_confusion),
        })
    return {"tasks": out}


def write_run(run_dir: Path, cfg: ExperimentConfig, method: Method, seed: int, state) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    m = cfg.layout.classes_per_task
    for r in state.reports:
        r.extra = {"method": method.value, "seed": seed, "classes_per_task": m}
        _write_json(run_dir / f"report_t{r.after_task}.json", r.to_dict())
        header, rows = _confusion_rows(r.task_confusion)
        _write_csv(run_dir / f"confusion_t{r.after_task}.csv", header, rows)
    _write_csv(run_dir / "metrics.csv", METRICS_HEADER,
               metrics_rows(state.reports, method.value, seed, m))
    _write_json(run_dir / "bias.json", _bias_doc(state.reports))
    with open(run_dir / "log.jsonl", "w", encoding="utf-8") as fh:
        for rec in state.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    save_checkpoint(run_dir / "checkpoint.bin", state.model, state.memory,
                    {"method": method.value, "seed": seed})


def run_one(cfg: ExperimentConfig, train, test, method: Method, seed: int):
    order = class_ordering(cfg.layout.num_classes, seed)
    tasks = split_tasks(train, cfg.layout, order)
    return run_incremental(tasks, cfg.train_config(method, seed), cfg.layout,
                           test_set=relabel(test, order), capacity=cfg.capacity,
                           layer_dims=cfg.layer_dims, ks=cfg.ks, head_init=cfg.head_init)


def _parse_list(text: str, conv, what: str):
    try:
        return [conv(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad {what} list {text!r}") from None


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        methods, seeds = list(cfg.methods), list(cfg.seeds)
        if args.method_filter:
            wanted = set(_parse_list(args.method_filter, str, "method"))
            unknown = wanted - {m.value for m in Method}
            if unknown:
                raise ConfigError(f"unknown methods in filter: {sorted(unknown)}")
            methods = [m for m in methods if m.value in wanted]
            if not methods:
                raise ConfigError("method filter leaves nothing to run")
        if args.seed_override:
            seeds = _parse_list(args.seed_override, int, "seed")
            if not seeds:
                raise ConfigError("empty seed override")
        out = Path(args.out or os.environ.get(OUTPUT_ENV) or cfg.base_dir / cfg.output_dir)
        train, test = load_datasets(cfg)
    except (ConfigError, IngestionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    summary = []
    for method in methods:
        for seed in seeds:
            try:
                state = run_one(cfg, train, test, method, seed)
            except NumericFailure as exc:
                st = getattr(exc, "run_state", None)
                task = st.completed_tasks + 1 if st is not None else "?"
                print(f"numeric failure: method={method.value} seed={seed} task={task}: {exc}",
                      file=sys.stderr)
                return 3
            write_run(out / method.value / str(seed), cfg, method, seed, state)
            for k in cfg.ks:
                if all(k in r.topk for r in state.reports):
                    summary.append([method.value, seed, k,
                                    _num(average_incremental_accuracy(state.reports, k))])
            print(f"{method.value} seed={seed} average top-1 "
                  f"{average_incremental_accuracy(state.reports):.4f}")
    _write_json(out / "config.json", cfg.to_dict())
    _write_csv(out / "summary.csv", SUMMARY_HEADER, summary)
    return 0


def cmd_gradcheck(args) -> int:
    fault = {args.inject_fault: 1e-3} if args.inject_fault else None
    results = gradcheck.run_suite(args.instances, args.seed, fault=fault)
    print(f"{'loss':<8}{'max_rel_error':>16}{'worst_seed':>12}{'rejected':>10}")
    bad = []
    for r in results:
        print(f"{r.loss:<8}{r.max_error:>16.3e}{r.worst_seed:>12d}{r.rejected:>10d}")
        if not r.ok:
            bad.append(r)
    for r in bad:
        print(f"FAIL {r.loss}: relative error {r.max_error:.3e} >= {gradcheck.TOLERANCE:g} "
              f"(instance seed {r.worst_seed})", file=sys.stderr)
    return 1 if bad else 0


def load_reports(run_dir: Path) -> list[EvalReport]:
    files = sorted(run_dir.glob("report_t*.json"), key=lambda p: int(p.stem[len("report_t"):]))
    if not files:
        raise ConfigError(f"{run_dir}: no report_t*.json files")
    reports = []
    for f in files:
        try:
            reports.append(EvalReport.from_dict(json.loads(f.read_text(encoding="utf-8"))))
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"{f}: corrupt report ({exc})") from None
    if [r.after_task for r in reports] != list(range(1, len(reports) + 1)):
        raise ConfigError(f"{run_dir}: reports are not a contiguous task sequence")
    return reports


def _discover(paths) -> list[Path]:
    runs = []
    for p in map(Path, paths):
        if not p.is_dir():
            raise ConfigError(f"{p}: not a directory")
        if any(p.glob("report_t*.json")):
            runs.append(p)
        else:
            found = sorted(d.parent for d in p.rglob("report_t1.json"))
            if not found:
                raise ConfigError(f"{p}: no run directories found")
            runs += found
    return runs


def _run_identity(reports, run_dir: Path):
    extra = reports[0].extra
    return extra.get("method", run_dir.parent.name), extra.get("seed", run_dir.name)


def cmd_compare(args) -> int:
    try:
        runs = _discover(args.run_dirs)
        if len(runs) < 2:
            raise ConfigError("compare needs at least two run directories")
        loaded = [(d, load_reports(d)) for d in runs]
    except ConfigError as exc:
        print(f"compare: {exc}", file=sys.stderr)
        return 2

    ks = sorted(set.intersection(*[set.intersection(*[set(r.topk) for r in reps])
                                   for _, reps in loaded]))
    rows, summary = [], []
    base = {k: average_incremental_accuracy(loaded[0][1], k) for k in ks}
    for d, reps in loaded:
        method, seed = _run_identity(reps, d)
        for k in ks:
            acc = average_incremental_accuracy(reps, k)
            rows.append([str(d), method, seed, k, _num(acc), _num(acc - base[k])])
        later = [r for r in reps if r.after_task >= 2]
        summary.append({
            "run": str(d), "method": method, "seed": seed,
            "average_top1": average_incremental_accuracy(reps, 1) if 1 in ks else None,
            "final_old_predicted_latest": old_predicted_latest_fraction(reps[-1].task_confusion),
            "final_old_into_latest": old_into_latest_fraction(reps[-1].task_confusion),
            "mean_old_predicted_latest": (float(np.mean([old_predicted_latest_fraction(r.task_confusion)
                                                         for r in later])) if later else 0.0),
        })
    by_method = {}
    for s in summary:
        by_method.setdefault(s["method"], []).append(s)
    methods = {m: {"runs": len(v),
                   "average_top1": (float(np.mean([s["average_top1"] for s in v]))
                                    if 1 in ks else None),
                   "final_old_predicted_latest": float(np.mean(
                       [s["final_old_predicted_latest"] for s in v]))}
               for m, v in by_method.items()}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "compare.csv", COMPARE_HEADER, rows)
    _write_json(out / "compare.json", {"runs": summary, "methods": methods})
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows([COMPARE_HEADER] + rows)
    sys.stdout.write(buf.getvalue())
    return 0


def cmd_report(args) -> int:
    try:
        run_dir = Path(args.run_dir)
        reports = load_reports(run_dir)
    except ConfigError as exc:
        print(f"report: {exc}", file=sys.stderr)
        return 2
    method, seed = _run_identity(reports, run_dir)
    m = reports[0].extra.get("classes_per_task")
    if not isinstance(m, int):
        print(f"report: {run_dir}: reports do not record classes_per_task", file=sys.stderr)
        return 2
    rows = metrics_rows(reports, method, seed, m)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "metrics.csv", METRICS_HEADER, rows)
        for r in reports:
            header, crow = _confusion_rows(r.task_confusion)
            _write_csv(out / f"confusion_t{r.after_task}.csv", header, crow)
        _write_json(out / "bias.json", _bias_doc(reports))
    else:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows([METRICS_HEADER] + rows)
        sys.stdout.write(buf.getvalue())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssil", description="Class-incremental learning lab.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train every (method, seed) in a config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help=f"output directory (overrides ${OUTPUT_ENV} and the config)")
    r.add_argument("--seed-override", help="comma-separated seeds replacing the config's list")
    r.add_argument("--method-filter", help="comma-separated subset of the config's methods")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gradcheck", help="finite-difference check of all losses")
    g.add_argument("--instances", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--inject-fault", choices=gradcheck.LOSS_NAMES,
                   help="test hook: perturb one loss's analytic gradient")
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("compare", help="side-by-side accuracy and bias of finished runs")
    c.add_argument("run_dirs", nargs="+")
    c.add_argument("--out", default="comparison")
    c.set_defaults(func=cmd_compare)

    rp = sub.add_parser("report", help="re-render CSV outputs from a run's JSON reports")
    rp.add_argument("run_dir")
    rp.add_argument("--out", help="directory to write into (default: metrics CSV to stdout)")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
