"""Accuracy metrics and prediction-bias diagnostics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .errors import InvalidArgument
from .layout import TaskLayout
from .model import predict_from_logits

REPORT_SCHEMA_VERSION = 1


@dataclass
class EvalReport:
    after_task: int
    topk: dict[int, float]
    task_confusion: np.ndarray
    new_data_task_ratio: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def top1(self) -> float:
        return self.topk[1]

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "after_task": self.after_task,
            "topk": {str(k): v for k, v in sorted(self.topk.items())},
            "task_confusion": self.task_confusion.astype(int).tolist(),
            "new_data_task_ratio": (None if self.new_data_task_ratio is None
                                    else [float(v) for v in self.new_data_task_ratio]),
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise InvalidArgument(f"unsupported report schema {d.get('schema_version')!r}")
        ratio = d.get("new_data_task_ratio")
        return cls(
            after_task=int(d["after_task"]),
            topk={int(k): float(v) for k, v in d["topk"].items()},
            task_confusion=np.array(d["task_confusion"], dtype=np.int64),
            new_data_task_ratio=None if ratio is None else np.array(ratio, dtype=np.float64),
            extra=d.get("extra", {}),
        )


def topk_from_logits(logits, labels, k: int) -> float:
    """Fraction of rows whose label ranks within the top ``k``.

    Ties rank the lower class index first, matching the argmax rule.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if not 1 <= k <= z.shape[1]:
        raise InvalidArgument(f"k={k} outside [1, {z.shape[1]}]")
    zy = z[np.arange(y.size), y][:, None]
    cols = np.arange(z.shape[1])[None, :]
    rank = (z > zy).sum(axis=1) + ((z == zy) & (cols < y[:, None])).sum(axis=1)
    return float(np.mean(rank < k))


def topk_accuracy(model, test_set: LabeledDataset, k: int) -> float:
    return topk_from_logits(model.scores(test_set.inputs), test_set.labels, k)


def average_incremental_accuracy(reports, k: int = 1) -> float:
    """Mean of the after-each-task top-``k`` accuracies (all tasks, including the first)."""
    reports = list(reports)
    if not reports:
        raise InvalidArgument("need at least one report")
    vals = [r.topk[k] if isinstance(r, EvalReport) else float(r) for r in reports]
    return float(np.mean(vals))


def confusion_from_predictions(true_tasks, pred_tasks, num_tasks: int) -> np.ndarray:
    cm = np.zeros((num_tasks, num_tasks), dtype=np.int64)
    np.add.at(cm, (np.asarray(true_tasks), np.asarray(pred_tasks)), 1)
    return cm


def task_confusion(model, test_set: LabeledDataset, layout: TaskLayout, t: int) -> np.ndarray:
    """Counts of (true task, predicted task); rows are true tasks, 0-based."""
    n_cls = layout.seen_classes(t)
    y = test_set.labels
    if np.any((y < 0) | (y >= n_cls)):
        raise InvalidArgument(f"test labels outside the {n_cls} classes seen by task {t}")
    cls, _ = predict_from_logits(model.scores(test_set.inputs), layout.classes_per_task)
    return confusion_from_predictions(layout.task_of(y), layout.task_of(cls), t)


def new_data_task_ratio(old_model, new_task_data: LabeledDataset, layout: TaskLayout, t: int) -> np.ndarray:
    """Histogram of old tasks predicted by the task-(t-1) model on task-t inputs."""
    if t < 2:
        raise InvalidArgument("the task ratio needs an old model (t >= 2)")
    if old_model.num_tasks != t - 1:
        raise InvalidArgument(f"old model has {old_model.num_tasks} heads, expected {t - 1}")
    _, tasks = predict_from_logits(old_model.scores(new_task_data.inputs), layout.classes_per_task)
    counts = np.bincount(tasks, minlength=t - 1).astype(np.float64)
    return counts / counts.sum()


def old_into_latest_fraction(confusion: np.ndarray) -> float:
    """Share of misclassified old-task samples that land in the latest task's column."""
    cm = np.asarray(confusion)
    t = cm.shape[0]
    if t < 2:
        return 0.0
    old = cm[:-1]
    wrong = old.sum() - np.trace(old)
    return float(old[:, -1].sum() / wrong) if wrong else 0.0


def old_predicted_latest_fraction(confusion: np.ndarray) -> float:
    """Share of all old-task test samples predicted into the latest task."""
    cm = np.asarray(confusion)
    if cm.shape[0] < 2:
        return 0.0
    old = cm[:-1]
    return float(old[:, -1].sum() / old.sum()) if old.sum() else 0.0


def evaluate(model, test_set: LabeledDataset, layout: TaskLayout, t: int, ks=(1, 2),
             old_snapshot=None, new_task_data: LabeledDataset | None = None) -> EvalReport:
    """Full report after task ``t`` on the test samples of all seen classes."""
    seen = test_set.restrict(range(0, layout.seen_classes(t)))
    logits = model.scores(seen.inputs)
    topk = {k: topk_from_logits(logits, seen.labels, k) for k in ks if k <= logits.shape[1]}
    cls, _ = predict_from_logits(logits, layout.classes_per_task)
    cm = confusion_from_predictions(layout.task_of(seen.labels), layout.task_of(cls), t)
    ratio = None
    if t >= 2 and old_snapshot is not None and new_task_data is not None:
        ratio = new_data_task_ratio(old_snapshot, new_task_data, layout, t)
    return EvalReport(t, topk, cm, ratio)
