"""Labeled datasets: synthetic Gaussian mixtures, CSV I/O and task splitting."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import IngestionError, InvalidArgument
from .layout import TaskLayout


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.ascontiguousarray(self.inputs, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise InvalidArgument("inputs must be (n, d) with one label per row")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise InvalidArgument("labels outside [0, num_classes)")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.num_classes)

    def restrict(self, classes: range) -> "LabeledDataset":
        """Samples whose label lies in ``classes``, in their original order."""
        keep = (self.labels >= classes.start) & (self.labels < classes.stop)
        return self.subset(np.flatnonzero(keep))


def synth_gaussian(num_classes: int = 10, dim: int = 16, per_class: int = 200,
                   spread: float = 1.0, seed: int = 42, separation: float = 4.0
                   ) -> tuple[LabeledDataset, LabeledDataset]:
    """Gaussian mixture with one isotropic blob per class.

    Class means are ``separation * N(0, I)``; samples are
    ``mean + spread * N(0, I)``. Returns ``(train, test)``, each with
    ``per_class`` samples per class, train rows shuffled.
    """
    if min(num_classes, dim, per_class) < 1:
        raise InvalidArgument("counts must be >= 1")
    if not spread > 0:
        raise InvalidArgument("spread must be positive")
    rng = np.random.default_rng(seed)
    means = separation * rng.standard_normal((num_classes, dim))

    def draw():
        labels = np.repeat(np.arange(num_classes), per_class)
        x = means[labels] + spread * rng.standard_normal((labels.size, dim))
        return x, labels

    x_tr, y_tr = draw()
    x_te, y_te = draw()
    perm = rng.permutation(y_tr.size)
    return (LabeledDataset(x_tr[perm], y_tr[perm], num_classes),
            LabeledDataset(x_te, y_te, num_classes))


def relabel(dataset: LabeledDataset, ordering) -> LabeledDataset:
    """Map original class ``ordering[i]`` to new label ``i``."""
    ordering = np.asarray(ordering)
    if sorted(ordering.tolist()) != list(range(dataset.num_classes)):
        raise InvalidArgument("ordering must be a permutation of the dataset's classes")
    inverse = np.empty_like(ordering)
    inverse[ordering] = np.arange(ordering.size)
    return LabeledDataset(dataset.inputs, inverse[dataset.labels], dataset.num_classes)


def split_tasks(dataset: LabeledDataset, layout: TaskLayout, ordering) -> list[LabeledDataset]:
    """Relabel by ``ordering`` and partition into per-task datasets (labels stay global)."""
    if dataset.num_classes != layout.num_classes:
        raise InvalidArgument(
            f"dataset has {dataset.num_classes} classes, layout expects {layout.num_classes}")
    ds = relabel(dataset, ordering)
    return [ds.restrict(layout.task_classes(t)) for t in range(1, layout.total_tasks + 1)]


def load_csv(path, header: bool = False, num_classes: int | None = None) -> LabeledDataset:
    """Read ``d`` float feature columns followed by an integer label column."""
    rows, labels = [], []
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, rec in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) < 2:
                raise IngestionError(f"{path}: row {lineno}: need features and a label")
            if width is None:
                width = len(rec)
            elif len(rec) != width:
                raise IngestionError(f"{path}: row {lineno}: expected {width} columns, got {len(rec)}")
            try:
                feats = [float(f) for f in rec[:-1]]
            except ValueError as exc:
                raise IngestionError(f"{path}: row {lineno}: {exc}") from None
            if not all(math.isfinite(f) for f in feats):
                raise IngestionError(f"{path}: row {lineno}: non-finite feature value")
            lab = rec[-1].strip()
            try:
                y = int(lab)
            except ValueError:
                raise IngestionError(f"{path}: row {lineno}: label {lab!r} is not an integer") from None
            if y < 0:
                raise IngestionError(f"{path}: row {lineno}: negative label {y}")
            rows.append(feats)
            labels.append(y)
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    n_cls = max(labels) + 1 if num_classes is None else num_classes
    if max(labels) >= n_cls:
        raise IngestionError(f"{path}: label {max(labels)} >= num_classes {n_cls}")
    return LabeledDataset(np.array(rows), np.array(labels), n_cls)


def write_csv(dataset: LabeledDataset, path, header: bool = False) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow([f"x{i}" for i in range(dataset.dim)] + ["label"])
        for x, y in zip(dataset.inputs, dataset.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def standardize(train: LabeledDataset, *others: LabeledDataset):
    """Z-score every feature with the training set's mean and std.

    Returns the transformed training set followed by the transformed
    ``others`` (e.g. the test split), all using the training statistics.
    """
    mu = train.inputs.mean(axis=0)
    sd = train.inputs.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    out = [LabeledDataset((d.inputs - mu) / sd, d.labels, d.num_classes) for d in (train, *others)]
    return tuple(out)
