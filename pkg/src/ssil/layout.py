"""Task curriculum bookkeeping.

Tasks are numbered 1..T as in the usual CIL notation; classes are 0-based, so
task ``t`` owns classes ``[m*(t-1), m*t)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument


@dataclass(frozen=True)
class TaskLayout:
    total_tasks: int
    classes_per_task: int

    def __post_init__(self):
        if self.total_tasks < 1 or self.classes_per_task < 1:
            raise InvalidArgument("total_tasks and classes_per_task must be >= 1")

    @classmethod
    def from_sizes(cls, sizes) -> "TaskLayout":
        """Build from explicit per-task class counts; only uniform sizes are allowed."""
        sizes = list(sizes)
        if not sizes or len(set(sizes)) != 1:
            raise InvalidArgument(f"ragged task sizes {sizes} are not supported")
        return cls(len(sizes), sizes[0])

    @property
    def num_classes(self) -> int:
        return self.total_tasks * self.classes_per_task

    def seen_classes(self, t: int) -> int:
        """C_t, the number of classes learned after task ``t`` (0 for t=0)."""
        if not 0 <= t <= self.total_tasks:
            raise InvalidArgument(f"task {t} outside [0, {self.total_tasks}]")
        return self.classes_per_task * t

    def task_classes(self, t: int) -> range:
        self._check_task(t)
        m = self.classes_per_task
        return range(m * (t - 1), m * t)

    def old_new_split(self, t: int) -> tuple[range, range]:
        self._check_task(t)
        m = self.classes_per_task
        return range(0, m * (t - 1)), range(m * (t - 1), m * t)

    def task_of(self, c):
        """0-based task index of class ``c`` (scalar or array)."""
        if np.isscalar(c):
            if not 0 <= c < self.num_classes:
                raise InvalidArgument(f"class {c} outside [0, {self.num_classes})")
            return int(c) // self.classes_per_task
        c = np.asarray(c)
        if c.size and (c.min() < 0 or c.max() >= self.num_classes):
            raise InvalidArgument("class index out of range")
        return c // self.classes_per_task

    def _check_task(self, t: int) -> None:
        if not 1 <= t <= self.total_tasks:
            raise InvalidArgument(f"task {t} outside [1, {self.total_tasks}]")


def class_ordering(num_classes: int, seed: int) -> np.ndarray:
    """Fixed random class order: a seeded permutation of ``range(num_classes)``."""
    if num_classes < 1:
        raise InvalidArgument("num_classes must be >= 1")
    return np.random.default_rng(seed).permutation(num_classes)
