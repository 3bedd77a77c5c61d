"""Class-balanced exemplar memory with ring-buffer retention."""
from __future__ import annotations

import numpy as np

from .data import LabeledDataset
from .errors import CapacityExhausted, InvalidArgument, InvalidState
from .layout import TaskLayout


class ExemplarMemory:
    """Per-class buckets of stored inputs, kept balanced at ``capacity // C_t``.

    Shrinking a bucket keeps its earliest-inserted samples. New classes take
    the first samples of their class in the task stream, which is already
    shuffled, so this amounts to random selection.
    """

    def __init__(self, capacity: int, dim: int | None = None):
        if capacity < 1:
            raise InvalidArgument("capacity must be >= 1")
        self.capacity = int(capacity)
        self.dim = dim
        self.buckets: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return sum(b.shape[0] for b in self.buckets.values())

    @property
    def classes(self) -> list[int]:
        return sorted(self.buckets)

    def per_class_counts(self) -> dict[int, int]:
        return {c: self.buckets[c].shape[0] for c in self.classes}

    def update(self, task_data: LabeledDataset, layout: TaskLayout, t: int) -> None:
        classes = layout.task_classes(t)
        y = task_data.labels
        if np.any((y < classes.start) | (y >= classes.stop)):
            raise InvalidArgument(f"task data has labels outside task {t}'s classes")
        k = self.capacity // layout.seen_classes(t)
        if k == 0:
            raise CapacityExhausted(
                f"capacity {self.capacity} cannot hold one sample for each of "
                f"{layout.seen_classes(t)} classes")
        if self.dim is None:
            self.dim = task_data.dim
        for c in list(self.buckets):
            self.buckets[c] = self.buckets[c][:k]
        for c in classes:
            self.buckets[c] = task_data.inputs[y == c][:k].copy()

    def as_dataset(self, num_classes: int) -> LabeledDataset:
        x, y = self.arrays()
        return LabeledDataset(x, y, num_classes)

    def arrays(self):
        """All stored samples as ``(inputs, labels)``, ordered by class."""
        if not self.buckets:
            raise InvalidState("memory is empty")
        cs = self.classes
        x = np.concatenate([self.buckets[c] for c in cs], axis=0)
        y = np.concatenate([np.full(self.buckets[c].shape[0], c, dtype=np.int64) for c in cs])
        return x, y

    def sample(self, n: int, rng: np.random.Generator):
        """``n`` stored samples drawn uniformly with replacement."""
        if n < 1:
            raise InvalidArgument("n must be >= 1")
        if len(self) == 0:
            raise InvalidState("cannot sample from an empty memory")
        x, y = self.arrays()
        idx = rng.integers(0, y.size, size=n)
        return x[idx], y[idx]

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Serializable contents: ``{"memory.class<c>": inputs}``."""
        return {f"memory.class{c}": self.buckets[c] for c in self.classes}

    @classmethod
    def from_arrays(cls, capacity: int, arrays: dict[str, np.ndarray]) -> "ExemplarMemory":
        mem = cls(capacity)
        for name, arr in arrays.items():
            c = int(name.removeprefix("memory.class"))
            mem.buckets[c] = np.array(arr, dtype=np.float64)
            mem.dim = arr.shape[1] if arr.ndim == 2 else mem.dim
        return mem


def update_memory(memory: ExemplarMemory, task_data: LabeledDataset, layout: TaskLayout, t: int) -> None:
    memory.update(task_data, layout, t)


def sample_replay(memory: ExemplarMemory, n: int, rng: np.random.Generator):
    return memory.sample(n, rng)
