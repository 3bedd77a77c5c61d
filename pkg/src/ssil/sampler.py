"""Mini-batch construction: ratio-preserving and plain joint batching."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .data import LabeledDataset
from .errors import InvalidArgument, InvalidState
from .memory import ExemplarMemory


@dataclass(frozen=True)
class BatchPlan:
    new_batch_size: int
    replay_batch_size: int = 0

    def __post_init__(self):
        if self.new_batch_size < 1 or self.replay_batch_size < 0:
            raise InvalidArgument("need new_batch_size >= 1 and replay_batch_size >= 0")


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    # True for samples drawn from the exemplar memory.
    is_replay: np.ndarray

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def num_replay(self) -> int:
        return int(self.is_replay.sum())


def rp_batches(task_data: LabeledDataset, memory: ExemplarMemory | None, plan: BatchPlan,
               rng: np.random.Generator) -> Iterator[Batch]:
    """One epoch of ratio-preserving batches.

    ``task_data`` is shuffled and cut into chunks of ``new_batch_size`` (the
    last chunk may be short); each chunk is joined by a fresh draw of
    ``replay_batch_size`` exemplars.
    """
    if len(task_data) == 0:
        raise InvalidArgument("task data is empty")
    n_m = plan.replay_batch_size
    if n_m > 0 and (memory is None or len(memory) == 0):
        raise InvalidState("replay requested from an empty memory")
    order = rng.permutation(len(task_data))
    for i in range(0, order.size, plan.new_batch_size):
        idx = order[i:i + plan.new_batch_size]
        x, y = task_data.inputs[idx], task_data.labels[idx]
        if n_m > 0:
            xm, ym = memory.sample(n_m, rng)
            x = np.concatenate([x, xm])
            y = np.concatenate([y, ym])
        tags = np.zeros(y.size, dtype=bool)
        tags[idx.size:] = True
        yield Batch(x, y, tags)


def joint_batches(task_data: LabeledDataset, memory: ExemplarMemory | None, batch_size: int,
                  rng: np.random.Generator) -> Iterator[Batch]:
    """One epoch over the shuffled union of task data and stored exemplars."""
    if batch_size < 1:
        raise InvalidArgument("batch_size must be >= 1")
    x, y = task_data.inputs, task_data.labels
    tags = np.zeros(y.size, dtype=bool)
    if memory is not None and len(memory):
        mx, my = memory.arrays()
        x = np.concatenate([x, mx])
        y = np.concatenate([y, my])
        tags = np.concatenate([tags, np.ones(my.size, dtype=bool)])
    order = rng.permutation(y.size)
    for i in range(0, order.size, batch_size):
        idx = order[i:i + batch_size]
        yield Batch(x[idx], y[idx], tags[idx])
