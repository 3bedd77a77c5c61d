"""Incremental training loop, method variants and bias-correction post-processing."""
from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .data import LabeledDataset
from .errors import InvalidArgument, NumericFailure
from .eval import EvalReport, evaluate
from .layout import TaskLayout
from .losses import LossResult, ce_loss, ce_ss_loss, gkd_loss, tkd_loss
from .memory import ExemplarMemory
from .model import IncrementalClassifier, ModelSnapshot, SGDState, apply_score_correction, sgd_update
from .sampler import BatchPlan, joint_batches, rp_batches

__all__ = [
    "Method", "TrainConfig", "RunState", "learning_rate", "batch_loss", "new_run_state",
    "train_task", "run_incremental", "balanced_fine_tune", "fit_score_correction",
    "fit_score_correction_logits", "apply_score_correction", "branch_compare",
]


class Method(enum.Enum):
    FT = "FT"
    CE_GKD = "CE_GKD"
    CE_TKD = "CE_TKD"
    SSIL = "SSIL"
    TKD_SS = "TKD_SS"
    TKD_RP = "TKD_RP"

    @property
    def uses_ss_loss(self) -> bool:
        return self in (Method.SSIL, Method.TKD_SS)

    @property
    def uses_rp_batches(self) -> bool:
        return self in (Method.SSIL, Method.TKD_RP)

    @property
    def kd_kind(self) -> str:
        if self is Method.FT:
            return "none"
        if self is Method.CE_GKD:
            return "global"
        return "taskwise"

    def loss_name_at(self, t: int) -> str:
        """Name of the loss this method optimizes at task ``t`` (no KD at t=1)."""
        ce = "ce_ss" if self.uses_ss_loss else "ce"
        if t < 2:
            return ce
        return ce + {"none": "", "global": "+gkd", "taskwise": "+tkd"}[self.kd_kind]


@dataclass(frozen=True)
class TrainConfig:
    method: Method = Method.SSIL
    epochs: int = 40
    base_lr: float = 0.1
    lr_drop_epochs: tuple = (25, 35)
    lr_drop_factor: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    tau: float = 2.0
    batch_plan: BatchPlan = field(default_factory=lambda: BatchPlan(32, 8))
    # None means new_batch_size + replay_batch_size.
    joint_batch_size: int | None = None
    seed: int = 0
    post_process: str = "none"
    bft_epochs: int = 30
    bft_head_only: bool = False
    score_reserve_fraction: float = 0.1
    score_iterations: int = 200

    def __post_init__(self):
        if isinstance(self.method, str):
            object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "lr_drop_epochs", tuple(int(e) for e in self.lr_drop_epochs))
        if self.epochs < 1:
            raise InvalidArgument("epochs must be >= 1")
        if not self.base_lr > 0 or not self.tau > 0:
            raise InvalidArgument("base_lr and tau must be positive")
        drops = self.lr_drop_epochs
        if any(b <= a for a, b in zip(drops, drops[1:])) or any(not 0 <= d < self.epochs for d in drops):
            raise InvalidArgument(f"lr drop epochs {drops} must increase strictly within [0, epochs)")
        if self.post_process not in ("none", "bft", "score"):
            raise InvalidArgument(f"unknown post_process {self.post_process!r}")

    @property
    def joint_size(self) -> int:
        if self.joint_batch_size is not None:
            return self.joint_batch_size
        return self.batch_plan.new_batch_size + self.batch_plan.replay_batch_size


@dataclass
class RunState:
    layout: TaskLayout
    model: IncrementalClassifier
    memory: ExemplarMemory
    rng: np.random.Generator
    snapshots: list[ModelSnapshot] = field(default_factory=list)
    reports: list[EvalReport] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)

    @property
    def completed_tasks(self) -> int:
        return len(self.snapshots)

    def copy(self) -> "RunState":
        return copy.deepcopy(self)


def new_run_state(layout: TaskLayout, layer_dims, capacity: int, seed: int,
                  head_init: str = "uniform") -> RunState:
    model = IncrementalClassifier(layer_dims, layout.classes_per_task, seed=seed, head_init=head_init)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    return RunState(layout, model, ExemplarMemory(capacity, layer_dims[0]), rng)


def learning_rate(config: TrainConfig, epoch: int) -> float:
    drops = sum(1 for d in config.lr_drop_epochs if d <= epoch)
    return config.base_lr * config.lr_drop_factor ** drops


def batch_loss(method: Method, logits, teacher_logits, labels, layout: TaskLayout, t: int,
               tau: float) -> tuple[LossResult, dict]:
    """Mean-reduced loss of ``method`` over a batch, with its component values.

    Distillation is skipped at t=1. The returned gradient is already divided
    by the batch size.
    """
    n = logits.shape[0]
    if method.uses_ss_loss:
        cls = ce_ss_loss(logits, labels, layout, t)
    else:
        cls = ce_loss(logits, labels, range(0, layout.seen_classes(t)))
    parts = {"ce": float(np.mean(cls.value))}
    total = cls
    if t >= 2 and method.kd_kind != "none":
        if method.kd_kind == "global":
            kd = gkd_loss(logits, teacher_logits, layout.old_new_split(t)[0], tau)
        else:
            kd = tkd_loss(logits, teacher_logits, layout, t, tau)
        parts["kd"] = float(np.mean(kd.value))
        total = total + kd
    return LossResult(float(np.mean(total.value)), total.logit_grads / n), parts


def _epoch_batches(state: RunState, task_data: LabeledDataset, config: TrainConfig, t: int):
    plan = config.batch_plan
    if t == 1 or len(state.memory) == 0:
        return rp_batches(task_data, None, BatchPlan(plan.new_batch_size, 0), state.rng)
    if config.method.uses_rp_batches:
        return rp_batches(task_data, state.memory, plan, state.rng)
    return joint_batches(task_data, state.memory, config.joint_size, state.rng)


def _reserve_split(task_data: LabeledDataset, fraction: float):
    """First ``fraction`` of every class (stream order) held out, rest for training."""
    hold = np.zeros(len(task_data), dtype=bool)
    for c in np.unique(task_data.labels):
        idx = np.flatnonzero(task_data.labels == c)
        hold[idx[:max(1, int(round(fraction * idx.size)))]] = True
    return task_data.subset(np.flatnonzero(~hold)), task_data.subset(np.flatnonzero(hold))


def train_task(state: RunState, task_data: LabeledDataset, config: TrainConfig, t: int,
               hook: Callable[[dict], None] | None = None) -> None:
    """Learn task ``t``: expand, train, post-process, update memory, snapshot.

    ``hook`` (if given) is called once per SGD step with a dict describing the
    loss used and the batch composition.
    """
    layout = state.layout
    if t != state.completed_tasks + 1:
        raise InvalidArgument(f"expected task {state.completed_tasks + 1}, got {t}")
    classes = layout.task_classes(t)
    y = task_data.labels
    if len(task_data) == 0 or np.any((y < classes.start) | (y >= classes.stop)):
        raise InvalidArgument(f"task {t} data must be non-empty with labels in {classes}")

    holdout_new = None
    if config.post_process == "score" and t >= 2:
        task_data, holdout_new = _reserve_split(task_data, config.score_reserve_fraction)

    model = state.model
    model.expand_head()
    teacher = state.snapshots[-1] if t >= 2 else None
    n_old = layout.seen_classes(t - 1)
    method = config.method
    opt = SGDState()
    for epoch in range(config.epochs):
        lr = learning_rate(config, epoch)
        sums = {"loss": 0.0}
        steps = 0
        for batch in _epoch_batches(state, task_data, config, t):
            try:
                with np.errstate(over="raise", invalid="raise", divide="raise"):
                    logits, cache = model.forward_train(batch.inputs)
                    teacher_logits = (teacher.scores(batch.inputs)[:, :n_old]
                                      if teacher is not None else None)
                    res, parts = batch_loss(method, logits, teacher_logits, batch.labels, layout,
                                            t, config.tau)
                    if hook is not None:
                        hook({"task": t, "epoch": epoch, "loss_name": method.loss_name_at(t),
                              "batch_size": len(batch), "num_replay": batch.num_replay, "lr": lr})
                    grads = model.backward(batch.inputs, res.logit_grads, cache)
                    sgd_update(model.parameters(), grads, lr, config.momentum,
                               config.weight_decay, opt, config.nesterov)
            except FloatingPointError as exc:
                raise NumericFailure(f"task {t} epoch {epoch}: {exc}") from None
            sums["loss"] += res.value
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            steps += 1
        state.log.append({"task": t, "epoch": epoch, "lr": lr,
                          **{k: v / steps for k, v in sums.items()}})

    state.memory.update(task_data, layout, t)
    if t >= 2 and config.post_process == "bft":
        balanced_fine_tune(state, config, t)
    elif t >= 2 and config.post_process == "score":
        holdout = _score_holdout(state, holdout_new, t)
        alpha, beta = fit_score_correction(state, holdout, t, iterations=config.score_iterations)
        model.correction = (alpha, beta, classes)
    state.snapshots.append(model.snapshot())


def _score_holdout(state: RunState, holdout_new: LabeledDataset, t: int) -> LabeledDataset:
    layout = state.layout
    old = state.memory.as_dataset(layout.num_classes).restrict(layout.old_new_split(t)[0])
    both = LabeledDataset(np.concatenate([old.inputs, holdout_new.inputs]),
                          np.concatenate([old.labels, holdout_new.labels]), layout.num_classes)
    counts = both.class_counts()[:layout.seen_classes(t)]
    k = int(counts.min())
    if k == 0:
        raise InvalidArgument("score-correction holdout is missing classes")
    keep = np.concatenate([np.flatnonzero(both.labels == c)[:k] for c in range(layout.seen_classes(t))])
    return both.subset(np.sort(keep))


def run_incremental(datasets, config: TrainConfig, layout: TaskLayout, *, test_set: LabeledDataset,
                    capacity: int, layer_dims=(16, 64, 32), ks=(1, 2),
                    hook: Callable[[dict], None] | None = None,
                    head_init: str = "uniform") -> RunState:
    """Train over all tasks, evaluating on every seen class after each one.

    On failure the partially trained state is attached to the exception as
    ``run_state``.
    """
    datasets = list(datasets)
    if len(datasets) != layout.total_tasks:
        raise InvalidArgument(f"{len(datasets)} datasets for {layout.total_tasks} tasks")
    state = new_run_state(layout, layer_dims, capacity, config.seed, head_init)
    try:
        for t in range(1, layout.total_tasks + 1):
            train_task(state, datasets[t - 1], config, t, hook=hook)
            old = state.snapshots[-2] if t >= 2 else None
            state.reports.append(evaluate(state.model, test_set, layout, t, ks=ks,
                                          old_snapshot=old, new_task_data=datasets[t - 1]))
    except Exception as exc:
        exc.run_state = state
        raise
    return state


def balanced_fine_tune(state: RunState, config: TrainConfig, t: int,
                       epochs: int | None = None, lr: float | None = None,
                       head_only: bool | None = None) -> None:
    """Fine-tune on the (class-balanced) exemplar memory with plain CE at lr 0.001/t."""
    if t < 2:
        raise InvalidArgument("balanced fine-tuning applies from task 2 on")
    layout = state.layout
    epochs = config.bft_epochs if epochs is None else epochs
    lr = 0.001 / t if lr is None else lr
    head_only = config.bft_head_only if head_only is None else head_only
    balanced = state.memory.as_dataset(layout.num_classes)
    model = state.model
    active = range(0, layout.seen_classes(t))
    opt = SGDState()
    n_body = 2 * len(model.weights)
    for _ in range(epochs):
        for batch in joint_batches(balanced, None, config.batch_plan.new_batch_size, state.rng):
            logits, cache = model.forward_train(batch.inputs)
            res = ce_loss(logits, batch.labels, active)
            grads = model.backward(batch.inputs, res.logit_grads / len(batch), cache)
            params = model.parameters()
            if head_only:
                params, grads = params[n_body:], grads[n_body:]
            sgd_update(params, grads, lr, config.momentum, config.weight_decay, opt, config.nesterov)


def _correction_objective(z, y, r: range, alpha, beta):
    zc = apply_score_correction(z, alpha, beta, r)
    res = ce_loss(zc, y, range(0, z.shape[1]))
    g = res.logit_grads[:, r.start:r.stop] / z.shape[0]
    return float(np.mean(res.value)), float(np.sum(g * z[:, r.start:r.stop])), float(np.sum(g))


def fit_score_correction_logits(logits, labels, new_range: range, iterations: int = 200,
                                fix_alpha: bool = False) -> tuple[float, float]:
    """Fit ``(alpha, beta)`` for the new-class columns by minimizing mean CE.

    Full-batch gradient descent from ``(1, 0)`` with a backtracking
    (Armijo) step size.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    alpha, beta = 1.0, 0.0
    f, ga, gb = _correction_objective(z, y, new_range, alpha, beta)
    for _ in range(iterations):
        if fix_alpha:
            ga = 0.0
        gsq = ga * ga + gb * gb
        if gsq < 1e-24:
            break
        step = 1.0
        while step > 1e-12:
            a2, b2 = alpha - step * ga, beta - step * gb
            f2, ga2, gb2 = _correction_objective(z, y, new_range, a2, b2)
            if f2 <= f - 0.5 * step * gsq:
                break
            step *= 0.5
        else:
            break
        alpha, beta, f, ga, gb = a2, b2, f2, ga2, gb2
    return alpha, beta


def fit_score_correction(state: RunState, holdout: LabeledDataset, t: int,
                         iterations: int = 200) -> tuple[float, float]:
    if t < 2:
        raise InvalidArgument("score correction applies from task 2 on")
    n_cls = state.layout.seen_classes(t)
    counts = np.bincount(holdout.labels, minlength=n_cls)[:n_cls]
    if counts.min() == 0 or np.any(holdout.labels >= n_cls):
        raise InvalidArgument("holdout must cover every seen class and nothing else")
    z = state.model.forward(holdout.inputs)
    return fit_score_correction_logits(z, holdout.labels, state.layout.task_classes(t), iterations)


def branch_compare(state: RunState, task_data: LabeledDataset, config: TrainConfig,
                   hook: Callable[[dict], None] | None = None
                   ) -> tuple[IncrementalClassifier, IncrementalClassifier]:
    """Train task t twice from the same state, once with CE+GKD and once with CE+TKD."""
    t = state.completed_tasks + 1
    out = []
    for method in (Method.CE_GKD, Method.CE_TKD):
        branch = state.copy()
        train_task(branch, task_data, replace(config, method=method), t, hook=hook)
        out.append(branch.model)
    return out[0], out[1]
