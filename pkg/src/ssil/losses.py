"""Classification and distillation losses with exact logit gradients.

Every loss accepts either a single logit vector with an integer label, or a
batch ``(n, C)`` with an integer label array. For a batch the value is the
per-sample loss vector and the gradient has one row per sample; reduction is
left to the caller. Gradients are zero outside the columns a loss reads.

KD terms are the plain KL divergences of temperature-scaled softmaxes, so
their logit gradient is ``(p_student - p_teacher) / tau`` with no ``tau**2``
rescaling.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .layout import TaskLayout
from .numerics import kl_divergence, softmax_range


@dataclass
class LossResult:
    value: float | np.ndarray
    logit_grads: np.ndarray

    def __add__(self, other: "LossResult") -> "LossResult":
        return LossResult(self.value + other.value, self.logit_grads + other.logit_grads)


def _prep(logits, labels=None):
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    if labels is None:
        return z2, None, single
    y = np.atleast_1d(np.asarray(labels))
    if y.shape != (z2.shape[0],):
        raise InvalidArgument("one label per logit row is required")
    if not np.issubdtype(y.dtype, np.integer):
        raise InvalidArgument("labels must be integers")
    return z2, y, single


def _finish(value, grad, single):
    if single:
        return LossResult(float(value[0]), grad[0])
    return LossResult(value, grad)


def _ce_rows(z, y, r: range, grad: np.ndarray) -> np.ndarray:
    """CE over range ``r`` for rows ``z``; writes p - onehot into ``grad``."""
    s = z[:, r.start:r.stop]
    s = s - s.max(axis=1, keepdims=True)
    lse = np.log(np.exp(s).sum(axis=1))
    idx = y - r.start
    rows = np.arange(z.shape[0])
    value = lse - s[rows, idx]
    p = np.exp(s - lse[:, None])
    p[rows, idx] -= 1.0
    grad[:, r.start:r.stop] = p
    return value


def ce_loss(logits, label, active_range: range) -> LossResult:
    """Softmax cross-entropy restricted to ``active_range``."""
    z, y, single = _prep(logits, label)
    if len(active_range) == 0 or active_range.start < 0 or active_range.stop > z.shape[1]:
        raise InvalidArgument(f"bad active range {active_range}")
    if np.any((y < active_range.start) | (y >= active_range.stop)):
        raise InvalidArgument("label outside the active range")
    grad = np.zeros_like(z)
    value = _ce_rows(z, y, active_range, grad)
    return _finish(value, grad, single)


def _kd(z, zt, r: range, tau: float, grad: np.ndarray) -> np.ndarray:
    p_s = softmax_range(z, r, tau)
    p_t = softmax_range(zt, r, tau)
    grad[:, r.start:r.stop] = (p_s - p_t) / tau
    return kl_divergence(p_t, p_s)


def _prep_teacher(z, teacher_logits, needed: int):
    zt = np.asarray(teacher_logits, dtype=np.float64)
    if zt.ndim == 1:
        zt = zt[None, :]
    if zt.shape[0] != z.shape[0] or zt.shape[1] < needed:
        raise InvalidArgument(f"teacher logits {zt.shape} do not cover {needed} old classes")
    return zt


def gkd_loss(logits, teacher_logits, old_range: range, tau: float) -> LossResult:
    """KL between teacher and student softmaxes taken jointly over all old classes."""
    if len(old_range) == 0:
        raise InvalidArgument("GKD needs at least one old class (t >= 2)")
    z, _, single = _prep(logits)
    zt = _prep_teacher(z, teacher_logits, old_range.stop)
    grad = np.zeros_like(z)
    value = _kd(z, zt, old_range, tau, grad)
    return _finish(np.atleast_1d(value), grad, single)


def tkd_loss(logits, teacher_logits, layout: TaskLayout, t: int, tau: float) -> LossResult:
    """Sum over old tasks of the KL between per-task-block softmaxes."""
    if t < 2:
        raise InvalidArgument("TKD needs at least one old task (t >= 2)")
    old, _ = layout.old_new_split(t)
    z, _, single = _prep(logits)
    zt = _prep_teacher(z, teacher_logits, old.stop)
    grad = np.zeros_like(z)
    value = np.zeros(z.shape[0])
    for s in range(1, t):
        value = value + _kd(z, zt, layout.task_classes(s), tau, grad)
    return _finish(value, grad, single)


def ce_ss_loss(logits, label, layout: TaskLayout, t: int) -> LossResult:
    """Separated-softmax CE.

    New-class samples use a softmax over the new task's classes only; old-class
    (exemplar) samples use one softmax over all old classes combined.
    """
    old, new = layout.old_new_split(t)
    z, y, single = _prep(logits, label)
    if z.shape[1] < new.stop:
        raise InvalidArgument(f"logits of width {z.shape[1]} do not cover task {t}")
    if np.any((y < 0) | (y >= new.stop)):
        raise InvalidArgument("label outside the classes seen up to task t")
    grad = np.zeros_like(z)
    value = np.zeros(z.shape[0])
    is_new = y >= new.start
    if is_new.any():
        g = np.zeros((int(is_new.sum()), z.shape[1]))
        value[is_new] = _ce_rows(z[is_new], y[is_new], new, g)
        grad[is_new] = g
    if (~is_new).any():
        g = np.zeros((int((~is_new).sum()), z.shape[1]))
        value[~is_new] = _ce_rows(z[~is_new], y[~is_new], old, g)
        grad[~is_new] = g
    return _finish(value, grad, single)


def ssil_loss(logits, teacher_logits, label, layout: TaskLayout, t: int, tau: float) -> LossResult:
    """Separated-softmax CE plus task-wise KD (KD term absent at t=1)."""
    if t >= 2 and teacher_logits is None:
        raise InvalidArgument("a teacher is required for t >= 2")
    res = ce_ss_loss(logits, label, layout, t)
    if t >= 2:
        res = res + tkd_loss(logits, teacher_logits, layout, t, tau)
    return res
