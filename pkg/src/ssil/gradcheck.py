"""Finite-difference verification of every loss composed through a small MLP.

Each instance draws a tiny :class:`IncrementalClassifier`, a batch, labels,
teacher logits and a temperature from its own seed. The analytic parameter
gradient (loss logit-gradient pushed through ``backward``) is compared with
central differences of the mean batch loss. The perturbed forward passes are
evaluated for all ``2P`` shifted parameter vectors at once.

Draws where a shift flips the sign of any ReLU pre-activation are rejected
and redrawn, since the loss is not differentiable there.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layout import TaskLayout
from .losses import ce_loss, ce_ss_loss, gkd_loss, ssil_loss, tkd_loss
from .model import IncrementalClassifier
from .numerics import relative_error

LOSS_NAMES = ("ce", "gkd", "tkd", "ce_ss", "ssil")
TOLERANCE = 1e-5
STEP = 1e-5

LAYER_DIMS = (4, 6, 5)
CLASSES_PER_TASK = 2
NUM_TASKS = 3
BATCH = 4


@dataclass
class CheckResult:
    loss: str
    max_error: float
    worst_seed: int
    instances: int
    rejected: int

    @property
    def ok(self) -> bool:
        return self.max_error < TOLERANCE


def _loss_fn(name: str, layout: TaskLayout, t: int, labels, teacher, tau: float):
    n_seen = layout.seen_classes(t)
    old = layout.old_new_split(t)[0]
    if name == "ce":
        return lambda z: ce_loss(z, labels, range(0, n_seen))
    if name == "gkd":
        return lambda z: gkd_loss(z, teacher, old, tau)
    if name == "tkd":
        return lambda z: tkd_loss(z, teacher, layout, t, tau)
    if name == "ce_ss":
        return lambda z: ce_ss_loss(z, labels, layout, t)
    if name == "ssil":
        return lambda z: ssil_loss(z, teacher, labels, layout, t, tau)
    raise ValueError(f"unknown loss {name!r}")


def _batched_forward(model: IncrementalClassifier, flats: np.ndarray, x: np.ndarray):
    """Logits ``(K, n, C)`` and stacked pre-activation signs for ``K`` flat parameter vectors."""
    k = flats.shape[0]
    h = np.broadcast_to(x, (k,) + x.shape)
    i = 0
    signs = []
    for w, b in zip(model.weights, model.biases):
        wk = flats[:, i:i + w.size].reshape((k,) + w.shape)
        i += w.size
        bk = flats[:, i:i + b.size]
        i += b.size
        pre = np.einsum("knd,kod->kno", h, wk) + bk[:, None, :]
        signs.append(pre > 0)
        h = np.maximum(pre, 0.0)
    m = model.classes_per_task
    blocks = []
    for w, b in zip(model.head_weights, model.head_biases):
        wk = flats[:, i:i + w.size].reshape((k, m, -1))
        i += w.size
        bk = flats[:, i:i + m]
        i += m
        blocks.append(np.einsum("knf,kmf->knm", h, wk) + bk[:, None, :])
    return np.concatenate(blocks, axis=2), signs


def _draw(seed: int, name: str):
    rng = np.random.default_rng([seed, LOSS_NAMES.index(name)])
    t = int(rng.integers(2, NUM_TASKS + 1))
    layout = TaskLayout(NUM_TASKS, CLASSES_PER_TASK)
    model = IncrementalClassifier(LAYER_DIMS, CLASSES_PER_TASK, seed=int(rng.integers(2**31)))
    for _ in range(t):
        model.expand_head()
    # Larger-than-init parameters give logits of order 1 to a few.
    model.set_flat(rng.normal(0.0, 1.0, model.num_parameters()))
    x = rng.normal(0.0, 1.0, (BATCH, LAYER_DIMS[0]))
    labels = rng.integers(0, layout.seen_classes(t), BATCH)
    teacher = rng.normal(0.0, 2.0, (BATCH, layout.seen_classes(t - 1)))
    tau = float(rng.uniform(0.5, 4.0))
    return layout, t, model, x, labels, teacher, tau


def check_instance(name: str, seed: int, fault: float = 0.0):
    """Relative error for one instance, or ``None`` if the draw sits on a ReLU kink."""
    layout, t, model, x, labels, teacher, tau = _draw(seed, name)
    fn = _loss_fn(name, layout, t, labels, teacher, tau)

    logits, cache = model.forward_train(x)
    res = fn(logits)
    g = res.logit_grads / BATCH
    if fault:
        g = g * (1.0 + fault)
    analytic = np.concatenate([a.ravel() for a in model.backward(x, g, cache)])

    theta = model.get_flat()
    p = theta.size
    eye = np.eye(p) * STEP
    flats = np.concatenate([theta[None, :], theta + eye, theta - eye])
    z, signs = _batched_forward(model, flats, x)
    for s in signs:
        if np.any(s != s[0]):
            return None
    if np.max(np.abs(z[0] - logits)) > 1e-12 * max(1.0, np.max(np.abs(logits))):
        raise AssertionError("batched forward disagrees with the model")
    tiled = _loss_fn(name, layout, t, np.tile(labels, 2 * p), np.tile(teacher, (2 * p, 1)), tau)
    vals = np.asarray(tiled(z[1:].reshape(-1, z.shape[2])).value).reshape(2 * p, BATCH).mean(axis=1)
    numeric = (vals[:p] - vals[p:]) / (2 * STEP)
    return relative_error(analytic, numeric)


def run_suite(instances: int = 1000, seed: int = 0, losses=LOSS_NAMES,
              fault: dict | None = None) -> list[CheckResult]:
    """Check ``instances`` accepted draws per loss.

    ``fault`` maps a loss name to a relative perturbation applied to its
    analytic gradient; it exists so the checker itself can be tested.
    """
    fault = fault or {}
    out = []
    for name in losses:
        worst, worst_seed, done, rejected = 0.0, -1, 0, 0
        s = seed
        while done < instances:
            err = check_instance(name, s, fault.get(name, 0.0))
            if err is None:
                rejected += 1
            else:
                done += 1
                if err > worst or worst_seed < 0:
                    worst, worst_seed = err, s
            s += 1
        out.append(CheckResult(name, worst, worst_seed, done, rejected))
    return out
