"""MLP feature extractor with a growable per-task linear head.

Parameters are kept as a flat list in a fixed order: backbone ``(W, b)`` pairs
first, then one ``(W, b)`` pair per head block. Gradients ("gradient sets")
are lists aligned with that order.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, NumericFailure
from .numerics import as_matrix


HEAD_INITS = ("uniform", "centered", "zero")


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    a = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-a, a, size=shape)


def predict_from_logits(logits, classes_per_task: int):
    """Consolidated argmax over all seen classes; ties go to the lowest index.

    Returns ``(classes, tasks)`` with 0-based task indices. Accepts one logit
    vector (returns ints) or a batch (returns arrays).
    """
    z = np.asarray(logits, dtype=np.float64)
    cls = np.argmax(z, axis=-1)
    if z.ndim == 1:
        return int(cls), int(cls) // classes_per_task
    return cls, cls // classes_per_task


def apply_score_correction(logits, alpha: float, beta: float, new_range: range) -> np.ndarray:
    """Affine rescale ``alpha*z + beta`` of the new-class columns; others untouched."""
    z = np.array(logits, dtype=np.float64, copy=True)
    z[..., new_range.start:new_range.stop] = alpha * z[..., new_range.start:new_range.stop] + beta
    return z


class IncrementalClassifier:
    def __init__(self, layer_dims, classes_per_task: int, seed: int = 0,
                 head_init: str = "uniform"):
        layer_dims = [int(d) for d in layer_dims]
        if not layer_dims or min(layer_dims) < 1:
            raise InvalidArgument(f"bad layer_dims {layer_dims}")
        if classes_per_task < 1:
            raise InvalidArgument("classes_per_task must be >= 1")
        self.layer_dims = layer_dims
        self.classes_per_task = int(classes_per_task)
        self.seed = int(seed)
        if head_init not in HEAD_INITS:
            raise InvalidArgument(f"head_init must be one of {HEAD_INITS}")
        self.head_init = head_init
        self.rng = np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
            self.weights.append(_uniform(self.rng, (d_out, d_in), d_in))
            self.biases.append(_uniform(self.rng, (d_out,), d_in))
        self.head_weights: list[np.ndarray] = []
        self.head_biases: list[np.ndarray] = []
        # (alpha, beta, new-class range) applied by scores(); cleared on expand.
        self.correction: tuple[float, float, range] | None = None

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def feature_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_tasks(self) -> int:
        return len(self.head_weights)

    @property
    def num_classes(self) -> int:
        return self.classes_per_task * self.num_tasks

    def expand_head(self) -> None:
        f = self.feature_dim
        w = _uniform(self.rng, (self.classes_per_task, f), f)
        b = _uniform(self.rng, (self.classes_per_task,), f)
        if self.head_init == "centered":
            # Softmax-within-block losses never move a block's mean row, so a
            # random mean would persist as a per-block logit offset.
            w -= w.mean(axis=0)
            b -= b.mean()
        elif self.head_init == "zero":
            w[...] = 0.0
            b[...] = 0.0
        self.head_weights.append(w)
        self.head_biases.append(b)
        self.correction = None

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        for w, b in zip(self.head_weights, self.head_biases):
            out += [w, b]
        return out

    def parameter_names(self) -> list[str]:
        names = []
        for i in range(len(self.weights)):
            names += [f"layer{i}.weight", f"layer{i}.bias"]
        for i in range(self.num_tasks):
            names += [f"head{i}.weight", f"head{i}.bias"]
        return names

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.num_parameters():
            raise InvalidArgument("flat parameter vector has the wrong length")
        i = 0
        for p in self.parameters():
            p[...] = vec[i:i + p.size].reshape(p.shape)
            i += p.size

    # -- forward / backward -------------------------------------------------

    def _forward(self, x: np.ndarray):
        acts = [x]
        h = x
        for w, b in zip(self.weights, self.biases):
            h = np.maximum(h @ w.T + b, 0.0)
            acts.append(h)
        if not self.head_weights:
            raise InvalidArgument("model has no head blocks; call expand_head first")
        hw = np.concatenate(self.head_weights, axis=0)
        hb = np.concatenate(self.head_biases)
        return h @ hw.T + hb, acts

    def forward(self, batch) -> np.ndarray:
        """Raw logits ``(n, C_t)`` for a batch ``(n, input_dim)``."""
        x = as_matrix(batch, self.input_dim)
        return self._forward(x)[0]

    def scores(self, batch) -> np.ndarray:
        """Logits with the fitted score correction (if any) applied."""
        z = self.forward(batch)
        if self.correction is not None:
            alpha, beta, r = self.correction
            z = apply_score_correction(z, alpha, beta, r)
        return z

    def predict(self, x):
        z = self.scores(x)
        if np.ndim(x) == 1:
            z = z[0]
        return predict_from_logits(z, self.classes_per_task)

    def forward_train(self, batch):
        """Logits plus the activation cache that ``backward`` can reuse."""
        x = as_matrix(batch, self.input_dim)
        cache = self._forward(x)
        return cache[0], cache

    def backward(self, batch, logit_grads, cache=None) -> list[np.ndarray]:
        """Gradients of ``sum(logit_grads * logits)`` w.r.t. every parameter."""
        if cache is None:
            x = as_matrix(batch, self.input_dim)
            logits, acts = self._forward(x)
        else:
            logits, acts = cache
        g = np.asarray(logit_grads, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != logits.shape:
            raise InvalidArgument(f"logit_grads shape {g.shape} != logits shape {logits.shape}")
        feat = acts[-1]
        m = self.classes_per_task
        head_grads = []
        for i in range(self.num_tasks):
            gi = g[:, i * m:(i + 1) * m]
            head_grads += [gi.T @ feat, gi.sum(axis=0)]
        hw = np.concatenate(self.head_weights, axis=0)
        dh = g @ hw
        body_grads = []
        for li in range(len(self.weights) - 1, -1, -1):
            out = acts[li + 1]
            dpre = dh * (out > 0)
            body_grads = [dpre.T @ acts[li], dpre.sum(axis=0)] + body_grads
            dh = dpre @ self.weights[li]
        return body_grads + head_grads

    def sgd_step(self, grads, lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
                 state: "SGDState | None" = None, nesterov: bool = True) -> None:
        params = self.parameters()
        if state is None:
            state = SGDState()
        sgd_update(params, grads, lr, momentum, weight_decay, state, nesterov)

    # -- copies ---------------------------------------------------------------

    def clone(self) -> "IncrementalClassifier":
        return copy.deepcopy(self)

    def snapshot(self) -> "ModelSnapshot":
        return ModelSnapshot(self)


class ModelSnapshot:
    """Frozen copy of a classifier; usable as a distillation teacher."""

    def __init__(self, model: IncrementalClassifier):
        self._model = model.clone()
        for p in self._model.parameters():
            p.flags.writeable = False

    @property
    def num_tasks(self) -> int:
        return self._model.num_tasks

    @property
    def classes_per_task(self) -> int:
        return self._model.classes_per_task

    def forward(self, batch) -> np.ndarray:
        return self._model.forward(batch)

    def scores(self, batch) -> np.ndarray:
        return self._model.scores(batch)

    def predict(self, x):
        return self._model.predict(x)

    def restore(self) -> IncrementalClassifier:
        m = self._model.clone()
        for p in m.parameters():
            p.flags.writeable = True
        return m


@dataclass
class SGDState:
    velocity: list[np.ndarray] = field(default_factory=list)


def sgd_update(params, grads, lr, momentum, weight_decay, state: SGDState, nesterov=True):
    """In-place SGD with L2 weight decay and (optionally Nesterov) momentum.

    ``g <- g + wd*theta``, ``v <- mu*v + g``, then ``theta -= lr*(g + mu*v)``
    for Nesterov or ``theta -= lr*v`` otherwise. Velocity buffers are created
    lazily, so a state survives the addition of new head blocks.
    """
    if len(grads) != len(params):
        raise InvalidArgument("gradient set does not match parameters")
    while len(state.velocity) < len(params):
        state.velocity.append(np.zeros_like(params[len(state.velocity)]))
    updates = []
    for p, g, v in zip(params, grads, state.velocity):
        if np.shape(g) != p.shape or v.shape != p.shape:
            raise InvalidArgument("gradient/velocity shape mismatch")
        g = np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NumericFailure("non-finite gradient")
        g = g + weight_decay * p
        v_new = momentum * v + g
        step = g + momentum * v_new if nesterov else v_new
        p_new = p - lr * step
        if not (np.all(np.isfinite(p_new)) and np.all(np.isfinite(v_new))):
            raise NumericFailure("SGD update produced non-finite parameters")
        updates.append((p_new, v_new))
    for p, v, (p_new, v_new) in zip(params, state.velocity, updates):
        p[...] = p_new
        v[...] = v_new
