"""Softmax / KL primitives and the finite-difference gradient oracle.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Class index
ranges are Python ``range`` objects with unit step.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import InvalidArgument, NumericFailure

# KL clamps the second argument here before taking logs.
KL_FLOOR = 1e-300


def as_matrix(x, cols: int | None = None) -> np.ndarray:
    """Coerce ``x`` to a finite, C-contiguous 2-D float64 array."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise InvalidArgument(f"expected a 2-D matrix, got shape {arr.shape}")
    if cols is not None and arr.shape[1] != cols:
        raise InvalidArgument(f"expected {cols} columns, got {arr.shape[1]}")
    check_finite(arr, "matrix")
    return arr


def check_finite(arr: np.ndarray, what: str = "value") -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericFailure(f"non-finite entries in {what}")


def _check_range(r: range, width: int) -> None:
    if r.step != 1:
        raise InvalidArgument("class ranges must have unit step")
    if len(r) == 0:
        raise InvalidArgument("empty class range")
    if r.start < 0 or r.stop > width:
        raise InvalidArgument(f"range {r} outside logits of width {width}")


def softmax_range(logits, r: range, tau: float = 1.0) -> np.ndarray:
    """Temperature softmax over the columns ``r`` of ``logits``.

    Works on a single logit vector or on a batch (rows are samples). Only the
    columns inside ``r`` are read; the result has ``len(r)`` columns.
    """
    z = np.asarray(logits, dtype=np.float64)
    _check_range(r, z.shape[-1])
    if not tau > 0:
        raise InvalidArgument(f"temperature must be positive, got {tau}")
    s = z[..., r.start:r.stop] / tau
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def kl_divergence(q, p) -> np.ndarray | float:
    """KL(q || p) along the last axis, with 0 * log(0 / p) taken as 0."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if q.shape != p.shape:
        raise InvalidArgument(f"shape mismatch: {q.shape} vs {p.shape}")
    pc = np.maximum(p, KL_FLOOR)
    safe_q = np.where(q > 0, q, 1.0)
    terms = np.where(q > 0, q * (np.log(safe_q) - np.log(pc)), 0.0)
    out = np.maximum(terms.sum(axis=-1), 0.0)
    return float(out) if out.ndim == 0 else out


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if not h > 0:
        raise InvalidArgument("step must be positive")
    x = np.array(x, dtype=np.float64).ravel()
    g = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericFailure(f"f is not finite around coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic, numeric) -> float:
    """Norm-wise relative error ``max|a - n| / max(max|a|, max|n|)``.

    Returns the absolute error when both vectors are identically zero.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    diff = np.max(np.abs(a - n)) if a.size else 0.0
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0))
    return float(diff / scale) if scale > 0 else float(diff)
