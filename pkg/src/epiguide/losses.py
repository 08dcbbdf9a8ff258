"""Attention-map supervision losses over raw (pre-softmax) logits.

Two variants, both with closed-form gradients:

* a dense loss pushing every logit toward its guide indicator, and
* a sparse variant that keeps off-line logits at zero but rewards only the
  strongest on-line logit per row.

Both operate on the raw cross-attention blocks, never on softmax outputs,
and return explicit gradients so the caller owns backpropagation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .guides import EpipolarGuide


@dataclass(frozen=True)
class LossResult:
    """Scalar loss plus gradients with respect to both logit maps."""

    value: float
    grad12: np.ndarray
    grad21: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.value) or self.value < 0:
            raise ValueError("loss value must be finite and non-negative")
        if not (np.all(np.isfinite(self.grad12)) and np.all(np.isfinite(self.grad21))):
            raise ValueError("gradients must be finite")


def _stable_bce(a: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise BCE of sigmoid(a) against y, overflow-safe, with d/da."""
    a = np.asarray(a, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    value = np.maximum(a, 0.0) - a * y + np.log1p(np.exp(-np.abs(a)))
    sig = np.empty_like(a)
    pos = a >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    sig[~pos] = ea / (1.0 + ea)
    return value, sig - y


def bce_with_logit(a: float, y: float) -> tuple[float, float]:
    """Binary cross-entropy of sigmoid(a) against label y, and d/da."""
    if not np.isfinite(a):
        raise ValueError("logit must be finite")
    if y not in (0, 1):
        raise ValueError("label must be 0 or 1")
    value, grad = _stable_bce(np.float64(a), np.float64(y))
    return float(value), float(grad)


def _check_shapes(a12, a21, guide: EpipolarGuide):
    a12 = np.asarray(a12, dtype=np.float64)
    a21 = np.asarray(a21, dtype=np.float64)
    if a12.shape != guide.g12.shape:
        raise ShapeMismatch(f"a12 shape {a12.shape} != guide {guide.g12.shape}")
    if a21.shape != guide.g21.shape:
        raise ShapeMismatch(f"a21 shape {a21.shape} != guide {guide.g21.shape}")
    if not (np.all(np.isfinite(a12)) and np.all(np.isfinite(a21))):
        raise ValueError("logits must be finite")
    return a12, a21


def _check_reduction(reduction: str):
    if reduction not in ("sum", "mean"):
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")


def epipolar_loss(a12, a21, guide: EpipolarGuide, reduction: str = "mean") -> LossResult:
    """Dense BCE between every raw logit and its guide indicator.

    Sum reduction reproduces the written double sum over both directions;
    mean divides by the total entry count (2 * s**4 for equal square grids).
    """
    _check_reduction(reduction)
    a12, a21 = _check_shapes(a12, a21, guide)
    v12, g12 = _stable_bce(a12, guide.g12)
    v21, g21 = _stable_bce(a21, guide.g21)
    total = float(v12.sum() + v21.sum())
    if reduction == "mean":
        scale = 1.0 / (a12.size + a21.size)
        return LossResult(total * scale, g12 * scale, g21 * scale)
    return LossResult(total, g12, g21)


def _max_direction(a: np.ndarray, g: np.ndarray) -> tuple[float, np.ndarray, int]:
    """One direction of the sparse loss: zero terms + per-row max terms."""
    grad = np.zeros_like(a)
    off = g == 0
    v_zero, d_zero = _stable_bce(a[off], np.zeros(off.sum()))
    grad[off] = d_zero
    value = float(v_zero.sum())
    terms = int(off.sum())
    support_rows = np.flatnonzero(g.any(axis=1))
    if len(support_rows):
        masked = np.where(g[support_rows] == 1, a[support_rows], -np.inf)
        arg = np.argmax(masked, axis=1)  # argmax takes the lowest column on ties
        peak = a[support_rows, arg]
        v_max, d_max = _stable_bce(peak, np.ones(len(peak)))
        value += float(v_max.sum())
        grad[support_rows, arg] += d_max
        terms += len(support_rows)
    return value, grad, terms


def max_epipolar_loss(a12, a21, guide: EpipolarGuide, reduction: str = "mean") -> LossResult:
    """Sparse variant: off-line logits toward 0, per-row best on-line logit
    toward 1, gradient flowing only to that argmax (lowest column on ties).

    Mean reduction divides by the number of BCE terms actually summed.
    """
    _check_reduction(reduction)
    a12, a21 = _check_shapes(a12, a21, guide)
    v12, grad12, t12 = _max_direction(a12, guide.g12)
    v21, grad21, t21 = _max_direction(a21, guide.g21)
    total = v12 + v21
    if reduction == "mean":
        scale = 1.0 / max(t12 + t21, 1)
        return LossResult(total * scale, grad12 * scale, grad21 * scale)
    return LossResult(total, grad12, grad21)
