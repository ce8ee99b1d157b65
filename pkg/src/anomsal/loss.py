"""Weighted dice-style reconstruction error and its gradient.

For a predicted occupancy grid ``p``, a binary target ``t`` and a binary
weight grid ``w``::

    I = sum(p * t)              # intersection, unweighted
    U = sum(max(p, t) * w)      # union, weighted
    R = 1 - I / U

A sample is *degenerate* when its target has no occupied cell or when
``U < EPS``; such samples score ``R = 0`` and contribute no gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EPS = 1e-7


@dataclass
class LossBreakdown:
    intersection: np.ndarray
    union: np.ndarray
    errors: np.ndarray
    degenerate: np.ndarray

    @property
    def mean(self) -> float:
        return batch_loss(self.errors)


def _batched(pred, target, weights):
    pred = np.asarray(pred)
    target = np.asarray(target)
    weights = np.asarray(weights)
    if not pred.shape == target.shape == weights.shape:
        raise ValueError(
            f"shape mismatch: pred {pred.shape}, target {target.shape}, weights {weights.shape}"
        )
    b = pred.shape[0] if pred.ndim == 4 else 1
    return (pred.reshape(b, -1).astype(np.float64), target.reshape(b, -1).astype(np.float64),
            weights.reshape(b, -1).astype(np.float64))


def loss_breakdown(pred, target, weights) -> LossBreakdown:
    """Per-sample I, U and R for a batch (leading axis) or a single 3-D grid."""
    p, t, w = _batched(pred, target, weights)
    inter = np.sum(p * t, axis=1)
    union = np.sum(np.maximum(p, t) * w, axis=1)
    degenerate = (t.sum(axis=1) == 0) | (union < EPS)
    safe = np.where(degenerate, 1.0, union)
    errors = np.where(degenerate, 0.0, 1.0 - inter / safe)
    return LossBreakdown(inter, union, errors, degenerate)


def reconstruction_error(pred, target, weights) -> float:
    """R for one grid."""
    bd = loss_breakdown(np.asarray(pred)[None], np.asarray(target)[None], np.asarray(weights)[None])
    return float(bd.errors[0])


def reconstruction_errors(pred, target, weights) -> np.ndarray:
    """R for every sample of a (B, n, n, n) batch."""
    return loss_breakdown(pred, target, weights).errors


def reconstruction_error_backward(pred, target, weights) -> np.ndarray:
    """dR/dpred with the same shape as ``pred``; batched input gives per-sample gradients.

    Where ``pred == target`` the union's max routes the gradient to ``pred``.
    """
    shape = np.shape(pred)
    p, t, w = _batched(pred, target, weights)
    inter = np.sum(p * t, axis=1, keepdims=True)
    union = np.sum(np.maximum(p, t) * w, axis=1, keepdims=True)
    degenerate = (t.sum(axis=1, keepdims=True) == 0) | (union < EPS)
    safe = np.where(degenerate, 1.0, union)
    d_union = w * (p >= t)
    grad = -t / safe + inter * d_union / safe ** 2
    grad = np.where(degenerate, 0.0, grad)
    return grad.reshape(shape)


def batch_loss(per_sample_errors) -> float:
    """Mean reconstruction error over a batch."""
    errs = [float(e) for e in np.ravel(per_sample_errors)]
    if not errs:
        raise ValueError("batch_loss needs at least one sample")
    return math.fsum(errs) / len(errs)
