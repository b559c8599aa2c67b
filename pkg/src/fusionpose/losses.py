"""Confidence weighting and the (weighted) MPJPE training loss."""

from __future__ import annotations

import numpy as np

from fusionpose.model import Pose3D

# Below this joint error the loss gradient direction is undefined; use zero.
DEGENERATE_NORM = 1e-12


def confidence_weights(c) -> np.ndarray:
    """Per-joint loss weight ``exp(1 - 1/c**2)``; 1 at full confidence, -> 0 as c -> 0."""
    c = np.asarray(c, dtype=float)
    if (c <= 0).any() or (c > 1).any():
        raise ValueError("confidence weights are defined for c in (0, 1]; mask zero-confidence joints first")
    return np.exp(1.0 - 1.0 / c**2)


def weighted_mpjpe(pred: np.ndarray, target: np.ndarray, valid: np.ndarray, beta: np.ndarray):
    """Batch mean of per-sample weighted MPJPE and its gradient w.r.t. ``pred``.

    Shapes: pred/target (B, J, 3), valid/beta (B, J). Each sample is
    averaged over its own valid joints.
    """
    valid = np.asarray(valid, dtype=bool)
    n_valid = valid.sum(axis=1)
    if (n_valid == 0).any():
        raise ValueError("every sample needs at least one valid target joint")
    diff = pred - target
    diff = np.where(valid[..., None], diff, 0.0)
    norm = np.sqrt((diff * diff).sum(axis=-1))
    w = np.where(valid, beta, 0.0) / n_valid[:, None]
    per_sample = (w * norm).sum(axis=1)
    B = len(pred)
    safe = norm >= DEGENERATE_NORM
    scale = np.where(safe, w / np.where(safe, norm, 1.0), 0.0) / B
    grad = (scale[..., None] * diff).astype(pred.dtype, copy=False)
    return float(per_sample.mean()), grad


def weighted_mpjpe_loss(pred: Pose3D, target: Pose3D, beta=None):
    """Single-pose form; returns (loss, gradient of shape (13, 3))."""
    beta = np.ones(len(target.valid)) if beta is None else np.asarray(beta, dtype=float)
    loss, grad = weighted_mpjpe(pred.joints[None], target.joints[None], target.valid[None], beta[None])
    return loss, grad[0]
