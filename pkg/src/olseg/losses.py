"""Training losses: pixel-wise layer CE, column-wise surface CE, smooth L1 on surfaces."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, log
from .autodiff.tensor import tsum

LOG_CLAMP = 1e-12
IGNORE = -1


@dataclass
class LossWeights:
    mask_ce: float = 1.0
    line_ce: float = 1.0
    line_l1: float = 1.0

    def __post_init__(self):
        vals = (self.mask_ce, self.line_ce, self.line_l1)
        if any(v < 0 for v in vals) or not any(v > 0 for v in vals):
            raise ValueError(f"loss weights must be nonnegative with one positive, got {vals}")


@dataclass
class GroundTruth:
    """Targets for one batch in network coordinates.

    ``class_map`` is ``(N, H, W)`` with ``IGNORE`` for unlabeled pixels;
    ``boundary_rows`` and ``valid`` are ``(N, S, W)``.
    """

    class_map: np.ndarray
    boundary_rows: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.class_map = np.asarray(self.class_map)
        self.boundary_rows = np.asarray(self.boundary_rows, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.class_map.ndim == 2:
            self.class_map = self.class_map[None]
        if self.boundary_rows.ndim == 2:
            self.boundary_rows = self.boundary_rows[None]
            self.valid = self.valid.reshape(self.boundary_rows.shape)
        if self.valid.shape != self.boundary_rows.shape:
            raise ValueError("valid mask must match boundary_rows")


def _batched(t: Tensor, ndim: int) -> Tensor:
    return t.reshape((1,) + t.shape) if t.ndim == ndim - 1 else t


def mask_ce(mask_probs, gt: GroundTruth) -> Tensor:
    """Mean negative log-probability of the true class over labeled pixels."""
    p = _batched(as_tensor(mask_probs), 4)
    labels = gt.class_map
    if p.shape[:3] != labels.shape:
        raise ValueError(f"mask probs {p.shape} do not match class map {labels.shape}")
    n_classes = p.shape[-1]
    labeled = labels != IGNORE
    if labels[labeled].size and (labels[labeled].min() < 0 or labels[labeled].max() >= n_classes):
        raise ValueError("class map holds labels outside [0, C)")
    count = int(labeled.sum())
    if count == 0:
        raise ValueError("no labeled pixels for mask_ce")
    onehot = (labels[..., None] == np.arange(n_classes)).astype(p.dtype)
    return tsum(log(p, clamp=LOG_CLAMP) * onehot) * (-1.0 / count)


def _group_weights(valid: np.ndarray, dtype) -> np.ndarray:
    """Per-(sample, surface) averaging weights; groups without valid columns drop out."""
    per_group = valid.sum(axis=-1, keepdims=True)
    groups = int((per_group > 0).sum())
    if groups == 0:
        raise ValueError("no valid columns for the line losses")
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(valid, 1.0 / np.maximum(per_group, 1), 0.0) / groups
    return w.astype(dtype)


def target_rows(boundary_rows: np.ndarray, height: int) -> np.ndarray:
    """Nearest integer row for each boundary, clipped to the image."""
    return np.clip(np.rint(boundary_rows), 0, height - 1).astype(np.int64)


def line_ce(surface_probs, gt: GroundTruth) -> Tensor:
    """Column-wise cross-entropy of the row distribution against the one-hot truth row.

    ``surface_probs`` is ``(N, H, W, S)`` normalized over H.
    """
    p = _batched(as_tensor(surface_probs), 4)
    N, H, W, S = p.shape
    if gt.boundary_rows.shape != (N, S, W):
        raise ValueError(f"boundary rows {gt.boundary_rows.shape} do not match ({N}, {S}, {W})")
    weights = _group_weights(gt.valid, p.dtype)
    rows = target_rows(gt.boundary_rows, H)
    n_idx, s_idx, u_idx = np.indices((N, S, W))
    picked = p[n_idx, rows, u_idx, s_idx]  # (N, S, W)
    return tsum(log(picked, clamp=LOG_CLAMP) * weights) * -1.0


def smooth_l1(d) -> Tensor:
    """0.5 d^2 for |d| < 1, |d| - 0.5 otherwise."""
    d = as_tensor(d)
    a = np.abs(d.data)
    inner = a < 1
    out = np.where(inner, 0.5 * d.data * d.data, a - 0.5)
    return Tensor.from_op(out, (d,), lambda g: (g * np.where(inner, d.data, np.sign(d.data)),))


def line_l1(surfaces, gt: GroundTruth) -> Tensor:
    """Smooth L1 between predicted and true surface rows, averaged like ``line_ce``."""
    s = _batched(as_tensor(surfaces), 3)
    if s.shape != gt.boundary_rows.shape:
        raise ValueError(f"surfaces {s.shape} do not match boundary rows {gt.boundary_rows.shape}")
    weights = _group_weights(gt.valid, s.dtype)
    target = np.where(gt.valid, gt.boundary_rows, 0.0).astype(s.dtype)
    return tsum(smooth_l1(s - target) * weights)


def total_loss(terms, weights: LossWeights | None = None) -> Tensor:
    """Weighted sum of ``(mask_ce, line_ce, line_l1)``."""
    weights = weights or LossWeights()
    mask_term, ce_term, l1_term = (as_tensor(t) for t in terms)
    for name, t in (("mask_ce", mask_term), ("line_ce", ce_term), ("line_l1", l1_term)):
        if not math.isfinite(float(t.data)):
            raise FloatingPointError(f"{name} is not finite")
    return mask_term * weights.mask_ce + ce_term * weights.line_ce + l1_term * weights.line_l1
