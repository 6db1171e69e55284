"""Cross-slice feature fusion.

Given feature maps ``F_1..F_n`` of the same encoder level for n neighbouring
B-scans, a 1x1 convolution over their channel concatenation produces one
logit per slice and pixel. A softmax over the slice axis turns those into
weights, and the fused map is::

    F_fused = sum_i W_i * F_i + mean_i F_i

with each ``W_i`` broadcast over the channels of ``F_i``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, as_tensor, conv2d, reshape, softmax, stack, transpose
from .autodiff.functional import normalization_tolerance
from .autodiff.tensor import mean, mul, tsum


class SliceFeatureStack:
    """n same-shaped feature maps held as one ``(N, n, h, w, c)`` tensor."""

    def __init__(self, stacked: Tensor, batched: bool = True):
        stacked = as_tensor(stacked)
        if stacked.ndim != 5:
            raise ValueError(f"expected (N, n, h, w, c), got shape {stacked.shape}")
        n = stacked.shape[1]
        if n < 3 or n % 2 == 0:
            raise ValueError(f"slice count must be odd and >= 3, got {n}")
        self.stacked = stacked
        self.batched = batched

    @classmethod
    def from_slices(cls, features: Sequence) -> "SliceFeatureStack":
        features = [as_tensor(f) for f in features]
        shapes = {f.shape for f in features}
        if len(shapes) != 1:
            raise ValueError(f"slice feature maps differ in shape: {sorted(shapes)}")
        ndim = features[0].ndim
        if ndim == 3:
            return cls(reshape(stack(features, axis=0), (1, len(features)) + features[0].shape), batched=False)
        if ndim == 4:
            return cls(stack(features, axis=1))
        raise ValueError(f"feature maps must be (h, w, c) or (N, h, w, c), got ndim {ndim}")

    @property
    def n(self) -> int:
        return self.stacked.shape[1]

    @property
    def channels(self) -> int:
        return self.stacked.shape[-1]

    @property
    def features(self) -> list[Tensor]:
        return [self._unbatch(self.stacked[:, i]) for i in range(self.n)]

    def _unbatch(self, t: Tensor) -> Tensor:
        return t if self.batched else reshape(t, t.shape[1:])


@dataclass
class CffParams:
    weight: Tensor  # (1, 1, n*c, n)
    bias: Tensor | None = None  # (n,)

    @classmethod
    def zeros(cls, n: int, channels: int, bias: bool = True, dtype=np.float32) -> "CffParams":
        w = Tensor(np.zeros((1, 1, n * channels, n), dtype=dtype), requires_grad=True)
        b = Tensor(np.zeros(n, dtype=dtype), requires_grad=True) if bias else None
        return cls(w, b)


def _slice_last(stack_: SliceFeatureStack) -> Tensor:
    # (N, n, h, w, c) -> (N, h, w, n, c)
    return transpose(stack_.stacked, (0, 2, 3, 1, 4))


def compute_weights(stack_: SliceFeatureStack, params: CffParams) -> Tensor:
    """Per-pixel slice weights, shape ``(N, h, w, n)`` (or ``(h, w, n)``)."""
    n, c = stack_.n, stack_.channels
    if params.weight.shape != (1, 1, n * c, n):
        raise ValueError(f"CFF kernel must be (1, 1, {n * c}, {n}), got {params.weight.shape}")
    if params.bias is not None and params.bias.shape != (n,):
        raise ValueError(f"CFF bias must be ({n},), got {params.bias.shape}")
    moved = _slice_last(stack_)
    concatenated = reshape(moved, moved.shape[:3] + (n * c,))
    logits = conv2d(concatenated, params.weight, params.bias)
    return stack_._unbatch(softmax(logits, axis=-1))


def fuse(stack_: SliceFeatureStack, weights: Tensor) -> Tensor:
    weights = as_tensor(weights)
    if not stack_.batched:
        weights = reshape(weights, (1,) + weights.shape)
    moved = _slice_last(stack_)
    if weights.shape != moved.shape[:4]:
        raise ValueError(f"weight volume {weights.shape} does not match features {moved.shape[:4]}")
    if np.any(np.abs(weights.data.sum(axis=-1) - 1.0) > normalization_tolerance(weights.dtype)):
        raise ValueError("slice weights are not normalized at every pixel")
    w = reshape(weights, weights.shape + (1,))
    fused = tsum(mul(moved, w), axis=3) + mean(moved, axis=3)
    return stack_._unbatch(fused)


def cff_forward(stack_: SliceFeatureStack, params: CffParams) -> Tensor:
    weights = compute_weights(stack_, params)
    return fuse(stack_, weights)
