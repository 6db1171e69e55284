"""Residual encoder-decoder with cross-slice fusion in place of skip connections.

Every input slice goes through the same encoder. At each skip level the n
per-slice maps are fused (CFF) before reaching the decoder; the plain-skip
baseline instead forwards the centre slice's map unchanged. The last decoder
map feeds two 1x1 heads: a per-pixel layer classifier and a per-column
surface locator (row softmax, soft-argmax, ordering constraint).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import (
    Tensor,
    as_tensor,
    batch_norm,
    concat,
    conv2d,
    maxpool2,
    prelu,
    reshape,
    soft_argmax,
    softmax,
    transpose,
    upsample_bilinear2,
)
from .cff import CffParams, SliceFeatureStack, cff_forward


@dataclass
class ModelConfig:
    levels: int = 4
    base_channels: int = 32
    n_slices: int = 3
    n_surfaces: int = 5
    n_classes: int = 6
    input_size: tuple[int, int] = (512, 512)
    cff_bias: bool = True
    cff_bottleneck: bool = False
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.validate()

    def validate(self) -> None:
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if self.n_slices < 1 or self.n_slices % 2 == 0:
            raise ValueError(f"n_slices must be odd, got {self.n_slices}")
        if self.n_classes != self.n_surfaces + 1:
            raise ValueError("n_classes must equal n_surfaces + 1")
        step = 2 ** self.levels
        h, w = self.input_size
        if h % step or w % step:
            raise ValueError(f"input size {h}x{w} is not divisible by 2**levels = {step}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level


@dataclass
class ModelParams:
    config: ModelConfig
    fusion: str  # "cff" or "plain"
    tensors: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: t.data for k, t in self.tensors.items()}
        out.update(self.buffers)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.tensors) | set(self.buffers)
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, t in self.tensors.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: checkpoint shape {state[k].shape} != model shape {t.shape}")
            t.data = state[k].astype(t.dtype).copy()
        for k, b in self.buffers.items():
            self.buffers[k] = state[k].astype(b.dtype).copy()

    def cff(self, level) -> CffParams:
        prefix = f"cff.level{level}"
        return CffParams(self.tensors[f"{prefix}.weight"], self.tensors.get(f"{prefix}.bias"))


@dataclass
class NetworkOutput:
    mask_probs: Tensor  # (N, H, W, n_classes)
    surface_probs: Tensor  # (N, H, W, n_surfaces), normalized over H
    surfaces: Tensor  # (N, n_surfaces, W), ordered


def _block_shapes(c_in: int, c_out: int) -> dict[str, tuple[int, ...]]:
    shapes = {
        "conv1.weight": (3, 3, c_in, c_out),
        "bn1.gamma": (c_out,),
        "bn1.beta": (c_out,),
        "act1.slope": (c_out,),
        "conv2.weight": (3, 3, c_out, c_out),
        "bn2.gamma": (c_out,),
        "bn2.beta": (c_out,),
        "act2.slope": (c_out,),
    }
    if c_in != c_out:
        shapes["proj.weight"] = (1, 1, c_in, c_out)
    return shapes


def _block_layout(cfg: ModelConfig) -> list[tuple[str, int, int]]:
    layout = []
    for k in range(cfg.levels + 1):
        c_in = 1 if k == 0 else cfg.channels(k - 1)
        layout.append((f"enc.level{k}", c_in, cfg.channels(k)))
    for k in reversed(range(cfg.levels)):
        layout.append((f"dec.level{k}", cfg.channels(k + 1) + cfg.channels(k), cfg.channels(k)))
    return layout


def _fused_levels(cfg: ModelConfig) -> list[int]:
    return list(range(cfg.levels + 1 if cfg.cff_bottleneck else cfg.levels))


def build_model(cfg: ModelConfig, seed: int = 0, fusion: str = "cff", dtype=np.float32) -> ModelParams:
    """Initialise every weight deterministically from ``seed``.

    Convolutions use He-normal init; CFF kernels and biases start at zero so
    fusion begins as twice the slice mean. The trunk draws are identical for
    ``fusion="cff"`` and ``fusion="plain"``.
    """
    cfg.validate()
    if fusion not in ("cff", "plain"):
        raise ValueError(f"fusion must be 'cff' or 'plain', got {fusion!r}")
    rng = np.random.default_rng(seed)
    params = ModelParams(cfg, fusion)

    def add(name, arr):
        params.tensors[name] = Tensor(np.asarray(arr, dtype=dtype), requires_grad=True, name=name)

    for prefix, c_in, c_out in _block_layout(cfg):
        for suffix, shape in _block_shapes(c_in, c_out).items():
            name = f"{prefix}.{suffix}"
            if suffix.endswith("weight"):
                fan_in = shape[0] * shape[1] * shape[2]
                add(name, rng.normal(0.0, np.sqrt(2.0 / fan_in), shape))
            elif suffix.endswith("gamma"):
                add(name, np.ones(shape))
            elif suffix.endswith("slope"):
                add(name, np.full(shape, 0.25))
            else:
                add(name, np.zeros(shape))
            if suffix.endswith("gamma"):
                bn = name[: -len(".gamma")]
                params.buffers[f"{bn}.running_mean"] = np.zeros(shape, dtype=dtype)
                params.buffers[f"{bn}.running_var"] = np.ones(shape, dtype=dtype)

    c0 = cfg.channels(0)
    for head, width in (("mask", cfg.n_classes), ("surf", cfg.n_surfaces)):
        add(f"head.{head}.weight", rng.normal(0.0, np.sqrt(1.0 / c0), (1, 1, c0, width)))
        add(f"head.{head}.bias", np.zeros(width))

    if fusion == "cff":
        n = cfg.n_slices
        for k in _fused_levels(cfg):
            c = cfg.channels(k)
            add(f"cff.level{k}.weight", np.zeros((1, 1, n * c, n)))
            if cfg.cff_bias:
                add(f"cff.level{k}.bias", np.zeros(n))
    return params


def parameter_count(cfg: ModelConfig, fusion: str = "cff") -> int:
    """Closed-form learnable parameter count for ``cfg``."""
    total = 0
    for _, c_in, c_out in _block_layout(cfg):
        total += 9 * c_in * c_out + 9 * c_out * c_out + 6 * c_out
        if c_in != c_out:
            total += c_in * c_out
    c0 = cfg.channels(0)
    total += (c0 + 1) * (cfg.n_classes + cfg.n_surfaces)
    if fusion == "cff":
        n = cfg.n_slices
        for k in _fused_levels(cfg):
            total += n * cfg.channels(k) * n + (n if cfg.cff_bias else 0)
    return total


def _residual_block(params: ModelParams, prefix: str, x: Tensor, mode: str) -> Tensor:
    t, b, cfg = params.tensors, params.buffers, params.config
    h = x
    for i in (1, 2):
        h = conv2d(h, t[f"{prefix}.conv{i}.weight"])
        h = batch_norm(
            h, t[f"{prefix}.bn{i}.gamma"], t[f"{prefix}.bn{i}.beta"], cfg.bn_eps, mode,
            b[f"{prefix}.bn{i}.running_mean"], b[f"{prefix}.bn{i}.running_var"], cfg.bn_momentum,
        )
        h = prelu(h, t[f"{prefix}.act{i}.slope"])
    shortcut = conv2d(x, t[f"{prefix}.proj.weight"]) if f"{prefix}.proj.weight" in t else x
    return h + shortcut


def topology_guarantee(surfaces, axis: int = 0) -> Tensor:
    """Running maximum over the surface axis so that s_1 <= s_2 <= ... per column.

    Identity on already-ordered input and idempotent. Each output takes its
    gradient from the surface that supplied the running maximum.
    """
    surfaces = as_tensor(surfaces)
    axis = axis % surfaces.ndim
    x = np.moveaxis(surfaces.data, axis, 0)
    out = np.maximum.accumulate(x, axis=0)
    idx_shape = (-1,) + (1,) * (x.ndim - 1)
    positions = np.arange(x.shape[0]).reshape(idx_shape)
    source = np.maximum.accumulate(np.where(x == out, positions, 0), axis=0)

    def backward(g):
        g = np.moveaxis(g, axis, 0)
        gx = np.zeros_like(g)
        for k in range(x.shape[0]):
            gx[k] = np.where(source == k, g, 0).sum(axis=0)
        return (np.moveaxis(gx, 0, axis),)

    return Tensor.from_op(np.moveaxis(out, 0, axis), (surfaces,), backward)


FuseFn = Callable[[int, Tensor], Tensor]


def _cff_fuse(params: ModelParams) -> FuseFn:
    def fuse_level(level: int, stacked: Tensor) -> Tensor:
        return cff_forward(SliceFeatureStack(stacked), params.cff(level))

    return fuse_level


def _centre_fuse(level: int, stacked: Tensor) -> Tensor:
    return stacked[:, stacked.shape[1] // 2]


def _as_slice_batch(slices, n: int, size: tuple[int, int]) -> Tensor:
    x = as_tensor(slices)
    if x.ndim == 3:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != n or tuple(x.shape[2:]) != size:
        raise ValueError(f"expected slices of shape (N, {n}, {size[0]}, {size[1]}), got {x.shape}")
    return x


def run_network(params: ModelParams, x: Tensor, mode: str, fuse_level: FuseFn) -> NetworkOutput:
    """Shared trunk. ``x`` is ``(N, n, H, W)``; ``fuse_level`` replaces each skip."""
    cfg = params.config
    N, n, H, W = x.shape
    h = reshape(x, (N * n, H, W, 1))
    fused = []
    for k in range(cfg.levels):
        f = _residual_block(params, f"enc.level{k}", h, mode)
        fused.append(fuse_level(k, reshape(f, (N, n) + f.shape[1:])))
        h = maxpool2(f)
    bottleneck = f"enc.level{cfg.levels}"
    if cfg.cff_bottleneck and n > 1:
        b = _residual_block(params, bottleneck, h, mode)
        d = fuse_level(cfg.levels, reshape(b, (N, n) + b.shape[1:]))
    else:
        centre = reshape(h, (N, n) + h.shape[1:])[:, n // 2]
        d = _residual_block(params, bottleneck, centre, mode)
    for k in reversed(range(cfg.levels)):
        d = concat([upsample_bilinear2(d), fused[k]], axis=-1)
        d = _residual_block(params, f"dec.level{k}", d, mode)

    t = params.tensors
    mask_probs = softmax(conv2d(d, t["head.mask.weight"], t["head.mask.bias"]), axis=-1)
    surface_probs = softmax(conv2d(d, t["head.surf.weight"], t["head.surf.bias"]), axis=1)
    rows = transpose(soft_argmax(surface_probs, axis=1), (0, 2, 1))
    return NetworkOutput(mask_probs, surface_probs, topology_guarantee(rows, axis=1))


def forward(params: ModelParams, slices, mode: str = "train") -> NetworkOutput:
    """Predict the centre slice of each ``(n, H, W)`` window in ``slices``."""
    cfg = params.config
    if params.fusion != "cff":
        raise ValueError("forward() needs a CFF model; use baseline_forward for plain skips")
    x = _as_slice_batch(slices, cfg.n_slices, cfg.input_size)
    return run_network(params, x, mode, _cff_fuse(params))


def baseline_forward(params: ModelParams, centre_slice, mode: str = "train") -> NetworkOutput:
    """Same trunk with ordinary skip connections on a single slice ``(N, H, W)``."""
    cfg = params.config
    x = as_tensor(centre_slice)
    if x.ndim == 2:
        x = reshape(x, (1,) + x.shape)
    x = _as_slice_batch(reshape(x, (x.shape[0], 1) + x.shape[1:]), 1, cfg.input_size)
    return run_network(params, x, mode, _centre_fuse)


def predict(params: ModelParams, slices, mode: str = "eval") -> NetworkOutput:
    """Dispatch on the model's fusion type. ``slices`` is ``(N, n, H, W)`` windows."""
    if params.fusion == "cff":
        return forward(params, slices, mode)
    x = np.asarray(slices.data if isinstance(slices, Tensor) else slices)
    return baseline_forward(params, x[:, x.shape[1] // 2], mode)
