"""Run configuration: one ``key = value`` per line, ``#`` starts a comment.

Defaults follow the published training setup (512x512 inputs, lr 1e-3,
batch 4, Adam with weight decay 1e-3, 200 epochs). The desk-scale phantom
setup lives in ``configs/desk.cfg``.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from ..losses import LossWeights
from ..network import ModelConfig
from ..preprocess import PreprocessConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    data_dir: str = "data"
    splits: str = "splits.txt"  # relative to data_dir

    # phantom generation
    phantom_slices: int = 16
    phantom_height: int = 128
    phantom_width: int = 128
    phantom_speckle: float = 0.25
    n_train: int = 24
    n_val: int = 4
    n_test: int = 8
    corrupt_every: int = 0  # corrupt slices 0, k, 2k, ... of every volume; 0 disables
    corrupt_severity: float = 0.7

    # preprocessing
    rpe_sigma: float = 2.0
    outlier_threshold: int = 60
    gaussian_sigma: float = 1.0
    clahe_tile_rows: int = 8
    clahe_tile_cols: int = 8
    clahe_clip: float = 0.01
    output_height: int = 512
    output_width: int = 512

    # model
    fusion: str = "cff"  # cff | plain
    levels: int = 4
    base_channels: int = 32
    n_slices: int = 3
    cff_bias: bool = True
    cff_bottleneck: bool = False

    # loss weights
    lambda_mask: float = 1.0
    lambda_line_ce: float = 1.0
    lambda_line_l1: float = 1.0

    # optimization
    lr: float = 1e-3
    batch_size: int = 4
    weight_decay: float = 1e-3
    decoupled_weight_decay: bool = False
    epochs: int = 200
    eval_batch: int = 8
    max_overlays: int = -1  # per eval run; -1 writes one per B-scan

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.fusion not in ("cff", "plain"):
            raise ConfigError(f"fusion must be 'cff' or 'plain', got {self.fusion!r}")
        positive = ("batch_size", "eval_batch", "lr", "output_height", "output_width", "levels", "base_channels")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0 or self.weight_decay < 0 or self.corrupt_every < 0:
            raise ConfigError("epochs, weight_decay and corrupt_every must be nonnegative")
        if not 0 <= self.corrupt_severity <= 1:
            raise ConfigError("corrupt_severity must lie in [0, 1]")
        try:
            self.preprocess_config()
            self.model_config()
            self.loss_weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(
            rpe_sigma=self.rpe_sigma,
            outlier_threshold=self.outlier_threshold,
            gaussian_sigma=self.gaussian_sigma,
            clahe_tiles=(self.clahe_tile_rows, self.clahe_tile_cols),
            clahe_clip=self.clahe_clip,
            output_size=(self.output_height, self.output_width),
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            levels=self.levels,
            base_channels=self.base_channels,
            n_slices=self.n_slices,
            input_size=(self.output_height, self.output_width),
            cff_bias=self.cff_bias,
            cff_bottleneck=self.cff_bottleneck,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_mask, self.lambda_line_ce, self.lambda_line_l1)

    @property
    def data_path(self) -> Path:
        return Path(self.data_dir)

    def with_overrides(self, **kwargs) -> "RunConfig":
        unknown = set(kwargs) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **kwargs)

    def to_text(self) -> str:
        lines = [f"{f.name} = {_format(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _coerce(name: str, raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return type(default)(raw)
    except ValueError:
        raise ConfigError(f"{name}: expected {type(default).__name__}, got {raw!r}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    defaults = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    values = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{line_no}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{line_no}: duplicate key {key!r}")
        values[key] = _coerce(key, value, getattr(defaults, key))
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, str(path))
