from .config import ConfigError, RunConfig, load_config, parse_config
from .engine import TrainResult, TrainingDiverged, evaluate, consistency, load_model, predict_volume, save_model, train

__all__ = [
    "ConfigError",
    "RunConfig",
    "TrainResult",
    "TrainingDiverged",
    "consistency",
    "evaluate",
    "load_config",
    "load_model",
    "parse_config",
    "predict_volume",
    "save_model",
    "train",
]
