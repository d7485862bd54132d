"""Dense vs mixture-of-experts decoder pretraining on a numpy autodiff core."""
from .budget import count_params, match_budget
from .model import DecoderModel, ModelConfig
from .moe import MoEConfig
from .trainer import TrainConfig, train_run

__all__ = ["DecoderModel", "ModelConfig", "MoEConfig", "TrainConfig", "count_params", "match_budget", "train_run"]
__version__ = "0.1.0"
