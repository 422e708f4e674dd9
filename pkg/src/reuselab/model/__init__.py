from .checkpoint import Checkpoint
from .config import ModelConfig
from .layers import attention_apply, attention_scores, feedforward, multihead_scores
from .optim import AdamConfig, AdamState, TrainingDivergence, train_step
from .schedule import ConfigError, LayerPlan, ReuseSchedule, Variant
from .transformer import (
    InputError,
    ReuseTransformer,
    attention_param_count,
    cross_entropy,
    init_params,
    parameter_shapes,
    reuse_multihead_forward,
    transformer_forward,
)

__all__ = [
    "AdamConfig",
    "AdamState",
    "Checkpoint",
    "ConfigError",
    "InputError",
    "LayerPlan",
    "ModelConfig",
    "ReuseSchedule",
    "ReuseTransformer",
    "TrainingDivergence",
    "Variant",
    "attention_apply",
    "attention_param_count",
    "attention_scores",
    "cross_entropy",
    "feedforward",
    "init_params",
    "multihead_scores",
    "parameter_shapes",
    "reuse_multihead_forward",
    "train_step",
    "transformer_forward",
]
