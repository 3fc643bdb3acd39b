"""Desk-scale decoder-only language models with conventional and hourglass
feed-forward shapes, a parameter/FLOP budget planner, and a deterministic
training harness for budget-matched comparisons."""

from .model import ConfigError, LanguageModel, ModelConfig, init_weights, lm_forward
from .planner import ParamBreakdown, SweepSpec, enumerate_sweep, flops_per_token, solve_dh, total_params
from .tensor import ShapeError, Tensor
from .training import MetricsRecord, OptimizerState, TrainConfig, evaluate, train

__all__ = [
    "ConfigError",
    "LanguageModel",
    "MetricsRecord",
    "ModelConfig",
    "OptimizerState",
    "ParamBreakdown",
    "ShapeError",
    "SweepSpec",
    "Tensor",
    "TrainConfig",
    "enumerate_sweep",
    "evaluate",
    "flops_per_token",
    "init_weights",
    "lm_forward",
    "solve_dh",
    "total_params",
    "train",
]
