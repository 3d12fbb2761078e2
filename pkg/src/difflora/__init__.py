"""Differential-attention adapters (DiffLoRA) on a frozen toy transformer."""

from .adapters import AdapterPlacement, LowRankAdapter, trainable_param_count
from .attention import LambdaMode, diff_attention, standard_attention
from .model import ModelConfig, ToyModel, Variant, build_base, forward, inject_adapters
from .training import TrainConfig, backward, gradient_check, train

__version__ = "0.1.0"

__all__ = [
    "AdapterPlacement", "LowRankAdapter", "trainable_param_count", "LambdaMode", "diff_attention",
    "standard_attention", "ModelConfig", "ToyModel", "Variant", "build_base", "forward",
    "inject_adapters", "TrainConfig", "backward", "gradient_check", "train",
]
