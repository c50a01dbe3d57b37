"""Minimal float64 neural net with hand-written gradients."""

from .layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    Layer,
    MaxPool,
    ReLU,
    ResidualAdd,
    ShapeMismatch,
    Softmax,
)
from .model import (
    CHECKPOINT_VERSION,
    LayerSpec,
    Model,
    ParamRef,
    accuracy,
    load_checkpoint,
    mean_log_likelihood,
    micro_resnet,
    save_checkpoint,
)

__all__ = [
    "Layer",
    "Dense",
    "Conv2D",
    "BatchNorm",
    "ReLU",
    "MaxPool",
    "ResidualAdd",
    "Flatten",
    "Softmax",
    "ShapeMismatch",
    "LayerSpec",
    "Model",
    "ParamRef",
    "micro_resnet",
    "mean_log_likelihood",
    "accuracy",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]
