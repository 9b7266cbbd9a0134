"""A small numpy network stack with pluggable normalization layers."""

from .layers import (
    AvgPool2D,
    BatchNorm,
    Conv2D,
    Dense,
    LayerShapeError,
    MaxPool2D,
    MixtureNorm,
    ReLU,
    softmax_cross_entropy,
)
from .net import KINDS, Net, build_net
from .optim import (
    ConstantSchedule,
    ExponentialSchedule,
    OptimizerSpec,
    StepSchedule,
    schedule_from_dict,
)
from .train import RunRecord, RunRow, evaluate, steps_to_accuracy, train

__all__ = [
    "AvgPool2D", "BatchNorm", "Conv2D", "Dense", "LayerShapeError", "MaxPool2D", "MixtureNorm",
    "ReLU", "softmax_cross_entropy", "KINDS", "Net", "build_net", "ConstantSchedule",
    "ExponentialSchedule", "OptimizerSpec", "StepSchedule", "schedule_from_dict", "RunRecord",
    "RunRow", "evaluate", "steps_to_accuracy", "train",
]
