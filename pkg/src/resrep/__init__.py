"""Structured channel pruning by compactor re-parameterization and gradient resetting."""

from .graph import LossOutput, ModelGraph, evaluate, loss_and_grads
from .reparam import convert_model, insert_compactors
from .tensor import BACKEND, conv2d
from .train import ResRepConfig, train_resrep

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "LossOutput",
    "ModelGraph",
    "ResRepConfig",
    "conv2d",
    "convert_model",
    "evaluate",
    "insert_compactors",
    "loss_and_grads",
    "train_resrep",
]
