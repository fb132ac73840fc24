"""Pluggable backward rules for transfer-based adversarial attacks on small CNNs."""
from .graph import CrossEntropy, NegTargetLogit, backward, forward, input_gradient, loss_and_grad, predict
from .models import build, init_weights
from .rules import BackwardPolicy, GradMask, PoolRule, ReluRule, ResidualRule, VANILLA
from .weights import WeightStore, load_weights, save_weights

__all__ = [
    "BackwardPolicy",
    "CrossEntropy",
    "GradMask",
    "NegTargetLogit",
    "PoolRule",
    "ReluRule",
    "ResidualRule",
    "VANILLA",
    "WeightStore",
    "backward",
    "build",
    "forward",
    "init_weights",
    "input_gradient",
    "load_weights",
    "loss_and_grad",
    "predict",
    "save_weights",
]
