"""Minimal differentiable classifier engine."""
from archsim.nn.layers import LAYER_KINDS, ShapeError, make_layer
from archsim.nn.model import (
    LayerSpec,
    Model,
    ModelSpec,
    NonFiniteError,
    chain_check,
    forward,
    init_weights,
    input_gradient,
    predict,
)

__all__ = [
    "LAYER_KINDS", "LayerSpec", "Model", "ModelSpec", "NonFiniteError", "ShapeError",
    "chain_check", "forward", "init_weights", "input_gradient", "make_layer", "predict",
]
