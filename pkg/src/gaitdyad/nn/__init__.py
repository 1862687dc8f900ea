"""Minimal differentiable layer toolkit (numpy, float64, analytic gradients)."""

from .layers import (
    Activation,
    Chain,
    Conv1D,
    Dense,
    Layer,
    MaxPool1D,
    MissingCacheError,
    ShapeError,
    conv_output_length,
    layer_from_spec,
    sigmoid,
)
from .lstm import LSTM, init_lstm_params, lstm_backward, lstm_forward, lstm_step, lstm_step_backward
from .gradcheck import max_relative_error, numerical_gradient
from .optim import AdamState, NonFiniteError, adam_step

__all__ = [
    "Activation",
    "AdamState",
    "Chain",
    "Conv1D",
    "Dense",
    "LSTM",
    "Layer",
    "MaxPool1D",
    "MissingCacheError",
    "NonFiniteError",
    "ShapeError",
    "adam_step",
    "conv_output_length",
    "init_lstm_params",
    "layer_from_spec",
    "lstm_backward",
    "lstm_forward",
    "lstm_step",
    "lstm_step_backward",
    "max_relative_error",
    "numerical_gradient",
    "sigmoid",
]
