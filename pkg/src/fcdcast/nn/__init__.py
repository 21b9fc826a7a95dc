"""From-scratch neural network substrate: layers, LSTM, losses, Adam,
initializers and gradient checking."""
from fcdcast.nn.gradcheck import GradCheckReport, gradient_check
from fcdcast.nn.init import init_glorot, init_lstm_diagonal
from fcdcast.nn.layers import (
    ELU,
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    LeakyReLU,
    MaxPool2D,
    OutputClamp,
    Sequential,
    leaky_relu,
    leaky_relu_grad,
    output_clamp,
    output_clamp_grad,
    output_clamp_revive_grad,
)
from fcdcast.nn.losses import elastic_net_grad, elastic_net_penalty, quadratic_loss
from fcdcast.nn.lstm import LSTM, RecurrentModel, lstm_step, sigmoid
from fcdcast.nn.optim import Adam, adam_step

__all__ = [
    "Adam", "BatchNorm", "Conv2D", "Dense", "ELU", "Flatten", "GradCheckReport", "LSTM",
    "LeakyReLU", "MaxPool2D", "OutputClamp", "RecurrentModel", "Sequential", "adam_step",
    "elastic_net_grad", "elastic_net_penalty", "gradient_check", "init_glorot",
    "init_lstm_diagonal", "leaky_relu", "leaky_relu_grad", "lstm_step", "output_clamp",
    "output_clamp_grad", "output_clamp_revive_grad", "quadratic_loss", "sigmoid",
]
