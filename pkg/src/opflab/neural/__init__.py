"""Numpy neural building blocks: dense/LSTM layers, models, losses, Adam."""
from opflab.neural.fcc import FccModel, fcc_backward, fcc_forward
from opflab.neural.layers import param_count
from opflab.neural.losses import loss_basic, loss_lagrangian, loss_rnn, violation_degrees
from opflab.neural.optim import Adam
from opflab.neural.rnn import LstmCell, RnnModel, lstm_step, lstm_step_backward, rnn_backward, rnn_forward

__all__ = [
    "Adam",
    "FccModel",
    "LstmCell",
    "RnnModel",
    "fcc_backward",
    "fcc_forward",
    "loss_basic",
    "loss_lagrangian",
    "loss_rnn",
    "lstm_step",
    "lstm_step_backward",
    "param_count",
    "rnn_backward",
    "rnn_forward",
    "violation_degrees",
]
