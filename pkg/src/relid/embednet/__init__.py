"""Minimal neural-network primitives with reverse-mode differentiation."""

from relid.embednet.autograd import Tensor, backward, parameter, softmax_xent, softmax_xent_value
from relid.embednet.layers import (
    GRU,
    LSTM,
    Attention,
    BiRecurrent,
    Dense,
    Module,
    TDNN,
    attention_pool,
    bidirectional,
    gru_step,
    lstm_step,
    stats_pooling,
    tdnn_layer,
)
from relid.embednet.optim import Adam, AdamState, adam_step, load_checkpoint, save_checkpoint

__all__ = [
    "Adam", "AdamState", "Attention", "BiRecurrent", "Dense", "GRU", "LSTM", "Module", "TDNN", "Tensor",
    "adam_step", "attention_pool", "backward", "bidirectional", "gru_step", "load_checkpoint", "lstm_step",
    "parameter", "save_checkpoint", "softmax_xent", "softmax_xent_value", "stats_pooling", "tdnn_layer",
]
