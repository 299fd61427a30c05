"""Minimal dense numeric core: layers, losses, Adam and gradient checking."""
from . import _backend
from .gradcheck import grad_check
from .layers import (
    LSTM,
    BiLSTM,
    Dense,
    LstmCellParams,
    Param,
    StackedBiLSTM,
    bilstm_forward,
    fc_forward,
    lstm_step,
    relu_backward,
    relu_forward,
)
from .losses import bce_grad, bce_loss, cross_entropy, smooth_l1, smooth_l1_grad, softmax
from .optim import Adam, NonFiniteGradientError, adam_step

BACKEND = _backend.ACTIVE
