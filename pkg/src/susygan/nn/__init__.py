"""Minimal NumPy network core: the twelve layer kinds, backprop, RMSprop, checkpoints."""
from .checkpoint import load_checkpoint, save_checkpoint
from .layers import (BatchNorm, Conv2D, Dense, Dropout, Flatten, Input, LeakyReLU, ReLU, Reshape,
                     Sigmoid, Tanh, UpSample2x)
from .losses import binary_crossentropy
from .network import (NetworkSpec, ParamStore, backward, forward, init_params, param_count,
                      summary)
from .optim import decayed_lr, rmsprop_step, rmsprop_update

__all__ = [
    "BatchNorm", "Conv2D", "Dense", "Dropout", "Flatten", "Input", "LeakyReLU", "ReLU", "Reshape",
    "Sigmoid", "Tanh", "UpSample2x", "NetworkSpec", "ParamStore", "backward", "forward",
    "init_params", "param_count", "summary", "binary_crossentropy", "decayed_lr", "rmsprop_step",
    "rmsprop_update", "load_checkpoint", "save_checkpoint",
]
