"""RMSprop with inverse-time learning-rate decay."""
from __future__ import annotations

import numpy as np

from .network import ParamStore

RHO = 0.9
EPSILON = 1e-7


def decayed_lr(lr0: float, decay: float, step_index: int) -> float:
    return lr0 / (1.0 + decay * step_index)


def rmsprop_update(param, grad, cache, step_index, lr0, decay=0.0, rho=RHO, epsilon=EPSILON):
    """Single-array update, in place; returns (param, cache)."""
    lr = decayed_lr(lr0, decay, step_index)
    cache *= rho
    cache += (1 - rho) * np.square(grad)
    param -= lr * grad / (np.sqrt(cache) + epsilon)
    return param, cache


def rmsprop_step(store: ParamStore, grads, lr0=2e-4, decay=6e-8, rho=RHO, epsilon=EPSILON):
    """Apply one update to every trainable array of ``store`` and bump its iteration count."""
    for layer_params, layer_cache, layer_grads in zip(store.params, store.cache, grads):
        for name, c in layer_cache.items():
            g = layer_grads.get(name)
            if g is None:
                g = np.zeros_like(c)
            rmsprop_update(layer_params[name], g.astype(c.dtype, copy=False), c,
                           store.iterations, lr0, decay, rho, epsilon)
    store.iterations += 1
    return store
