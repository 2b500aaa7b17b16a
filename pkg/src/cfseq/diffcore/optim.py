"""Optimizers acting in place on dictionaries of named parameter arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _check_finite(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}; step rejected")


@dataclass
class OptimizerState:
    step: int = 0
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)


def adamw_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """AdamW update with decoupled weight decay.

    ``lr`` may be a float or a mapping from parameter name to learning rate.
    Parameters without an entry in ``grads`` are left untouched.
    """
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise ValueError("betas must lie in [0, 1)")
    _check_finite(grads)
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        rate = lr[name] if isinstance(lr, dict) else lr
        m = state.first.get(name)
        v = state.second.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.first[name], state.second[name] = m, v
        if weight_decay:
            p *= 1.0 - rate * weight_decay
        p -= rate * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def sgd_momentum_step(params, grads, state, lr, momentum=0.9):
    """Heavy-ball SGD: ``v <- momentum * v + g``; ``p <- p - lr * v``."""
    _check_finite(grads)
    state.step += 1
    for name, g in grads.items():
        p = params[name]
        v = state.first.get(name)
        v = g.copy() if v is None else momentum * v + g
        state.first[name] = v
        p -= lr * v
    return params, state
