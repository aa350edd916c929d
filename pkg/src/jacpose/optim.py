"""ADAM with bias correction."""
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """Update ``params`` (name -> Tensor) in place from ``grads`` (name -> array).

    Parameters without a gradient entry (or with ``None``) are treated as having
    a zero gradient for the moment updates.
    """
    for name, g in grads.items():
        if g is not None and np.shape(g) != params[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {np.shape(g)}, expected {params[name].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros(p.shape), np.zeros(p.shape)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
