"""Adam with bias correction, applied in place to a network's parameters."""

from __future__ import annotations

import numpy as np


def adam_init() -> dict:
    return {"t": 0, "m": {}, "v": {}}


def copy_state(state: dict) -> dict:
    return {
        "t": state["t"],
        "m": {k: v.copy() for k, v in state["m"].items()},
        "v": {k: v.copy() for k, v in state["v"].items()},
    }


def adam_step(net, grads, state, lr, beta1=0.5, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One Adam update over every parameter in ``grads``.

    ``state`` holds the step count and per-key first/second moments; missing
    moments start at zero. Weight decay, when set, is added to the gradient.
    """
    params = net.named_params(trainable_only=True)
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for key, g in grads.items():
        p = params.get(key)
        if p is None:
            raise KeyError(f"gradient for {key!r} has no trainable parameter")
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {key!r}")
        if weight_decay:
            g = g + weight_decay * p
        m = state["m"].get(key)
        v = state["v"].get(key)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state["m"][key], state["v"][key] = m, v
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return net, state
