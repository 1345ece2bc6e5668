"""Parameter update rules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import DivergedError
from .tensor import Tensor

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


def _check_finite(grads: Mapping[str, np.ndarray], step: int) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergedError(step, f"non-finite gradient for {name}")


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float,
             step: int = 0) -> None:
    """p <- p - lr * g, in place on the leaf tensors."""
    _check_finite(grads, step)
    for name, g in grads.items():
        p = params[name]
        p.assign(p.data - lr * g)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float, step: int = 0) -> AdamState:
    """Bias-corrected first/second-moment update."""
    _check_finite(grads, step)
    t = state.t + 1
    m, v = dict(state.m), dict(state.v)
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name, g in grads.items():
        p = params[name]
        m_prev = m.get(name)
        v_prev = v.get(name)
        if m_prev is None:
            m_prev = np.zeros_like(g)
            v_prev = np.zeros_like(g)
        m[name] = BETA1 * m_prev + (1.0 - BETA1) * g
        v[name] = BETA2 * v_prev + (1.0 - BETA2) * g * g
        update = (m[name] / c1) / (np.sqrt(v[name] / c2) + ADAM_EPS)
        p.assign(p.data - lr * update)
    return AdamState(m=m, v=v, t=t)
