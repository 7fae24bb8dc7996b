"""AdamW with decoupled weight decay and bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ParameterError


@dataclass
class OptimState:
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamw_step(params, grads, state: OptimState, lr: float, wd: float, names=None) -> None:
    """Decoupled-weight-decay Adam with bias correction; updates ``params`` in place.

    ``grads`` is a sequence aligned with ``params``. The step counter must be
    advanced by the caller once per optimisation step (see :func:`advance`).
    """
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ParameterError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            name = (names[i] if names else None) or p.name or f"param[{i}]"
            raise NumericError(f"non-finite gradient for {name}")
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros(p.shape)
            state.v[key] = np.zeros(p.shape)
        v = state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = p.data - lr * wd * p.data - lr * update


def advance(state: OptimState) -> None:
    state.t += 1
