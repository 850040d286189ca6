"""Adam with bias correction plus an exponential moving average of parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch
from .nn import MlpParams


@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]
    beta1: float
    beta2: float
    eps: float
    lr: float
    ema_decay: float
    ema: list[np.ndarray] = field(repr=False, default_factory=list)


def init_adam(params: MlpParams, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, ema_decay: float = 0.9999) -> AdamState:
    """Moments start at zero; the EMA shadow starts exactly equal to params."""
    arrays = params.arrays()
    return AdamState(
        step=0,
        m=[np.zeros_like(a) for a in arrays],
        v=[np.zeros_like(a) for a in arrays],
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        lr=lr,
        ema_decay=ema_decay,
        ema=[a.copy() for a in arrays],
    )


def adam_step(state: AdamState, params: MlpParams, grads: list[np.ndarray],
              lr: float | None = None) -> tuple[MlpParams, AdamState]:
    """One Adam update (in place) followed by the EMA update.

    `grads` must align with ``params.tensors()``.  `lr` overrides the stored
    learning rate for this step only (used by warm-up ramps).
    """
    tensors = params.tensors()
    if len(grads) != len(tensors):
        raise ShapeMismatch(f"expected {len(tensors)} gradients, got {len(grads)}")
    step_lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (tensor, g) in enumerate(zip(tensors, grads)):
        if g.shape != tensor.shape:
            raise ShapeMismatch(f"gradient {i} shape {g.shape} != param {tensor.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        tensor.data = tensor.data - step_lr * m_hat / (np.sqrt(v_hat) + state.eps)
    d = state.ema_decay
    for i, tensor in enumerate(tensors):
        state.ema[i] = d * state.ema[i] + (1.0 - d) * tensor.data
    return params, state
