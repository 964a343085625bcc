"""Adaptive-moment optimizer with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dafss.autodiff import Tensor
from dafss.errors import NumericError


@dataclass
class OptimizerState:
    """Per-parameter moment buffers plus the shared hyperparameters."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0


class AdamW:
    """Adam with weight decay applied directly to the parameters.

    The decay term never passes through the moment estimates: each step
    first shrinks the parameter by ``lr * weight_decay`` and then applies
    the bias-corrected moment update. Parameters whose ``grad`` is ``None``
    are skipped entirely (they did not participate in the step).
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 weight_decay: float = 0.01, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if weight_decay < 0:
            raise ValueError(f"weight decay must be non-negative, got {weight_decay}")
        self.params = dict(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.state: dict[str, OptimizerState] = {
            name: OptimizerState(np.zeros_like(p.data), np.zeros_like(p.data))
            for name, p in self.params.items()
        }

    def step(self) -> None:
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            st = self.state[name]
            st.step_count += 1
            t = st.step_count
            st.first_moment = self.beta1 * st.first_moment + (1.0 - self.beta1) * g
            st.second_moment = self.beta2 * st.second_moment + (1.0 - self.beta2) * g * g
            m_hat = st.first_moment / (1.0 - self.beta1**t)
            v_hat = st.second_moment / (1.0 - self.beta2**t)
            p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
