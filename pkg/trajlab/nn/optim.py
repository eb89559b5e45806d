"""
Adaptive-moment optimizer with bias correction.
"""
import logging
from typing import Dict

import numpy as np

from ..errors import ContractViolation, TrainingDivergence
from .tensor import Parameter

logger = logging.getLogger(__name__)


class Adam:
    """
    Adam over a named parameter dict.

    Moments are keyed by parameter name, so two tensors never share state.
    A parameter without a gradient is treated as having a zero gradient.
    """

    def __init__(
        self,
        params: Dict[str, Parameter],
        lr: float = 1e-3,
        betas: tuple = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ContractViolation(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v: Dict[str, np.ndarray] = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        """
        Apply one update from the parameters' current gradients.

        Raises:
            TrainingDivergence: A gradient is non-finite; nothing is updated
        """
        grads = {}
        for name, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if g.shape != p.data.shape:
                raise ContractViolation(f"{name}: gradient shape {g.shape} != parameter shape {p.data.shape}")
            if not np.all(np.isfinite(g)):
                raise TrainingDivergence(f"non-finite gradient for {name}; step aborted")
            grads[name] = g

        self.step_count += 1
        t = self.step_count
        correction1 = 1.0 - self.beta1 ** t
        correction2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
