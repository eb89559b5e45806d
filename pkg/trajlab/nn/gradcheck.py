"""
Central-difference gradient checking.
"""
import logging
from typing import Callable, Dict, Optional

import numpy as np

from ..errors import ContractViolation
from .tensor import Parameter, Tensor

logger = logging.getLogger(__name__)


def grad_check(
    function: Callable[[], Tensor],
    params: Dict[str, Parameter],
    eps: float = 1e-5,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Compare analytic gradients against central differences.

    Args:
        function: Rebuilds the scalar objective from the current parameter values
        params: Parameters to check
        eps: Finite-difference step
        max_elements: Check at most this many randomly chosen entries per parameter

    Returns:
        max |analytic - numeric| / max(1e-8, |analytic| + |numeric|)

    Raises:
        ContractViolation: The objective is not a finite scalar
    """
    def evaluate() -> float:
        value = function()
        if value.data.size != 1 or not np.isfinite(value.data).all():
            raise ContractViolation(f"grad_check needs a finite scalar objective, got {value.data!r}")
        return value.item()

    for p in params.values():
        p.zero_grad()
    loss = function()
    if loss.data.size != 1 or not np.isfinite(loss.data).all():
        raise ContractViolation("grad_check needs a finite scalar objective")
    loss.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for name, p in params.items()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            indices = rng.choice(flat.size, size=max_elements, replace=False)
        for i in indices:
            original = flat[i]
            flat[i] = original + eps
            plus = evaluate()
            flat[i] = original - eps
            minus = evaluate()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            error = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if error > worst:
                worst = error
                logger.debug(f"[NN] grad_check {name}[{i}]: analytic={a:.6g} numeric={numeric:.6g} err={error:.3g}")
    return float(worst)
