"""
Optimizer Module

Adam with bias correction. The functional `adam_step` holds the update rule;
`Adam` binds it to a fixed list of parameters.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence
import logging

import numpy as np

from engine.tensor import Tensor
from utils.error_utils import UsageError

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


@dataclass
class OptimizerState:
    """Per-parameter moment buffers plus Adam hyperparameters."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]],
              state: OptimizerState) -> OptimizerState:
    """
    Apply one Adam update in place.

    Args:
        params: Parameters to update
        grads: One gradient per parameter; None is treated as zero
        state: Optimizer state; moment buffers are created on the first step

    Returns:
        The updated state (same object)

    Raises:
        UsageError: If the number or shapes of gradients and parameters disagree
    """
    if len(params) != len(grads):
        raise UsageError("Each parameter needs exactly one gradient",
                         {'params': len(params), 'grads': len(grads)})
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise UsageError("Optimizer state was built for a different parameter list",
                         {'state': len(state.m), 'params': len(params)})

    for param, grad, m in zip(params, grads, state.m):
        if grad is not None and grad.shape != param.data.shape:
            raise UsageError("Gradient shape does not match its parameter",
                             {'param': list(param.data.shape), 'grad': list(grad.shape)})
        if m.shape != param.data.shape:
            raise UsageError("Moment buffer shape does not match its parameter",
                             {'param': list(param.data.shape), 'moment': list(m.shape)})

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for i, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            grad = np.zeros_like(param.data)
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (grad * grad)
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        param.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.data.dtype)
    return state


class Adam:
    """Adam optimizer over a fixed parameter list."""

    def __init__(self, parameters: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(parameters)
        frozen = [p for p in self.params if not p.requires_grad]
        if frozen:
            raise UsageError("Frozen tensors cannot be optimized", {'count': len(frozen)})
        self.state = OptimizerState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
