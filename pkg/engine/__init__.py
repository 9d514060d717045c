# Engine package initialization
from .tensor import Tensor, ComputationRecord, backward_pass
from .optim import Adam, OptimizerState, adam_step

__all__ = ['Tensor', 'ComputationRecord', 'backward_pass', 'Adam', 'OptimizerState', 'adam_step']
