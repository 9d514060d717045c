"""
Tensor Module

This module provides the Tensor value type, the computation record that links
tensors produced by differentiable operations, and the reverse-mode backward pass.
"""
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np

from utils.error_utils import ShapeError, UsageError

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardRule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """
    Rank-N numeric array with an optional gradient slot.

    Floating point arrays keep their dtype, so float64 inputs run the whole
    computation in double precision. Anything else is stored as float32.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        array = np.asarray(data)
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(np.float32)
        # np.ascontiguousarray promotes 0-d arrays to (1,); scalars must stay 0-d.
        if not array.flags.c_contiguous:
            array = np.array(array, order="C")
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardRule] = None
        self._op = "leaf"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> List[int]:
        return list(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def op(self) -> str:
        """Name of the operation that produced this tensor ('leaf' for inputs)."""
        return self._op

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() requires a single-element tensor", {'shape': self.dims})
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def backward(self) -> None:
        """Run the backward pass from this scalar tensor."""
        backward_pass(ComputationRecord(self), self)

    # Operator sugar; the implementations live in engine.functional.
    def __add__(self, other):
        from engine import functional as F
        return F.add(self, other)

    def __radd__(self, other):
        from engine import functional as F
        return F.add(other, self)

    def __sub__(self, other):
        from engine import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from engine import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from engine import functional as F
        return F.mul(self, other)

    def __rmul__(self, other):
        from engine import functional as F
        return F.mul(other, self)

    def __truediv__(self, other):
        from engine import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from engine import functional as F
        return F.div(other, self)

    def __neg__(self):
        from engine import functional as F
        return F.mul(self, -1.0)

    def __matmul__(self, other):
        from engine import functional as F
        return F.matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        from engine import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        from engine import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        from engine import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        from engine import functional as F
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.dims}, dtype={self.dtype}, op={self._op}, requires_grad={self.requires_grad})"


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    """Wrap a scalar or array as a constant tensor (matching the dtype of `like`)."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(value, dtype=dtype))


def make_result(data: np.ndarray, parents: Iterable[Tensor], op: str, rule: BackwardRule) -> Tensor:
    """
    Create the output tensor of an operation and link it into the record.

    The output requires a gradient when any parent does; only then is the
    backward rule kept.
    """
    parents = tuple(parents)
    out = Tensor(data)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
    return out


class ComputationRecord:
    """
    Topologically ordered list of the operations that produced `output`.

    Every operation's inputs precede it in `nodes`.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: List[Tensor] = self._topological_order(output)

    @staticmethod
    def _topological_order(root: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        # Iterative DFS; deep networks overflow the recursion limit.
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    @property
    def operations(self) -> List[str]:
        return [node.op for node in self.nodes if node._parents]

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, tensor: Tensor) -> bool:
        return any(node is tensor for node in self.nodes)

    def first_nonfinite(self) -> Optional[Tensor]:
        """
        Find the first operation (in evaluation order) whose output holds NaN or Inf
        while all of its inputs are finite.

        Returns:
            The offending tensor, or None when every stored value is finite
        """
        for node in self.nodes:
            if not node.is_finite() and all(p.is_finite() for p in node._parents):
                return node
        return None


def backward_pass(record: ComputationRecord, loss: Tensor) -> None:
    """
    Accumulate reverse-mode gradients into every tensor that requires one.

    Args:
        record: Computation record containing `loss`
        loss: Scalar tensor to differentiate

    Raises:
        UsageError: If the loss is not a scalar or is missing from the record
    """
    if loss.data.size != 1:
        raise UsageError("Backward pass requires a scalar loss", {'shape': loss.dims})
    if record.output is not loss and loss not in record:
        raise UsageError("Loss tensor is not part of the computation record")
    if not loss.requires_grad:
        logger.debug("Loss does not depend on any trainable tensor; nothing to do")
        return

    loss.grad = np.ones_like(loss.data)
    for node in reversed(record.nodes):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, grad in zip(node._parents, grads):
            if grad is None or not parent.requires_grad:
                continue
            if grad.shape != parent.data.shape:
                raise ShapeError(
                    f"Gradient shape mismatch in '{node.op}'",
                    {'expected': list(parent.data.shape), 'actual': list(grad.shape)}
                )
            grad = grad.astype(parent.data.dtype, copy=False)
            if parent.grad is None:
                parent.grad = grad.copy()
            else:
                parent.grad = parent.grad + grad
