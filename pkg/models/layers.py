"""
Layers Module

A small module system on top of the tensor engine: parameter registration with
dotted names, train/eval switching, freezing, state dictionaries, and the basic
layers (convolution, batch norm, dense, layer norm) the networks are built from.
Weights are initialised from an explicit numpy Generator so that a seed fully
determines a model.
"""
from collections import OrderedDict
from typing import Dict, Iterator, List, Mapping, Optional, Tuple
import logging
import math

import numpy as np

from engine import functional as F
from engine.tensor import Tensor
from utils.error_utils import ShapeError, UsageError

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


class Module:
    """
    Container of parameters, buffers and child modules.

    Attributes assigned as Tensors become parameters, Modules become children,
    and arrays registered through `register_buffer` become buffers. Names
    follow assignment order.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, param in self._params.items():
            yield prefix + name, param
        for name, module in self._modules.items():
            yield from module.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, buffer in self._buffers.items():
            yield prefix + name, buffer
        for name, module in self._modules.items():
            yield from module.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> List[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def modules(self) -> Iterator["Module"]:
        yield self
        for module in self._modules.values():
            yield from module.modules()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            object.__setattr__(module, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> "Module":
        for param in self.parameters():
            param.requires_grad = False
            param.grad = None
        return self

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters followed by buffers, keyed by dotted name."""
        state = OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())
        state.update((name, b.copy()) for name, b in self.named_buffers())
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        """
        Copy arrays into parameters and buffers in place.

        Raises:
            UsageError: In strict mode, when names are missing or unexpected
            ShapeError: When an array's shape differs from its target
        """
        targets: Dict[str, np.ndarray] = {name: p.data for name, p in self.named_parameters()}
        targets.update(self.named_buffers())
        if strict:
            missing = sorted(set(targets) - set(state))
            unexpected = sorted(set(state) - set(targets))
            if missing or unexpected:
                raise UsageError("State does not match the module",
                                 {'missing': missing[:20], 'unexpected': unexpected[:20]})
        for name, array in state.items():
            if name not in targets:
                continue
            target = targets[name]
            if target.shape != np.shape(array):
                raise ShapeError(f"Shape mismatch for '{name}'",
                                 {'expected': list(target.shape), 'actual': list(np.shape(array))})
            target[...] = array

    def num_parameters(self, trainable: Optional[bool] = None) -> int:
        return int(sum(p.data.size for p in self.parameters()
                       if trainable is None or p.requires_grad == trainable))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> Tensor:
    """Kaiming-normal initialisation for ReLU networks."""
    std = math.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(np.float32), requires_grad=True)


def zeros(shape: Tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def ones(shape: Tuple[int, ...]) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


class Conv2d(Module):
    """Square-kernel convolution; weight (out, in, k, k)."""

    def __init__(self, rng: np.random.Generator, in_channels: int, out_channels: int,
                 kernel_size: int, stride: int = 1, padding: int = 0, dilation: int = 1,
                 bias: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = he_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in)
        self.bias = zeros((out_channels,)) if bias else None

    def forward(self, x: Tensor, dilation: Optional[int] = None, padding: Optional[int] = None) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride,
                        self.padding if padding is None else padding,
                        self.dilation if dilation is None else dilation)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = ones((channels,))
        self.bias = zeros((channels,))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class Linear(Module):
    """Dense layer; weight stored (in_features, out_features)."""

    def __init__(self, rng: np.random.Generator, in_features: int, out_features: int,
                 bias: bool = True, std: Optional[float] = None):
        super().__init__()
        scale = std if std is not None else math.sqrt(2.0 / in_features)
        self.weight = Tensor((rng.standard_normal((in_features, out_features)) * scale).astype(np.float32),
                             requires_grad=True)
        self.bias = zeros((out_features,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, features: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = ones((features,))
        self.bias = zeros((features,))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class ConvBNReLU(Module):
    """conv -> batch norm -> relu."""

    def __init__(self, rng: np.random.Generator, in_channels: int, out_channels: int,
                 kernel_size: int = 3, stride: int = 1, padding: Optional[int] = None, dilation: int = 1):
        super().__init__()
        if padding is None:
            padding = dilation * (kernel_size // 2)
        self.conv = Conv2d(rng, in_channels, out_channels, kernel_size, stride, padding, dilation, bias=False)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.bn(self.conv(x)))


def require_channels(x: Tensor, channels: int, name: str) -> None:
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeError(f"{name} expects {channels} channels",
                         {'expected_channels': channels, 'actual': x.dims})


Shape = Tuple[int, ...]


class Profile:
    """
    Shape-propagation record: one entry per weighted operation with its output
    shape (batch of one) and multiply-accumulate count. Only convolutions, dense
    layers and attention products contribute MACs.
    """

    def __init__(self):
        self.entries: List[Tuple[str, str, Shape, int]] = []

    def add(self, name: str, op: str, shape: Shape, macs: int) -> None:
        self.entries.append((name, op, tuple(int(s) for s in shape), int(macs)))

    @property
    def total_macs(self) -> int:
        return sum(entry[3] for entry in self.entries)


def trace_conv(conv: Conv2d, shape: Shape, profile: Profile, name: str,
               dilation: Optional[int] = None, padding: Optional[int] = None) -> Shape:
    """Output (C, H, W) of `conv` applied to `shape`, recorded in `profile`."""
    channels, height, width = shape
    if channels != conv.in_channels:
        raise ShapeError(f"{name} expects {conv.in_channels} channels", {'actual': list(shape)})
    dilation = conv.dilation if dilation is None else dilation
    padding = conv.padding if padding is None else padding
    out_h = F.conv_output_size(height, conv.kernel_size, conv.stride, padding, dilation)
    out_w = F.conv_output_size(width, conv.kernel_size, conv.stride, padding, dilation)
    out = (conv.out_channels, out_h, out_w)
    macs = conv.out_channels * conv.in_channels * conv.kernel_size ** 2 * out_h * out_w
    profile.add(name, "conv2d", out, macs)
    return out


def trace_linear(layer: Linear, shape: Shape, profile: Profile, name: str) -> Shape:
    rows, features = shape
    out_features = layer.weight.shape[1]
    profile.add(name, "linear", (rows, out_features), rows * features * out_features)
    return (rows, out_features)
