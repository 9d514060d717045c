"""
Gradient Check Module

Compares analytic gradients with central finite differences in double precision.
Each case draws random shapes and values from its own seed, reduces the operation
output to a scalar through a fixed random projection, and checks every input.
"""
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np

from engine import functional as F
from engine.tensor import Tensor

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-6

# A builder draws (input arrays, function of input tensors) from a generator.
CaseBuilder = Callable[[np.random.Generator], Tuple[List[np.ndarray], Callable[..., Tensor]]]


@dataclass
class GradcheckResult:
    name: str
    trials: int
    max_relative_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """
    Largest absolute deviation, normalised by the larger gradient magnitude.

    The scale never drops below 1, so gradients that vanish identically are
    compared absolutely.
    """
    scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)), 1.0)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray],
                    step: float = DEFAULT_STEP, seed: int = 0) -> float:
    """
    Check `fn` at `arrays`.

    Args:
        fn: Function of Tensors returning a Tensor of any shape
        arrays: Inputs; converted to float64
        step: Finite-difference step
        seed: Seed of the random output projection

    Returns:
        Maximum relative error over all inputs
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    reference = fn(*[Tensor(a) for a in arrays])
    projection = np.random.default_rng(seed).standard_normal(reference.shape)

    def scalar(values: Sequence[np.ndarray]) -> float:
        return float(np.sum(fn(*[Tensor(v) for v in values]).data * projection))

    inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*inputs)
    F.sum(F.mul(out, Tensor(projection))).backward()

    worst = 0.0
    for position, array in enumerate(arrays):
        numeric = np.zeros_like(array)
        flat = array.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            upper = scalar(arrays)
            flat[i] = original - step
            lower = scalar(arrays)
            flat[i] = original
            numeric.reshape(-1)[i] = (upper - lower) / (2 * step)
        analytic = inputs[position].grad
        if analytic is None:
            analytic = np.zeros_like(array)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    values = rng.standard_normal(shape)
    return np.sign(values) * (0.1 + np.abs(values))


def _shape(rng: np.random.Generator, rank: int, low: int = 1, high: int = 4) -> Tuple[int, ...]:
    return tuple(int(s) for s in rng.integers(low, high + 1, size=rank))


def _image_shape(rng: np.random.Generator) -> Tuple[int, int, int, int]:
    return (int(rng.integers(1, 3)), int(rng.integers(1, 4)),
            int(rng.integers(3, 7)), int(rng.integers(3, 7)))


def _binary(op):
    def build(rng):
        shape = _shape(rng, 3)
        other = tuple(s if rng.random() < 0.5 else 1 for s in shape)
        return [rng.standard_normal(shape), rng.standard_normal(other)], op
    return build


def _div(rng):
    shape = _shape(rng, 3)
    return [rng.standard_normal(shape), 5.0 * _away_from_zero(rng, shape)], F.div


def _unary(op, positive: bool = False, kinked: bool = False):
    def build(rng):
        shape = _shape(rng, 3)
        if positive:
            data = 0.5 + rng.random(shape)
        elif kinked:
            data = _away_from_zero(rng, shape)
        else:
            data = rng.standard_normal(shape)
        return [data], op
    return build


def _matmul(rng):
    n, k, m = _shape(rng, 3, 1, 4)
    batch = int(rng.integers(1, 3))
    return [rng.standard_normal((batch, n, k)), rng.standard_normal((k, m))], F.matmul


def _reduction(op):
    def build(rng):
        shape = _shape(rng, 3, 2, 4)
        axis = int(rng.integers(0, 3))
        keep = bool(rng.integers(0, 2))
        return [rng.standard_normal(shape)], lambda x: op(x, axis=axis, keepdims=keep)
    return build


def _amax(rng):
    shape = _shape(rng, 3, 2, 4)
    axis = int(rng.integers(0, 3))
    # Well separated values keep the maximum away from ties.
    data = rng.permutation(np.prod(shape)).reshape(shape) * 0.1 + rng.random(shape) * 0.01
    return [data], lambda x: F.amax(x, axis=axis)


def _reshape_transpose(rng):
    shape = _shape(rng, 3, 1, 4)
    perm = tuple(int(a) for a in rng.permutation(3))
    return [rng.standard_normal(shape)], lambda x: F.reshape(F.transpose(x, perm), (-1,))


def _concat_split(rng):
    b, h, w = _shape(rng, 3, 1, 3)
    c1, c2 = _shape(rng, 2, 1, 3)

    def fn(x, y):
        joined = F.concat([x, y], axis=1)
        first, second = F.split(joined, [c2, c1], axis=1)
        return F.concat([F.mul(first, 2.0), second], axis=1)

    return [rng.standard_normal((b, c1, h, w)), rng.standard_normal((b, c2, h, w))], fn


def _softmax(op):
    def build(rng):
        shape = _shape(rng, 3, 2, 4)
        axis = int(rng.integers(0, 3))
        return [rng.standard_normal(shape)], lambda x: op(x, axis=axis)
    return build


def _conv2d(rng):
    b, c, h, w = _image_shape(rng)
    cout = int(rng.integers(1, 4))
    kernel = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    dilation = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 3))
    while F.conv_output_size(min(h, w), kernel, stride, padding, dilation) < 1:
        padding += 1
    arrays = [rng.standard_normal((b, c, h, w)),
              rng.standard_normal((cout, c, kernel, kernel)),
              rng.standard_normal(cout)]
    return arrays, lambda x, wt, bias: F.conv2d(x, wt, bias, stride, padding, dilation)


def _max_pool(rng):
    shape = _image_shape(rng)
    data = rng.permutation(np.prod(shape)).reshape(shape) * 0.1 + rng.random(shape) * 0.01
    return [data], lambda x: F.max_pool2d(x, 3, 2, 1)


def _resize(rng):
    shape = _image_shape(rng)
    out_h, out_w = _shape(rng, 2, 1, 9)
    return [rng.standard_normal(shape)], lambda x: F.bilinear_resize(x, out_h, out_w)


def _batch_norm(training: bool):
    def build(rng):
        b, c, h, w = _image_shape(rng)
        b = max(b, 2)
        running_mean = rng.standard_normal(c)
        running_var = 0.5 + rng.random(c)

        def fn(x, gamma, beta):
            return F.batch_norm(x, gamma, beta, running_mean.copy(), running_var.copy(), training)

        return [rng.standard_normal((b, c, h, w)), rng.standard_normal(c), rng.standard_normal(c)], fn
    return build


def _layer_norm(rng):
    shape = _shape(rng, 3, 2, 5)
    return ([rng.standard_normal(shape), rng.standard_normal(shape[-1]), rng.standard_normal(shape[-1])],
            F.layer_norm)


def _global_pool(rng):
    return [rng.standard_normal(_image_shape(rng))], F.global_avg_pool


def _attention(rng):
    heads = int(rng.integers(1, 3))
    dim = heads * int(rng.integers(1, 3))
    batch, count = _shape(rng, 2, 1, 3)
    arrays = [rng.standard_normal((batch, count, dim))]
    for _ in range(4):
        arrays += [rng.standard_normal((dim, dim)) * 0.5, rng.standard_normal(dim) * 0.1]

    def fn(tokens, *params):
        return F.multi_head_self_attention(tokens, F.AttentionParams(*params), heads)

    return arrays, fn


def default_cases() -> Dict[str, CaseBuilder]:
    """Every differentiable operation of the engine."""
    return {
        'add': _binary(F.add),
        'sub': _binary(F.sub),
        'mul': _binary(F.mul),
        'div': _div,
        'matmul': _matmul,
        'exp': _unary(F.exp),
        'log': _unary(F.log, positive=True),
        'relu': _unary(F.relu, kinked=True),
        'gelu': _unary(F.gelu),
        'sigmoid': _unary(F.sigmoid),
        'sum': _reduction(F.sum),
        'mean': _reduction(F.mean),
        'amax': _amax,
        'reshape_transpose': _reshape_transpose,
        'concat_split': _concat_split,
        'softmax': _softmax(F.softmax),
        'log_softmax': _softmax(F.log_softmax),
        'conv2d': _conv2d,
        'max_pool2d': _max_pool,
        'bilinear_resize': _resize,
        'batch_norm_train': _batch_norm(True),
        'batch_norm_eval': _batch_norm(False),
        'layer_norm': _layer_norm,
        'global_avg_pool': _global_pool,
        'multi_head_self_attention': _attention,
    }


def run_case(name: str, builder: CaseBuilder, trials: int = 10, seed: int = 0,
             step: float = DEFAULT_STEP, tolerance: float = DEFAULT_TOLERANCE) -> GradcheckResult:
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        arrays, fn = builder(rng)
        worst = max(worst, check_gradients(fn, arrays, step=step, seed=seed + trial))
    result = GradcheckResult(name=name, trials=trials, max_relative_error=worst, tolerance=tolerance)
    level = logging.INFO if result.passed else logging.WARNING
    logger.log(level, f"gradcheck {name}: max relative error {worst:.3e} over {trials} trials")
    return result


def run_suite(cases: Optional[Dict[str, CaseBuilder]] = None, trials: int = 10, seed: int = 0,
              step: float = DEFAULT_STEP, tolerance: float = DEFAULT_TOLERANCE) -> List[GradcheckResult]:
    """Run every case; the suite passes when every result passes."""
    cases = cases if cases is not None else default_cases()
    return [run_case(name, builder, trials, seed, step, tolerance) for name, builder in cases.items()]
