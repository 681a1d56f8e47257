"""
Tensor Engine
Dense arrays with reverse-mode automatic differentiation over a recorded tape
"""

import itertools
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf, expit

from config.config import TENSOR_CONFIG
from .errors import ContractError, DomainError, ShapeError

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

Scalar = Union[int, float]

_ids = itertools.count()
_settings = {
    'dtype': np.dtype(TENSOR_CONFIG['dtype']),
    'checked': TENSOR_CONFIG['checked']
}
_tape_stack: List[Optional['Tape']] = []

# Per-op multipliers applied to recorded gradients. Only the gradient-check
# negative test installs entries here.
_gradient_corruption: Dict[str, float] = {}

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def set_default_dtype(dtype) -> None:
    """Select float64 (tests, oracles) or float32 (training path)"""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype('float64'), np.dtype('float32')):
        raise ContractError(f"Unsupported dtype: {dtype}")
    _settings['dtype'] = dtype


def get_default_dtype() -> np.dtype:
    return _settings['dtype']


def set_checked(enabled: bool) -> None:
    """Toggle finite-value and domain checks at op boundaries"""
    _settings['checked'] = bool(enabled)


def is_checked() -> bool:
    return _settings['checked']


@contextmanager
def corrupted_gradient(op_name: str, factor: float = 1.5):
    """Scale every recorded gradient of `op_name` (negative-test hook)"""
    _gradient_corruption[op_name] = factor
    try:
        yield
    finally:
        _gradient_corruption.pop(op_name, None)


class DenseArray:
    """N-dimensional real array that can take part in a gradient tape"""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, DenseArray):
            data = data.data
        array = np.array(data, dtype=dtype or _settings['dtype'])
        if _settings['checked'] and not np.all(np.isfinite(array)):
            raise DomainError("Non-finite values in array")
        array.setflags(write=False)
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)
        self._grad = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> 'DenseArray':
        out = cls.__new__(cls)
        array.setflags(write=False)
        out.data = array
        out.requires_grad = False
        out.id = next(_ids)
        out._grad = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def grad(self) -> Optional[np.ndarray]:
        """Gradient from the last backward pass; present iff requires_grad"""
        if not self.requires_grad:
            return None
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    @property
    def T(self) -> 'DenseArray':
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'DenseArray':
        return DenseArray._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DenseArray(shape={self.shape}{flag})"

    def __add__(self, other):
        return elementwise('add', self, other)

    def __radd__(self, other):
        return elementwise('add', other, self)

    def __sub__(self, other):
        return elementwise('sub', self, other)

    def __rsub__(self, other):
        return elementwise('sub', other, self)

    def __mul__(self, other):
        return elementwise('mul', self, other)

    def __rmul__(self, other):
        return elementwise('mul', other, self)

    def __truediv__(self, other):
        return elementwise('div', self, other)

    def __rtruediv__(self, other):
        return elementwise('div', other, self)

    def __neg__(self):
        return elementwise('scale', self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class TapeNode:
    """One recorded primitive application; saved intermediates live in `backward`"""
    op: str
    inputs: Tuple[DenseArray, ...]
    output: DenseArray
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

    @property
    def input_ids(self) -> Tuple[int, ...]:
        return tuple(a.id for a in self.inputs)

    @property
    def output_id(self) -> int:
        return self.output.id


class Tape:
    """Ordered record of primitive applications for reverse-mode differentiation"""

    def __init__(self):
        self.nodes: List[TapeNode] = []

    def __enter__(self) -> 'Tape':
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)

    def backward(self, output: DenseArray,
                 seed: Optional[np.ndarray] = None) -> Dict[int, np.ndarray]:
        """
        Propagate gradients from `output` back through the recorded nodes

        Args:
            output: Array to differentiate; must be scalar unless `seed` is given
            seed: Upstream gradient of the same shape as `output`

        Returns:
            Mapping from array id to gradient. Every array on the tape that
            requires a gradient gets its `.grad` replaced.
        """
        if seed is None:
            if output.size != 1:
                raise ContractError(
                    f"backward() without a seed needs a scalar output, got {output.shape}")
            seed = np.ones_like(output.data)
        grads: Dict[int, np.ndarray] = {output.id: np.asarray(seed, dtype=output.dtype)}
        on_tape: Dict[int, DenseArray] = {output.id: output}

        for node in self.nodes:
            for array in node.inputs:
                if array.requires_grad:
                    on_tape[array.id] = array
            on_tape[node.output.id] = node.output

        for node in reversed(self.nodes):
            upstream = grads.get(node.output.id)
            if upstream is None:
                continue
            factor = _gradient_corruption.get(node.op)
            for array, grad in zip(node.inputs, node.backward(upstream)):
                if grad is None or not array.requires_grad:
                    continue
                if factor is not None:
                    grad = grad * factor
                if array.id in grads:
                    grads[array.id] = grads[array.id] + grad
                else:
                    grads[array.id] = grad

        for array_id, array in on_tape.items():
            grad = grads.get(array_id)
            array._grad = None if grad is None else grad.reshape(array.shape)
        return grads


def current_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


@contextmanager
def no_tape():
    """Evaluate without recording, even inside an active tape"""
    _tape_stack.append(None)
    try:
        yield
    finally:
        _tape_stack.pop()


def as_array(value) -> DenseArray:
    """Wrap numpy data or numbers as a constant DenseArray"""
    if isinstance(value, DenseArray):
        return value
    return DenseArray(value)


def _emit(op: str, inputs: Tuple[DenseArray, ...], data: np.ndarray,
          backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> DenseArray:
    if _settings['checked'] and not np.all(np.isfinite(data)):
        raise DomainError(f"{op} produced non-finite values")
    out = DenseArray._wrap(np.asarray(data))
    tape = current_tape()
    if tape is not None and any(a.requires_grad for a in inputs):
        out.requires_grad = True
        tape.record(TapeNode(op, inputs, out, backward))
    return out


def _check_axis(x: DenseArray, axis: int, op: str) -> None:
    if not 0 <= axis < x.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {x.shape}")


# ---------------------------------------------------------------------------
# Linear algebra and shape primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> DenseArray:
    """Matrix product of an m x k and a k x n array"""
    a, b = as_array(a), as_array(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _emit('matmul', (a, b), A @ B, backward)


def transpose(x) -> DenseArray:
    x = as_array(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {x.shape}")

    def backward(g):
        return (g.T,)

    return _emit('transpose', (x,), x.data.T.copy(), backward)


def reshape(x, shape: Sequence[int]) -> DenseArray:
    x = as_array(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    source = x.shape

    def backward(g):
        return (g.reshape(source),)

    return _emit('reshape', (x,), x.data.reshape(shape).copy(), backward)


def concat(a, b, axis: int) -> DenseArray:
    """Concatenate two arrays whose extents agree off `axis`"""
    a, b = as_array(a), as_array(b)
    _check_axis(a, axis, 'concat')
    if a.ndim != b.ndim or any(
            sa != sb for i, (sa, sb) in enumerate(zip(a.shape, b.shape)) if i != axis):
        raise ShapeError(f"concat: shapes {a.shape} and {b.shape} differ off axis {axis}")
    split_at = a.shape[axis]

    def backward(g):
        ga, gb = np.split(g, [split_at], axis=axis)
        return ga, gb

    return _emit('concat', (a, b), np.concatenate([a.data, b.data], axis=axis), backward)


def slice_axis(x, start: int, stop: int, axis: int) -> DenseArray:
    x = as_array(x)
    _check_axis(x, axis, 'slice_axis')
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice_axis: [{start}:{stop}) invalid for extent {x.shape[axis]}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _emit('slice_axis', (x,), x.data[index].copy(), backward)


def split(x, sizes: Sequence[int], axis: int) -> List[DenseArray]:
    """Inverse of concat: consecutive pieces of the given extents"""
    x = as_array(x)
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover extent {x.shape[axis]}")
    pieces, start = [], 0
    for size in sizes:
        pieces.append(slice_axis(x, start, start + size, axis))
        start += size
    return pieces


def expand(x, axis: int, count: int) -> DenseArray:
    """Repeat a unit-extent axis `count` times (explicit row/column broadcast)"""
    x = as_array(x)
    _check_axis(x, axis, 'expand')
    if x.shape[axis] != 1:
        raise ShapeError(f"expand: axis {axis} of {x.shape} must have extent 1")

    def backward(g):
        return (g.sum(axis=axis, keepdims=True),)

    return _emit('expand', (x,), np.repeat(x.data, count, axis=axis), backward)


def take(x, indices: Sequence[int], axis: int = 0) -> DenseArray:
    """Gather slices along `axis`; repeated indices accumulate gradient"""
    x = as_array(x)
    _check_axis(x, axis, 'take')
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis])):
        raise ShapeError(f"take: indices out of range for extent {x.shape[axis]}")

    def backward(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _emit('take', (x,), np.take(x.data, idx, axis=axis), backward)


def extract_patches(x, size: int = 3, stride: int = 2, pad: int = 1) -> DenseArray:
    """
    Unfold an H x W x C raster into rows of size x size x C patches

    Args:
        x: Raster of shape (H, W, C)
        size: Square patch extent
        stride: Step between patch origins
        pad: Zero padding on every border

    Returns:
        Array of shape (Ho * Wo, size * size * C), rows in raster order
    """
    x = as_array(x)
    if x.ndim != 3:
        raise ShapeError(f"extract_patches: expected H x W x C, got {x.shape}")
    height, width, channels = x.shape
    out_h = (height + 2 * pad - size) // stride + 1
    out_w = (width + 2 * pad - size) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"extract_patches: {x.shape} too small for size {size}")

    origin_r = (np.arange(out_h) * stride)[:, None, None, None]
    origin_c = (np.arange(out_w) * stride)[None, :, None, None]
    offset_r = np.arange(size)[None, None, :, None]
    offset_c = np.arange(size)[None, None, None, :]
    rows = np.broadcast_to(origin_r + offset_r, (out_h, out_w, size, size)).reshape(out_h * out_w, -1)
    cols = np.broadcast_to(origin_c + offset_c, (out_h, out_w, size, size)).reshape(out_h * out_w, -1)
    padded = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    patches = padded[rows, cols, :].reshape(out_h * out_w, size * size * channels)

    def backward(g):
        grad_padded = np.zeros_like(padded)
        np.add.at(grad_padded, (rows, cols), g.reshape(out_h * out_w, size * size, channels))
        return (grad_padded[pad:pad + height, pad:pad + width, :],)

    return _emit('extract_patches', (x,), patches, backward)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def softmax_axis(x, axis: int) -> DenseArray:
    """Softmax along `axis`, computed with max subtraction"""
    x = as_array(x)
    _check_axis(x, axis, 'softmax_axis')
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    y = exps / exps.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit('softmax_axis', (x,), y, backward)


def log_softmax_axis(x, axis: int) -> DenseArray:
    x = as_array(x)
    _check_axis(x, axis, 'log_softmax_axis')
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(y)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _emit('log_softmax_axis', (x,), y, backward)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

_UNARY_KINDS = ('sigmoid', 'gelu', 'log', 'exp', 'abs', 'sqrt')
_BINARY_KINDS = ('add', 'sub', 'mul', 'div')


def elementwise(kind: str, a, b=None) -> DenseArray:
    """
    Apply an elementwise operation

    Args:
        kind: One of add, sub, mul, div, sigmoid, gelu, log, exp, abs, sqrt, scale
        a: First operand (array, or a number for binary kinds)
        b: Second operand for binary kinds; the factor for `scale`

    Returns:
        Result array with the shape of the array operand(s)
    """
    if kind == 'scale':
        return _scale(as_array(a), float(b))
    if kind in _UNARY_KINDS:
        return _unary(kind, as_array(a))
    if kind in _BINARY_KINDS:
        return _binary(kind, a, b)
    raise ContractError(f"Unknown elementwise kind: {kind}")


def _scale(x: DenseArray, factor: float) -> DenseArray:
    def backward(g):
        return (g * factor,)

    return _emit('scale', (x,), x.data * factor, backward)


def _unary(kind: str, x: DenseArray) -> DenseArray:
    X = x.data
    if kind == 'sigmoid':
        y = expit(X)

        def backward(g):
            return (g * y * (1.0 - y),)
    elif kind == 'gelu':
        cdf = 0.5 * (1.0 + erf(X / _SQRT_2))
        y = X * cdf

        def backward(g):
            return (g * (cdf + X * _INV_SQRT_2PI * np.exp(-0.5 * X * X)),)
    elif kind == 'log':
        if _settings['checked'] and np.any(X <= 0):
            raise DomainError("log of non-positive input")
        y = np.log(X)

        def backward(g):
            return (g / X,)
    elif kind == 'exp':
        y = np.exp(X)

        def backward(g):
            return (g * y,)
    elif kind == 'abs':
        y = np.abs(X)

        def backward(g):
            return (g * np.sign(X),)
    else:
        if _settings['checked'] and np.any(X < 0):
            raise DomainError("sqrt of negative input")
        y = np.sqrt(X)

        def backward(g):
            return (g * 0.5 / y,)

    return _emit(kind, (x,), y, backward)


def _binary(kind: str, a, b) -> DenseArray:
    if b is None:
        raise ContractError(f"{kind} needs two operands")
    if not isinstance(a, DenseArray) and not isinstance(b, DenseArray):
        raise ContractError(f"{kind} needs at least one array operand")
    if not isinstance(a, DenseArray):
        a = DenseArray(np.full(b.shape, float(a)), dtype=b.dtype)
    elif not isinstance(b, DenseArray):
        b = DenseArray(np.full(a.shape, float(b)), dtype=a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    A, B = a.data, b.data

    if kind == 'add':
        y = A + B

        def backward(g):
            return g, g
    elif kind == 'sub':
        y = A - B

        def backward(g):
            return g, -g
    elif kind == 'mul':
        y = A * B

        def backward(g):
            return g * B, g * A
    else:
        y = A / B

        def backward(g):
            return g / B, -g * A / (B * B)

    return _emit(kind, (a, b), y, backward)


def add(a, b) -> DenseArray:
    return elementwise('add', a, b)


def sub(a, b) -> DenseArray:
    return elementwise('sub', a, b)


def mul(a, b) -> DenseArray:
    return elementwise('mul', a, b)


def div(a, b) -> DenseArray:
    return elementwise('div', a, b)


def sigmoid(x) -> DenseArray:
    return elementwise('sigmoid', x)


def gelu(x) -> DenseArray:
    return elementwise('gelu', x)


def log(x) -> DenseArray:
    return elementwise('log', x)


def exp(x) -> DenseArray:
    return elementwise('exp', x)


def absolute(x) -> DenseArray:
    return elementwise('abs', x)


def sqrt(x) -> DenseArray:
    return elementwise('sqrt', x)


def scale(x, factor: float) -> DenseArray:
    return elementwise('scale', x, factor)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def reduce(x, kind: str, axis: int) -> DenseArray:
    """
    Reduce along one axis

    Args:
        x: Input array
        kind: 'sum', 'mean', 'min' or 'max'
        axis: Axis removed by the reduction

    Returns:
        Array without `axis`. Min/max gradients go to the first attaining index.
    """
    x = as_array(x)
    _check_axis(x, axis, 'reduce')
    extent = x.shape[axis]
    if extent == 0:
        raise DomainError(f"reduce: empty axis {axis}")
    X = x.data

    if kind in ('sum', 'mean'):
        factor = 1.0 if kind == 'sum' else 1.0 / extent
        y = X.sum(axis=axis) * factor

        def backward(g):
            return (np.repeat(np.expand_dims(g * factor, axis), extent, axis=axis),)
    elif kind in ('min', 'max'):
        picks = X.argmin(axis=axis) if kind == 'min' else X.argmax(axis=axis)
        picks = np.expand_dims(picks, axis)
        y = np.take_along_axis(X, picks, axis=axis).squeeze(axis)

        def backward(g):
            full = np.zeros_like(X)
            np.put_along_axis(full, picks, np.expand_dims(g, axis), axis=axis)
            return (full,)
    else:
        raise ContractError(f"Unknown reduction: {kind}")

    return _emit(f"reduce_{kind}", (x,), np.asarray(y), backward)


def sum_all(x) -> DenseArray:
    x = as_array(x)
    return reduce(reshape(x, (x.size,)), 'sum', 0)


def mean_all(x) -> DenseArray:
    x = as_array(x)
    return reduce(reshape(x, (x.size,)), 'mean', 0)


def l2_normalize_rows(x, eps: float = 1e-12) -> DenseArray:
    """Scale each row of a matrix to unit Euclidean norm"""
    x = as_array(x)
    rows, cols = x.shape
    norms = sqrt(reduce(x * x, 'sum', 1) + eps)
    return x / expand(reshape(norms, (rows, 1)), 1, cols)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def gradient_pair(f: Callable[[DenseArray], DenseArray], x, eps: float = None,
                  indices: Optional[Sequence[int]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Tape gradient and central-difference gradient of a scalar function

    Args:
        f: Differentiable scalar-valued function of one array
        x: Evaluation point (64-bit)
        eps: Central-difference step
        indices: Flat indices to probe numerically (default: all)

    Returns:
        (analytic, numeric) restricted to the probed indices, as flat arrays
    """
    eps = TENSOR_CONFIG['gradcheck_eps'] if eps is None else eps
    x = as_array(x)
    if x.dtype != np.float64:
        raise ContractError("finite-difference checks need 64-bit arrays")
    probe = DenseArray(x.data, requires_grad=True)
    with Tape() as tape:
        value = f(probe)
    if value.size != 1:
        raise ContractError(f"gradient check needs a scalar function, got shape {value.shape}")
    tape.backward(value)
    analytic_full = probe.grad.reshape(-1)

    flat = x.data.reshape(-1)
    positions = np.arange(flat.size) if indices is None else np.asarray(indices, dtype=np.int64)
    numeric = np.zeros(positions.size)
    with no_tape():
        for n, i in enumerate(positions):
            plus, minus = flat.copy(), flat.copy()
            plus[i] += eps
            minus[i] -= eps
            f_plus = f(DenseArray(plus.reshape(x.shape))).item()
            f_minus = f(DenseArray(minus.reshape(x.shape))).item()
            numeric[n] = (f_plus - f_minus) / (2.0 * eps)
    return analytic_full[positions], numeric


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = None) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)"""
    floor = TENSOR_CONFIG['gradcheck_floor'] if floor is None else floor
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_diff_check(f: Callable[[DenseArray], DenseArray], x, eps: float = None,
                      indices: Optional[Sequence[int]] = None) -> float:
    """
    Compare the tape gradient of a scalar function to central differences

    Args:
        f: Differentiable scalar-valued function of one array
        x: Evaluation point (64-bit)
        eps: Central-difference step
        indices: Flat indices to compare (default: all)

    Returns:
        Maximum relative error over the compared entries
    """
    analytic, numeric = gradient_pair(f, x, eps, indices)
    return relative_error(analytic, numeric)
