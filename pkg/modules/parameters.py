"""
Parameter Store
Named learnable arrays plus the affine building blocks built on top of them
"""

import logging
from collections import OrderedDict
from typing import Dict, Iterator

import numpy as np

from .errors import CheckpointError, ContractError, ShapeError
from .tensor import DenseArray, expand, gelu, matmul, reshape

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

INITIALIZERS = ('orthonormal', 'gaussian', 'zeros', 'identity')


def init_matrix(rng: np.random.Generator, rows: int, cols: int, init: str) -> np.ndarray:
    """
    Build an initial weight matrix

    Args:
        rng: Numpy random generator
        rows: Input width
        cols: Output width
        init: 'orthonormal', 'gaussian', 'zeros' or 'identity' ([I; 0] projection)

    Returns:
        rows x cols float64 matrix
    """
    if init == 'zeros':
        return np.zeros((rows, cols))
    if init == 'identity':
        weight = np.zeros((rows, cols))
        size = min(rows, cols)
        weight[:size, :size] = np.eye(size)
        return weight
    if init == 'gaussian':
        return rng.standard_normal((rows, cols)) / np.sqrt(rows)
    if init == 'orthonormal':
        big, small = max(rows, cols), min(rows, cols)
        q, r = np.linalg.qr(rng.standard_normal((big, small)))
        q = q * np.sign(np.diag(r))
        return q if rows >= cols else q.T
    raise ContractError(f"Unknown initializer: {init}")


class ParameterStore:
    """Ordered mapping from parameter name to a learnable DenseArray"""

    def __init__(self):
        self._params: Dict[str, DenseArray] = OrderedDict()

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> DenseArray:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def add(self, name: str, value: np.ndarray) -> DenseArray:
        if name in self._params:
            raise ContractError(f"Duplicate parameter name: {name}")
        param = DenseArray(value, requires_grad=True)
        self._params[name] = param
        return param

    def assign(self, name: str, value: np.ndarray) -> None:
        """Replace a parameter's values, keeping its shape"""
        current = self._params[name]
        value = np.asarray(value)
        if value.shape != current.shape:
            raise ShapeError(
                f"Parameter {name}: expected shape {current.shape}, got {value.shape}")
        self._params[name] = DenseArray(value, requires_grad=True)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((name, p.numpy()) for name, p in self._params.items())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """
        Load values for every parameter

        Args:
            state: Mapping name -> array, must cover exactly this store
        """
        missing = [name for name in self._params if name not in state]
        if missing:
            raise CheckpointError(f"Checkpoint is missing parameter: {missing[0]}")
        unexpected = [name for name in state if name not in self._params]
        if unexpected:
            raise CheckpointError(f"Checkpoint has unknown parameter: {unexpected[0]}")
        for name, value in state.items():
            expected = self._params[name].shape
            if tuple(np.shape(value)) != expected:
                raise CheckpointError(
                    f"Parameter {name}: checkpoint shape {tuple(np.shape(value))} "
                    f"does not match model shape {expected}")
        for name, value in state.items():
            self._params[name] = DenseArray(value, requires_grad=True)

    def randomize(self, rng: np.random.Generator, scale: float = 0.5) -> None:
        """Overwrite every parameter with Gaussian noise (gradient probes)"""
        for name, param in list(self._params.items()):
            self._params[name] = DenseArray(
                rng.standard_normal(param.shape) * scale, requires_grad=True)


class Linear:
    """Per-row affine map x @ W + b (a 1x1 convolution on HW x D rasters)"""

    def __init__(self, store: ParameterStore, name: str, in_dim: int, out_dim: int,
                 rng: np.random.Generator, init: str = 'orthonormal', bias: bool = True):
        self.store = store
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight_name = f"{name}.weight"
        self.bias_name = f"{name}.bias" if bias else None
        store.add(self.weight_name, init_matrix(rng, in_dim, out_dim, init))
        if bias:
            store.add(self.bias_name, np.zeros(out_dim))

    def __call__(self, x: DenseArray) -> DenseArray:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(
                f"{self.name}: expected input width {self.in_dim}, got shape {x.shape}")
        out = matmul(x, self.store[self.weight_name])
        if self.bias_name is None:
            return out
        bias = reshape(self.store[self.bias_name], (1, self.out_dim))
        return out + expand(bias, 0, x.shape[0])


class MLP:
    """Two affine layers with GeLU between; output layer can start at zero"""

    def __init__(self, store: ParameterStore, name: str, in_dim: int, hidden_dim: int,
                 out_dim: int, rng: np.random.Generator, output_init: str = 'zeros'):
        self.hidden = Linear(store, f"{name}.fc1", in_dim, hidden_dim, rng, init='orthonormal')
        self.output = Linear(store, f"{name}.fc2", hidden_dim, out_dim, rng, init=output_init)

    def __call__(self, x: DenseArray) -> DenseArray:
        return self.output(gelu(self.hidden(x)))


def parameter_count(store: ParameterStore) -> int:
    return int(sum(p.size for _, p in store.items()))
