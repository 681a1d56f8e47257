"""
Gradient Check Suite
Central finite differences against tape gradients for every primitive and for
the full decoder, forward + loss and recursive compositions
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np
import pandas as pd

from config.config import TENSOR_CONFIG
from .cmt_layer import DecoderOptions, DecoderState, LayerParams, cmt_layer
from .cmt_model import CMTModel, ModelConfig
from .location import PixelCoordGrid
from .losses import PanopticTarget
from .parameters import ParameterStore
from .scene_generator import SceneConfig, generate_scene
from .trainer import compute_losses
from .tensor import (DenseArray, Tape, concat, elementwise, expand, extract_patches,
                     l2_normalize_rows, log_softmax_axis, matmul, no_tape, reduce, relative_error,
                     reshape, slice_axis, softmax_axis, sum_all, take, transpose, finite_diff_check)

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-4
NEGLIGIBLE_GRADIENT = 1e-5

SIZES = {
    'tiny': {'image': 8, 'dim': 8, 'num_queries': 3, 'num_layers': 1, 'num_points': 2,
             'stem_channels': 4, 'num_sampled_pixels': 4, 'instances': 3, 'top_k': 3},
    'small': {'image': 16, 'dim': 12, 'num_queries': 4, 'num_layers': 2, 'num_points': 4,
              'stem_channels': 6, 'num_sampled_pixels': 12, 'instances': 10, 'top_k': 4}
}


@dataclass(frozen=True)
class PrimitiveCase:
    """One primitive under test: input generator and the op applied to it"""
    name: str
    make_input: Callable[[np.random.Generator], np.ndarray]
    apply: Callable[[DenseArray], DenseArray]


def _weighted_sum(out: DenseArray, weights: np.ndarray) -> DenseArray:
    return sum_all(out * DenseArray(weights))


def _distinct(shape: Tuple[int, ...]) -> Callable[[np.random.Generator], np.ndarray]:
    """Values at least 0.1 apart so min/max never tie under perturbation"""
    def make(rng):
        size = int(np.prod(shape))
        return (rng.permutation(size) * 0.1 + rng.uniform(-0.02, 0.02, size)).reshape(shape)
    return make


def _normal(*shape) -> Callable[[np.random.Generator], np.ndarray]:
    return lambda rng: rng.standard_normal(shape)


def _positive(*shape) -> Callable[[np.random.Generator], np.ndarray]:
    return lambda rng: rng.uniform(0.5, 2.0, shape)


def _away_from_zero(*shape) -> Callable[[np.random.Generator], np.ndarray]:
    def make(rng):
        magnitude = rng.uniform(0.1, 2.0, shape)
        return magnitude * rng.choice([-1.0, 1.0], size=shape)
    return make


def primitive_cases(rng: np.random.Generator) -> List[PrimitiveCase]:
    """Fixed constants are drawn once so every instance differentiates the same function"""
    right = DenseArray(rng.standard_normal((5, 3)))
    left = DenseArray(rng.standard_normal((4, 5)))
    other = DenseArray(rng.standard_normal((4, 3)))
    divisor = DenseArray(rng.uniform(0.5, 2.0, (4, 3)))
    return [
        PrimitiveCase('matmul_left', _normal(4, 5), lambda x: matmul(x, right)),
        PrimitiveCase('matmul_right', _normal(5, 3), lambda x: matmul(left, x)),
        PrimitiveCase('transpose', _normal(4, 3), transpose),
        PrimitiveCase('reshape', _normal(4, 3), lambda x: reshape(x, (2, 6))),
        PrimitiveCase('softmax_axis0', _normal(6, 3), lambda x: softmax_axis(x, 0)),
        PrimitiveCase('softmax_axis1', _normal(6, 3), lambda x: softmax_axis(x, 1)),
        PrimitiveCase('log_softmax', _normal(6, 3), lambda x: log_softmax_axis(x, 1)),
        PrimitiveCase('add', _normal(4, 3), lambda x: elementwise('add', x, other)),
        PrimitiveCase('sub', _normal(4, 3), lambda x: elementwise('sub', other, x)),
        PrimitiveCase('mul', _normal(4, 3), lambda x: elementwise('mul', x, other)),
        PrimitiveCase('div_numerator', _normal(4, 3), lambda x: elementwise('div', x, divisor)),
        PrimitiveCase('div_denominator', _positive(4, 3), lambda x: elementwise('div', other, x)),
        PrimitiveCase('scale', _normal(4, 3), lambda x: elementwise('scale', x, -1.7)),
        PrimitiveCase('sigmoid', _normal(4, 3), lambda x: elementwise('sigmoid', x)),
        PrimitiveCase('gelu', _normal(4, 3), lambda x: elementwise('gelu', x)),
        PrimitiveCase('exp', _normal(4, 3), lambda x: elementwise('exp', x)),
        PrimitiveCase('log', _positive(4, 3), lambda x: elementwise('log', x)),
        PrimitiveCase('abs', _away_from_zero(4, 3), lambda x: elementwise('abs', x)),
        PrimitiveCase('sqrt', _positive(4, 3), lambda x: elementwise('sqrt', x)),
        PrimitiveCase('reduce_sum', _normal(4, 3), lambda x: reduce(x, 'sum', 0)),
        PrimitiveCase('reduce_mean', _normal(4, 3), lambda x: reduce(x, 'mean', 1)),
        PrimitiveCase('reduce_min', _distinct((4, 3)), lambda x: reduce(x, 'min', 0)),
        PrimitiveCase('reduce_max', _distinct((4, 3)), lambda x: reduce(x, 'max', 1)),
        PrimitiveCase('concat', _normal(4, 3), lambda x: concat(x, reshape(transpose(x), (4, 3)), 1)),
        PrimitiveCase('slice_axis', _normal(4, 6), lambda x: slice_axis(x, 1, 4, 1)),
        PrimitiveCase('expand', _normal(4, 1), lambda x: expand(x, 1, 3)),
        PrimitiveCase('take', _normal(5, 3), lambda x: take(x, [4, 0, 4, 2], axis=0)),
        PrimitiveCase('extract_patches', _normal(6, 6, 2),
                      lambda x: extract_patches(x, size=3, stride=2, pad=1)),
        PrimitiveCase('l2_normalize_rows', _normal(4, 3), l2_normalize_rows)
    ]


def check_primitive(case: PrimitiveCase, rng: np.random.Generator, instances: int,
                    eps: float = TENSOR_CONFIG['gradcheck_eps']) -> float:
    """Max relative error of one primitive over random instances"""
    worst = 0.0
    for _ in range(instances):
        x = case.make_input(rng)
        with no_tape():
            out_shape = case.apply(DenseArray(x)).shape
        weights = rng.uniform(0.5, 1.5, out_shape)
        error = finite_diff_check(lambda arr: _weighted_sum(case.apply(arr), weights), x, eps)
        worst = max(worst, error)
    return worst


def check_parameters(store: ParameterStore, loss_fn: Callable[[], DenseArray], top_k: int,
                     eps: float = TENSOR_CONFIG['gradcheck_eps']) -> Dict[str, float]:
    """
    Probe every parameter at its top_k entries by analytic magnitude

    Entries whose analytic gradient is below NEGLIGIBLE_GRADIENT are not probed:
    their central differences are dominated by round-off.

    Returns:
        Max relative error per parameter name
    """
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {name: param.grad.reshape(-1).copy() for name, param in store.items()}

    errors = {}
    for name, grad in analytic.items():
        order = np.argsort(-np.abs(grad), kind='stable')[:top_k]
        order = order[np.abs(grad[order]) >= NEGLIGIBLE_GRADIENT]
        base = store[name].data.copy()
        numeric = np.zeros(len(order))
        with no_tape():
            for n, i in enumerate(order):
                flat = base.reshape(-1).copy()
                flat[i] = base.reshape(-1)[i] + eps
                store.assign(name, flat.reshape(base.shape))
                f_plus = loss_fn().item()
                flat[i] = base.reshape(-1)[i] - eps
                store.assign(name, flat.reshape(base.shape))
                f_minus = loss_fn().item()
                numeric[n] = (f_plus - f_minus) / (2.0 * eps)
        store.assign(name, base)
        errors[name] = relative_error(grad[order], numeric)
    return errors


def _tiny_target(size: int) -> PanopticTarget:
    """One square mask in the top-left quadrant, class 1"""
    mask = np.zeros((1, size, size), dtype=bool)
    mask[0, :size // 2, :size // 2] = True
    return PanopticTarget(mask, [1])


def _model_case(size: str, seed: int, rfn: bool):
    settings = SIZES[size]
    config = ModelConfig(dim=settings['dim'], num_queries=settings['num_queries'],
                         num_layers=settings['num_layers'], num_points=settings['num_points'],
                         stem_channels=settings['stem_channels'],
                         num_sampled_pixels=settings['num_sampled_pixels'], rfn=rfn)
    model = CMTModel(config, seed=seed)
    rng = np.random.default_rng(seed)
    model.store.randomize(rng, scale=0.3)
    side = settings['image']
    if side >= 16:
        sample = generate_scene(seed, SceneConfig(height=side, width=side, max_shapes=2))
        image, target = sample.image.astype(np.float64), sample.target
    else:
        image, target = rng.uniform(0.0, 1.0, (side, side, 3)), _tiny_target(side)

    def loss_fn() -> DenseArray:
        output = model.forward_rfn(image) if rfn else model.forward(image)
        return compute_losses(output, target, config, pixel_seed=seed).total

    return model.store, loss_fn


def _layer_stack_case(size: str, seed: int, num_layers: int = 3):
    settings = SIZES[size]
    rng = np.random.default_rng(seed)
    dim, n, m = settings['dim'], settings['num_queries'], settings['num_points']
    side = settings['image'] // 4
    store = ParameterStore()
    options = DecoderOptions()
    layers = [LayerParams(store, f"layer{i}", dim, m, rng, options) for i in range(num_layers)]
    store.randomize(rng, scale=0.3)
    store.add('F', rng.standard_normal((side * side, dim)))
    store.add('C', rng.standard_normal((n, dim)))
    grid = PixelCoordGrid.for_shape(side, side)
    weights = {key: rng.uniform(0.5, 1.5, shape) for key, shape in
               (('F', (side * side, dim)), ('C', (n, dim)), ('S', (side * side, n)),
                ('r', (n, 2 * m)))}

    def loss_fn() -> DenseArray:
        state = DecoderState.initial(store['F'], store['C'], grid, m)
        for params in layers:
            state = cmt_layer(state, params, options)
        return (_weighted_sum(state.F, weights['F']) + _weighted_sum(state.C, weights['C'])
                + _weighted_sum(state.S, weights['S']) + _weighted_sum(state.ref.r_c, weights['r']))

    return store, loss_fn


def run_gradient_suite(size: str = 'tiny', seed: int = 0,
                       tolerance: float = DEFAULT_TOLERANCE) -> pd.DataFrame:
    """
    Check every primitive and the composite models at 64-bit

    Args:
        size: 'tiny' (8x8 image, N=3, 1 layer) or 'small' (16x16, N=4, 2 layers)
        seed: Seed for inputs and parameters
        tolerance: Maximum accepted relative error

    Returns:
        DataFrame with columns component, kind, max_rel_error, passed
    """
    if size not in SIZES:
        raise ValueError(f"Unknown gradcheck size: {size}")
    rng = np.random.default_rng(seed)
    rows = []
    for case in primitive_cases(rng):
        error = check_primitive(case, rng, SIZES[size]['instances'])
        rows.append({'component': case.name, 'kind': 'primitive', 'max_rel_error': error})

    composites = {
        'cmt_layer_stack': _layer_stack_case(size, seed),
        'forward_loss': _model_case(size, seed, rfn=False),
        'forward_loss_rfn': _model_case(size, seed, rfn=True)
    }
    for name, (store, loss_fn) in composites.items():
        errors = check_parameters(store, loss_fn, SIZES[size]['top_k'])
        worst = max(errors, key=errors.get)
        logger.debug(f"{name}: worst parameter {worst} ({errors[worst]:.2e})")
        rows.append({'component': name, 'kind': 'composite', 'max_rel_error': errors[worst]})

    frame = pd.DataFrame(rows, columns=['component', 'kind', 'max_rel_error'])
    frame['passed'] = frame['max_rel_error'] < tolerance
    failed = frame.loc[~frame['passed'], 'component'].tolist()
    if failed:
        logger.warning(f"Gradient check failed for: {', '.join(failed)}")
    else:
        logger.info(f"Gradient check passed for {len(frame)} components")
    return frame
