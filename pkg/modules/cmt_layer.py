"""
Clustering Mask Transformer Layer
Pixel-to-center assignment, the three center-update variants, pixel update and
the self-attention + feed-forward wrapper
"""

import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, ShapeError
from .location import (PixelCoordGrid, ReferenceState, inject_coordinates,
                       update_reference_masks)
from .parameters import MLP, Linear, ParameterStore
from .tensor import (DenseArray, expand, matmul, reduce, reshape, scale,
                     softmax_axis, sqrt, transpose)

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

VARIANTS = ('baseline_eq3', 'clustering_eq5', 'combined_eq7')


@dataclass(frozen=True)
class DecoderOptions:
    """Switches that select the layer variant and optional components"""
    variant: str = 'combined_eq7'
    use_self_attention: bool = True
    use_ffn: bool = True
    use_coord_conv: bool = True
    use_reference_masks: bool = True
    share_affinity_projections: bool = False
    attention_scale: bool = False
    layer_norm: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"Unknown decoder variant: {self.variant}")


@dataclass(frozen=True)
class LayerTrace:
    """Intermediate quantities of one layer, kept for losses and reports"""
    Z: DenseArray          # HW x N assignment, softmax over centers
    logits: DenseArray     # HW x N carried affinity logits S'
    attention: DenseArray  # N x HW baseline cross-attention, softmax over pixels


@dataclass(frozen=True)
class DecoderState:
    """Pixel features, centers, carried affinity logits and reference points"""
    F: DenseArray
    C: DenseArray
    S: DenseArray
    ref: ReferenceState
    grid: PixelCoordGrid
    trace: Optional[LayerTrace] = None

    def __post_init__(self):
        num_pixels, num_centers = self.F.shape[0], self.C.shape[0]
        if self.S.shape != (num_pixels, num_centers):
            raise ShapeError(
                f"Affinity logits {self.S.shape} do not match {num_pixels} pixels x {num_centers} centers")
        if self.F.shape[1] != self.C.shape[1]:
            raise ShapeError(f"Feature widths differ: F {self.F.shape}, C {self.C.shape}")
        if self.ref.num_centers != num_centers:
            raise ShapeError(f"Reference state has {self.ref.num_centers} centers, expected {num_centers}")
        if self.grid.num_pixels != num_pixels:
            raise ShapeError(f"Grid covers {self.grid.num_pixels} pixels, F has {num_pixels}")

    @classmethod
    def initial(cls, F: DenseArray, C: DenseArray, grid: PixelCoordGrid,
                num_points: int) -> 'DecoderState':
        """First-layer state: S = 0 and the all-0.5 reference mask"""
        S = DenseArray(np.zeros((F.shape[0], C.shape[0])))
        return cls(F=F, C=C, S=S, ref=ReferenceState.initial(C.shape[0], num_points), grid=grid)


class LayerParams:
    """All projections used by one decoder layer"""

    def __init__(self, store: ParameterStore, prefix: str, dim: int, num_points: int,
                 rng: np.random.Generator, options: DecoderOptions,
                 reference_mlp: Optional[MLP] = None):
        self.dim = dim
        # cross-attention path; query/key carry no bias (softmax would ignore it)
        self.query_c = Linear(store, f"{prefix}.query_c", dim, dim, rng, bias=False)
        self.key_p = Linear(store, f"{prefix}.key_p", dim, dim, rng, bias=False)
        self.value_p = Linear(store, f"{prefix}.value_p", dim, dim, rng, init='zeros')
        # residual affinity path
        if options.share_affinity_projections:
            self.query_tilde, self.key_tilde = self.query_c, self.key_p
        else:
            self.query_tilde = Linear(store, f"{prefix}.query_tilde", dim, dim, rng, bias=False)
            self.key_tilde = Linear(store, f"{prefix}.key_tilde", dim, dim, rng, bias=False)
        self.value_c = Linear(store, f"{prefix}.value_c", dim, dim, rng, init='zeros')

        self.self_query = self.self_key = self.self_value = None
        if options.use_self_attention:
            self.self_query = Linear(store, f"{prefix}.self_attn.query", dim, dim, rng, bias=False)
            self.self_key = Linear(store, f"{prefix}.self_attn.key", dim, dim, rng, bias=False)
            self.self_value = Linear(store, f"{prefix}.self_attn.value", dim, dim, rng, init='zeros')
        self.ffn = MLP(store, f"{prefix}.ffn", dim, 2 * dim, dim, rng) if options.use_ffn else None

        self.coord_f = self.coord_c = None
        if options.use_coord_conv:
            self.coord_f = Linear(store, f"{prefix}.coord_f", dim + 2, dim, rng, init='identity')
            self.coord_c = Linear(store, f"{prefix}.coord_c", dim + 2 * num_points, dim, rng,
                                  init='identity')

        self.reference_mlp = None
        if options.use_reference_masks:
            self.reference_mlp = reference_mlp or MLP(
                store, f"{prefix}.reference_mlp", dim, dim, 2 * num_points, rng)


def _logit_scale(x: DenseArray, dim: int, options: DecoderOptions) -> DenseArray:
    return scale(x, 1.0 / np.sqrt(dim)) if options.attention_scale else x


def layer_norm_rows(x: DenseArray, eps: float = 1e-5) -> DenseArray:
    """Parameter-free normalization of each row to zero mean, unit variance"""
    rows, cols = x.shape
    mean = expand(reshape(reduce(x, 'mean', 1), (rows, 1)), 1, cols)
    centered = x - mean
    var = reduce(centered * centered, 'mean', 1)
    std = expand(reshape(sqrt(var + eps), (rows, 1)), 1, cols)
    return centered / std


def assign_pixels(state: DecoderState, params: LayerParams,
                  options: DecoderOptions = DecoderOptions()):
    """
    Residual pixel-to-center assignment

    Returns:
        (Z, S') with S' = S + K~p (Q~c)^T and Z = softmax over centers of S'
    """
    key = params.key_tilde(state.F)
    query = params.query_tilde(state.C)
    affinity = _logit_scale(matmul(key, transpose(query)), params.dim, options)
    logits = state.S + affinity
    return softmax_axis(logits, axis=1), logits


def baseline_attention(state: DecoderState, params: LayerParams,
                       options: DecoderOptions = DecoderOptions()) -> DenseArray:
    """N x HW cross-attention, each center's row normalized over pixels"""
    query = params.query_c(state.C)
    key = params.key_p(state.F)
    return softmax_axis(_logit_scale(matmul(query, transpose(key)), params.dim, options), axis=1)


def cross_attention_baseline(state: DecoderState, params: LayerParams,
                             options: DecoderOptions = DecoderOptions()) -> DenseArray:
    """Cross-attention update term softmax_HW(Qc Kp^T) Vp, without the +C residual"""
    return matmul(baseline_attention(state, params, options), params.value_p(state.F))


def cluster_center_update(Z: DenseArray, Vp: DenseArray) -> DenseArray:
    """Assignment-weighted pooling Z^T Vp of pixel values per center"""
    if Z.shape[0] != Vp.shape[0]:
        raise ShapeError(f"cluster_center_update: Z {Z.shape} vs Vp {Vp.shape}")
    return matmul(transpose(Z), Vp)


def combined_center_update(state: DecoderState, params: LayerParams, Z: DenseArray,
                           options: DecoderOptions = DecoderOptions(),
                           attention: Optional[DenseArray] = None) -> DenseArray:
    """
    Center update combining cross-attention and clustering

    Args:
        state: Current decoder state
        params: Layer projections
        Z: HW x N assignment from assign_pixels
        options: Decoder switches
        attention: Precomputed N x HW baseline attention (recomputed if None)

    Returns:
        C' = C + (A + Z^T) Vp
    """
    if attention is None:
        attention = baseline_attention(state, params, options)
    values = params.value_p(state.F)
    return state.C + matmul(attention + transpose(Z), values)


def pixel_feature_update(F: DenseArray, Z: DenseArray, Vc: DenseArray) -> DenseArray:
    """F' = F + Z Vc"""
    if Z.shape[1] != Vc.shape[0]:
        raise ShapeError(f"pixel_feature_update: Z {Z.shape} vs Vc {Vc.shape}")
    return F + matmul(Z, Vc)


def center_self_attention(C: DenseArray, params: LayerParams,
                          options: DecoderOptions = DecoderOptions()) -> DenseArray:
    """Single-head self-attention among the N centers, with residual"""
    query, key = params.self_query(C), params.self_key(C)
    weights = softmax_axis(_logit_scale(matmul(query, transpose(key)), params.dim, options), axis=1)
    return C + matmul(weights, params.self_value(C))


def cmt_layer(state: DecoderState, params: LayerParams,
              options: DecoderOptions = DecoderOptions()) -> DecoderState:
    """
    Apply one decoder layer

    Order: coordinate injection, pixel assignment, center update (per variant),
    pixel update, center self-attention, feed-forward, reference-mask update.

    Returns:
        New DecoderState whose `trace` holds Z, S' and the baseline attention
    """
    F, C = state.F, state.C
    if options.use_coord_conv:
        F, C = inject_coordinates(F, C, state.grid, state.ref, params.coord_f, params.coord_c)
    injected = replace(state, F=F, C=C, trace=None)

    Z, logits = assign_pixels(injected, params, options)
    attention = baseline_attention(injected, params, options)
    values = params.value_p(F)

    if options.variant == 'baseline_eq3':
        C_new = C + matmul(attention, values)
    elif options.variant == 'clustering_eq5':
        C_new = C + cluster_center_update(Z, values)
    else:
        C_new = combined_center_update(injected, params, Z, options, attention=attention)
    if options.layer_norm:
        C_new = layer_norm_rows(C_new)

    F_new = pixel_feature_update(F, Z, params.value_c(C_new))
    if options.layer_norm:
        F_new = layer_norm_rows(F_new)

    if options.use_self_attention:
        C_new = center_self_attention(C_new, params, options)
        if options.layer_norm:
            C_new = layer_norm_rows(C_new)
    if options.use_ffn:
        C_new = C_new + params.ffn(C_new)
        if options.layer_norm:
            C_new = layer_norm_rows(C_new)

    ref = state.ref
    if options.use_reference_masks:
        ref = update_reference_masks(ref, C_new, params.reference_mlp)

    trace = LayerTrace(Z=Z, logits=logits, attention=attention)
    return DecoderState(F=F_new, C=C_new, S=logits, ref=ref, grid=state.grid, trace=trace)


def column_entropy(column: np.ndarray) -> float:
    """Shannon entropy (nats) of a non-negative column after normalization"""
    column = np.asarray(column, dtype=np.float64)
    total = column.sum()
    if total <= 0:
        return 0.0
    p = column[column > 0] / total
    return float(-(p * np.log(p)).sum())


def attention_entropy_report(columns_per_layer: Sequence[Union[DenseArray, np.ndarray]],
                             matched_center: int) -> List[float]:
    """
    Entropy of one center's assignment column in each layer

    Args:
        columns_per_layer: HW x N arrays (Z, or the transposed baseline attention)
        matched_center: Column index

    Returns:
        Entropy in nats per layer; an all-zero column reports 0
    """
    entropies = []
    for layer in columns_per_layer:
        data = layer.data if isinstance(layer, DenseArray) else np.asarray(layer)
        if not 0 <= matched_center < data.shape[1]:
            raise ContractError(f"Center {matched_center} out of range for {data.shape[1]} centers")
        entropies.append(column_entropy(data[:, matched_center]))
    return entropies
