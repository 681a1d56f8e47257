"""Tests for the clustering mask transformer layer"""

import numpy as np
import pytest

from modules.cmt_layer import (DecoderOptions, DecoderState, LayerParams, assign_pixels,
                               attention_entropy_report, baseline_attention,
                               cluster_center_update, cmt_layer, column_entropy,
                               combined_center_update, cross_attention_baseline,
                               layer_norm_rows, pixel_feature_update)
from modules.errors import ContractError, ShapeError
from modules.location import PixelCoordGrid
from modules.parameters import ParameterStore
from modules.tensor import DenseArray, matmul, transpose


def make_state(rng, side=3, num_centers=4, dim=6, num_points=2):
    grid = PixelCoordGrid.for_shape(side, side)
    F = DenseArray(rng.standard_normal((side * side, dim)))
    C = DenseArray(rng.standard_normal((num_centers, dim)))
    return DecoderState.initial(F, C, grid, num_points)


def make_params(rng, options, dim=6, num_points=2, randomize=True):
    store = ParameterStore()
    params = LayerParams(store, 'layer0', dim, num_points, rng, options)
    if randomize:
        store.randomize(rng, scale=0.4)
    return params


def test_factored_center_update_identity(rng):
    for _ in range(100):
        hw, n, d = rng.integers(1, 65), rng.integers(1, 9), rng.integers(1, 17)
        A = DenseArray(rng.random((n, hw)))
        Z = DenseArray(rng.random((hw, n)))
        V = DenseArray(rng.standard_normal((hw, d)))
        factored = matmul(A + transpose(Z), V).data
        separate = matmul(A, V).data + matmul(transpose(Z), V).data
        np.testing.assert_allclose(factored, separate, rtol=0, atol=1e-10)


def test_cluster_pooling_matches_explicit_loop(rng):
    for _ in range(100):
        hw, n, d = rng.integers(1, 65), rng.integers(1, 9), rng.integers(1, 17)
        Z = rng.random((hw, n))
        V = rng.standard_normal((hw, d))
        expected = np.zeros((n, d))
        for center in range(n):
            for pixel in range(hw):
                expected[center] += Z[pixel, center] * V[pixel]
        pooled = cluster_center_update(DenseArray(Z), DenseArray(V)).data
        np.testing.assert_allclose(pooled, expected, rtol=0, atol=1e-12)


def test_cluster_pooling_rejects_mismatched_pixels():
    with pytest.raises(ShapeError):
        cluster_center_update(DenseArray(np.ones((4, 2))), DenseArray(np.ones((3, 2))))


def test_assignment_rows_are_distributions_and_logits_accumulate(rng):
    options = DecoderOptions()
    state = make_state(rng)
    params = make_params(rng, options)
    Z, logits = assign_pixels(state, params, options)
    np.testing.assert_allclose(Z.data.sum(axis=1), 1.0)
    affinity = matmul(params.key_tilde(state.F), transpose(params.query_tilde(state.C))).data

    carried = DecoderState(F=state.F, C=state.C, S=logits, ref=state.ref, grid=state.grid)
    _, second = assign_pixels(carried, params, options)
    np.testing.assert_allclose(second.data, logits.data + affinity, atol=1e-12)


def affinity_of(params, F, C):
    """K~p(F) Q~c(C)^T from the raw projection weights"""
    key = F @ params.key_tilde.store[params.key_tilde.weight_name].data
    query = C @ params.query_tilde.store[params.query_tilde.weight_name].data
    return key @ query.T


def zero_value_projections(params):
    for layer in (params.value_p, params.value_c, params.self_value, params.ffn.output):
        layer.store.assign(layer.weight_name, np.zeros((layer.in_dim, layer.out_dim)))
        layer.store.assign(layer.bias_name, np.zeros(layer.out_dim))


def test_stacked_layers_carry_the_sum_of_affinities(rng):
    options = DecoderOptions(use_coord_conv=False)
    state = make_state(rng)
    expected = np.zeros((9, 4))
    for _ in range(3):
        params = make_params(rng, options)
        expected += affinity_of(params, state.F.data, state.C.data)
        state = cmt_layer(state, params, options)
        np.testing.assert_allclose(state.S.data, expected, rtol=0, atol=1e-10)
        Z = np.exp(expected - expected.max(axis=1, keepdims=True))
        np.testing.assert_allclose(state.trace.Z.data, Z / Z.sum(axis=1, keepdims=True), atol=1e-12)


def test_zero_value_layers_keep_features_but_accumulate_logits(rng):
    options = DecoderOptions(use_coord_conv=False)
    start = make_state(rng)
    state = start
    params = make_params(rng, options)
    zero_value_projections(params)
    affinity = affinity_of(params, start.F.data, start.C.data)
    for depth in range(1, 4):
        state = cmt_layer(state, params, options)
        np.testing.assert_array_equal(state.F.data, start.F.data)
        np.testing.assert_array_equal(state.C.data, start.C.data)
        np.testing.assert_allclose(state.S.data, depth * affinity, rtol=0, atol=1e-10)


def test_baseline_attention_rows_normalize_over_pixels(rng):
    options = DecoderOptions(variant='baseline_eq3')
    state = make_state(rng)
    attention = baseline_attention(state, make_params(rng, options), options)
    assert attention.shape == (4, 9)
    np.testing.assert_allclose(attention.data.sum(axis=1), 1.0)


def test_combined_update_with_zero_assignment_is_the_baseline(rng):
    options = DecoderOptions()
    state = make_state(rng)
    params = make_params(rng, options)
    Z = DenseArray(np.zeros((9, 4)))
    combined = combined_center_update(state, params, Z, options).data
    baseline = state.C.data + cross_attention_baseline(state, params, options).data
    np.testing.assert_allclose(combined, baseline, rtol=0, atol=1e-10)


def test_pixel_update_adds_assigned_center_values():
    F = DenseArray(np.zeros((2, 2)))
    Z = DenseArray([[1.0, 0.0], [0.25, 0.75]])
    Vc = DenseArray([[4.0, 0.0], [0.0, 4.0]])
    np.testing.assert_allclose(pixel_feature_update(F, Z, Vc).data, [[4.0, 0.0], [1.0, 3.0]])


@pytest.mark.parametrize("variant", ['baseline_eq3', 'clustering_eq5', 'combined_eq7'])
def test_layer_output_shapes_and_trace(variant, rng):
    options = DecoderOptions(variant=variant)
    state = make_state(rng)
    out = cmt_layer(state, make_params(rng, options), options)
    assert out.F.shape == (9, 6) and out.C.shape == (4, 6)
    assert out.S is out.trace.logits
    assert out.trace.Z.shape == (9, 4)
    assert out.trace.attention.shape == (4, 9)
    assert out.ref.r_c.shape == (4, 4)


def test_fresh_layer_keeps_features_until_values_train(rng):
    options = DecoderOptions(use_self_attention=False)
    state = make_state(rng)
    out = cmt_layer(state, make_params(rng, options, randomize=False), options)
    # value projections and the FFN/reference heads start at zero, coord-conv at identity
    np.testing.assert_allclose(out.F.data, state.F.data, atol=1e-12)
    np.testing.assert_allclose(out.C.data, state.C.data, atol=1e-12)
    np.testing.assert_allclose(out.ref.r_c.data, 0.5)


def test_shared_affinity_projections_reuse_cross_attention_weights(rng):
    store = ParameterStore()
    params = LayerParams(store, 'l', 4, 1, rng, DecoderOptions(share_affinity_projections=True))
    assert params.query_tilde is params.query_c
    assert 'l.query_tilde.weight' not in store


def test_layer_norm_rows_standardizes(rng):
    y = layer_norm_rows(DenseArray(rng.standard_normal((3, 8)) * 5 + 2)).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-3)


def test_unknown_variant_rejected():
    with pytest.raises(ContractError):
        DecoderOptions(variant='eq9')


def test_decoder_state_validates_shapes(rng):
    state = make_state(rng)
    with pytest.raises(ShapeError):
        DecoderState(F=state.F, C=state.C, S=DenseArray(np.zeros((9, 3))), ref=state.ref,
                     grid=state.grid)


def test_column_entropy_values():
    assert column_entropy(np.full(16, 0.25)) == pytest.approx(np.log(16))
    assert column_entropy(np.array([1.0, 0.0, 0.0])) == 0.0
    assert column_entropy(np.zeros(4)) == 0.0


def test_entropy_report_per_layer_and_center_bounds():
    uniform = np.full((4, 2), 0.5)
    peaked = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
    report = attention_entropy_report([uniform, peaked], 0)
    assert report == pytest.approx([np.log(4), 0.0])
    with pytest.raises(ContractError):
        attention_entropy_report([uniform], 2)
