"""Tests for matching and the training losses"""

import itertools

import numpy as np
import pytest
from scipy.special import logit

from modules.errors import ContractError
from modules.location import ReferenceState
from modules.losses import (BACKGROUND, Matching, PanopticTarget, SampledPixelSet, dice_scores,
                            hungarian, mask_approximation_loss, mask_cross_entropy, mask_targets,
                            match_predictions, matched_segmentation_loss, pixel_contrastive_loss,
                            sample_pixels, segmentation_loss_terms)
from modules.panoptic import Prediction
from modules.tensor import DenseArray, finite_diff_check, log_softmax_axis


def brute_force_minimum(cost):
    n, k = cost.shape
    perms = np.array(list(itertools.permutations(range(n), k)))
    return cost[perms, np.arange(k)].sum(axis=1).min()


def test_hungarian_matches_brute_force(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 8))
        k = int(rng.integers(1, n + 1))
        cost = rng.integers(-20, 21, size=(n, k)).astype(float)
        matching = hungarian(cost)
        assert matching.total_cost == brute_force_minimum(cost)
        assert len({p for p, _ in matching.pairs}) == k
        assert sorted(t for _, t in matching.pairs) == list(range(k))


def test_hungarian_edge_cases():
    assert hungarian(np.zeros((3, 0))).pairs == ()
    with pytest.raises(ContractError):
        hungarian(np.zeros((2, 3)))


def square_target(size=8):
    masks = np.zeros((2, size, size), dtype=bool)
    masks[0, 2:6, 1:7] = True
    masks[1, 6:8, 6:8] = True
    return PanopticTarget(masks, [1, 2])


def test_target_rejects_overlap_and_empty_masks():
    masks = np.zeros((2, 4, 4), dtype=bool)
    masks[:, 0, 0] = True
    with pytest.raises(ContractError):
        PanopticTarget(masks, [1, 1])
    with pytest.raises(ContractError):
        PanopticTarget(np.zeros((1, 4, 4), dtype=bool), [1])


def test_id_map_and_panoptic_map():
    target = square_target()
    ids = target.id_map()
    assert ids[0, 0] == BACKGROUND and ids[3, 3] == 0 and ids[7, 7] == 1
    pan = target.to_panoptic_map()
    assert pan.segments == [(1, 1), (2, 2), (3, 0)]
    assert pan.segment_id[0, 0] == 3


def test_downsample_majority_with_background_ties():
    masks = np.zeros((1, 4, 4), dtype=bool)
    masks[0, :2, :2] = True          # full block
    masks[0, 2, 2] = masks[0, 2, 3] = True  # 2 of 4 pixels: tie goes to background
    small = PanopticTarget(masks, [3]).downsample(2)
    np.testing.assert_array_equal(small.masks[0], [[True, False], [False, False]])

    tiny = np.zeros((1, 4, 4), dtype=bool)
    tiny[0, 0, 0] = True
    assert PanopticTarget(tiny, [1]).downsample(2).K == 0


def test_dice_of_perfect_mask_is_one():
    target = square_target()
    Z = np.stack([target.masks[0].reshape(-1), ~target.masks[0].reshape(-1)], axis=1).astype(float)
    scores = dice_scores(Z, target.masks[:1])
    assert scores[0, 0] == pytest.approx(1.0, abs=1e-6)
    assert scores[1, 0] == pytest.approx(0.0)


def one_hot_prediction(target, num_queries):
    """Query k predicts mask k with its class; the last query covers background"""
    labels = mask_targets(Matching(tuple((k, k) for k in range(target.K)), 0.0), target, num_queries)
    Z = np.full((labels.size, num_queries), 1e-3)
    Z[np.arange(labels.size), labels] = 1.0
    Z /= Z.sum(axis=1, keepdims=True)
    probs = np.full((num_queries, 5), 0.01)
    for k, cls in enumerate(target.classes):
        probs[k, cls] = 0.96
    probs[num_queries - 1, 0] = 0.96
    probs[target.K:num_queries - 1, 4] = 0.96
    return Prediction.from_arrays(Z, probs, target.height, target.width)


def test_match_predictions_recovers_identity_and_reserves_background():
    target = square_target()
    pred = one_hot_prediction(target, 4)
    matching = match_predictions(pred, target)
    assert matching.pairs == ((0, 0), (1, 1))
    assert all(n != 3 for n, _ in matching.pairs)


def test_match_predictions_needs_a_spare_query():
    target = square_target()
    pred = Prediction.from_arrays(np.full((64, 2), 0.5), np.full((2, 5), 0.2), 8, 8)
    with pytest.raises(ContractError):
        match_predictions(pred, target)


def test_mask_approximation_loss_is_zero_on_matching_statistics():
    target = square_target()
    stats = []
    for k in range(target.K):
        rows, cols = np.nonzero(target.masks[k])
        h = (rows + 0.5) / 8
        w = (cols + 0.5) / 8
        stats.append(([h.min(), h.max(), h.mean()], [w.min(), w.max(), w.mean()]))
    # symmetric masks: the mean sits between the extremes, so three points match all statistics
    e = np.array([logit(np.array(h + w)) for h, w in stats])
    e = np.vstack([e, np.zeros((1, 6))])
    ref = ReferenceState.from_embedding(DenseArray(e), 3)
    matching = Matching(((0, 0), (1, 1)), 0.0)
    assert mask_approximation_loss(ref, matching, target).item() < 1e-12


def test_mask_approximation_loss_without_matches_is_zero():
    ref = ReferenceState.initial(2, 2)
    assert mask_approximation_loss(ref, Matching((), 0.0), square_target()).item() == 0.0


def test_mask_approximation_loss_value_for_centred_points():
    target = square_target()
    ref = ReferenceState.initial(3, 1)
    loss = mask_approximation_loss(ref, Matching(((0, 0),), 0.0), target).item()
    # mask 0: h in [2.5/8, 5.5/8], mean 0.5; w in [1.5/8, 6.5/8], mean 0.5
    extremes = (abs(0.5 - 2.5 / 8) + abs(0.5 - 5.5 / 8) + abs(0.5 - 1.5 / 8) + abs(0.5 - 6.5 / 8)) / 4
    assert loss == pytest.approx(extremes)


def test_sample_pixels_is_deterministic_sorted_and_unique():
    target = square_target()
    first = sample_pixels(target, 20, rng_seed=5)
    second = sample_pixels(target, 20, rng_seed=5)
    np.testing.assert_array_equal(first.indices, second.indices)
    assert np.all(np.diff(first.indices) > 0)
    np.testing.assert_array_equal(first.cluster_of, target.id_map().reshape(-1)[first.indices])
    with pytest.raises(ContractError):
        sample_pixels(target, 65, rng_seed=0)


def test_sample_pixels_weights_by_inverse_square_root_area():
    # 8 x 13 raster fully covered by a 4-pixel mask and a 100-pixel mask
    masks = np.zeros((2, 8, 13), dtype=bool)
    masks[0, :2, :2] = True
    masks[1] = ~masks[0]
    target = PanopticTarget(masks, [1, 2])
    draws = 10_000
    hits = sum(int(sample_pixels(target, 1, rng_seed=s).cluster_of[0] == 0) for s in range(draws))
    # per-pixel weights 4**-0.5 : 100**-0.5 = 5 : 1, so the small mask carries 2 / (2 + 10)
    expected = 4 * 4 ** -0.5 / (4 * 4 ** -0.5 + 100 * 100 ** -0.5)
    sigma = np.sqrt(expected * (1 - expected) / draws)
    assert abs(hits / draws - expected) < 3 * sigma


def test_contrastive_loss_zero_for_identical_positive_pair():
    features = DenseArray(np.array([[1.0, 2.0], [1.0, 2.0], [5.0, -1.0]]))
    sample = SampledPixelSet(indices=np.array([0, 1]), cluster_of=np.array([0, 0]))
    assert pixel_contrastive_loss(features, sample).item() == pytest.approx(0.0, abs=1e-12)


def test_contrastive_loss_skips_anchors_without_positives():
    features = DenseArray(np.eye(3))
    sample = SampledPixelSet(indices=np.array([0, 1, 2]), cluster_of=np.array([0, 1, 2]))
    assert pixel_contrastive_loss(features, sample).item() == 0.0
    with pytest.raises(ContractError):
        pixel_contrastive_loss(features, sample, tau=0.0)


def test_contrastive_loss_prefers_clustered_features(rng):
    sample = SampledPixelSet(indices=np.arange(4), cluster_of=np.array([0, 0, 1, 1]))
    clustered = DenseArray(np.array([[1.0, 0.0], [1.0, 0.1], [0.0, 1.0], [0.1, 1.0]]))
    mixed = DenseArray(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.1], [0.1, 1.0]]))
    assert pixel_contrastive_loss(clustered, sample).item() < pixel_contrastive_loss(mixed, sample).item()


def test_contrastive_loss_gradient(rng):
    sample = SampledPixelSet(indices=np.array([0, 2, 3, 5]), cluster_of=np.array([0, 0, 1, 1]))
    error = finite_diff_check(lambda f: pixel_contrastive_loss(f, sample), rng.standard_normal((6, 3)))
    assert error < 1e-6


def test_mask_cross_entropy_of_uniform_assignment_is_log_n():
    logits = DenseArray(np.zeros((16, 4)))
    labels = np.array([0, 1, 2, 3] * 4)
    value = mask_cross_entropy(log_softmax_axis(logits, axis=1), labels).item()
    assert value == pytest.approx(1.386294, abs=1e-6)


def test_segmentation_terms_and_aux_weighting():
    target = square_target()
    pred = one_hot_prediction(target, 4)
    matching = match_predictions(pred, target)
    aux = [DenseArray(np.zeros((64, 4)))]
    terms = segmentation_loss_terms(pred, matching, target, aux_logits=aux, aux_weight=0.5)
    assert set(terms) == {'mask', 'class', 'aux'}
    assert terms['aux'].item() == pytest.approx(0.5 * np.log(4))
    assert terms['mask'].item() < 0.01
    total = matched_segmentation_loss(pred, matching, target, aux, 0.5).item()
    assert total == pytest.approx(sum(t.item() for t in terms.values()))


def random_instance(rng, height=8, width=8):
    num_targets = int(rng.integers(1, 5))
    num_queries = num_targets + 2
    ids = rng.integers(BACKGROUND, num_targets, size=(height, width))
    ids.flat[:num_targets] = np.arange(num_targets)
    target = PanopticTarget.from_id_map(ids, rng.integers(1, 4, size=num_targets))
    logits = rng.standard_normal((height * width, num_queries))
    Z = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    class_logits = rng.standard_normal((num_queries, 5))
    probs = np.exp(class_logits) / np.exp(class_logits).sum(axis=1, keepdims=True)
    pred = Prediction.from_arrays(Z, probs, height, width)
    ref = ReferenceState.from_embedding(DenseArray(rng.standard_normal((num_queries, 4))), 2)
    return target, pred, ref


def test_losses_do_not_depend_on_target_order(rng):
    for trial in range(20):
        target, pred, ref = random_instance(rng)
        shuffled = target.permuted(rng.permutation(target.K))
        features = DenseArray(rng.standard_normal((64, 6)))

        matching = match_predictions(pred, target)
        shuffled_matching = match_predictions(pred, shuffled)
        assert shuffled_matching.total_cost == pytest.approx(matching.total_cost, abs=1e-12)
        assert [n for n, _ in shuffled_matching.pairs] == [n for n, _ in matching.pairs]

        assert mask_approximation_loss(ref, shuffled_matching, shuffled).item() == \
            pytest.approx(mask_approximation_loss(ref, matching, target).item(), abs=1e-12)

        sample = sample_pixels(target, 16, rng_seed=trial)
        shuffled_sample = sample_pixels(shuffled, 16, rng_seed=trial)
        np.testing.assert_array_equal(shuffled_sample.indices, sample.indices)
        assert pixel_contrastive_loss(features, shuffled_sample).item() == \
            pytest.approx(pixel_contrastive_loss(features, sample).item(), abs=1e-12)

        assert matched_segmentation_loss(pred, shuffled_matching, shuffled).item() == \
            pytest.approx(matched_segmentation_loss(pred, matching, target).item(), abs=1e-12)
