"""Tests for panoptic post-processing and the PQ evaluator"""

import numpy as np
import pytest

from modules.errors import ContractError, ShapeError
from modules.losses import PanopticTarget
from modules.panoptic import (PanopticMap, PanopticQualityAccumulator, Prediction,
                              maskwise_merge, panoptic_quality, pixelwise_argmax)

THINGS = (1, 2, 3)


def probs_row(cls, confidence, width=5):
    row = np.full(width, (1.0 - confidence) / (width - 1))
    row[cls] = confidence
    return row


def test_single_query_covering_image_gives_one_segment():
    Z = np.zeros((4, 2))
    Z[:, 0] = 1.0
    probs = np.stack([probs_row(2, 0.9), probs_row(4, 1.0)])
    pred = Prediction.from_arrays(Z, probs, 2, 2)
    result = pixelwise_argmax(pred, 0.7)
    assert result.segments == [(1, 2)]
    np.testing.assert_array_equal(result.segment_id, np.ones((2, 2)))
    merged = maskwise_merge(pred, 0.7, 0.5)
    np.testing.assert_array_equal(merged.segment_id, result.segment_id)
    assert merged.segments == result.segments


def test_all_void_queries_give_empty_map():
    Z = np.full((4, 2), 0.5)
    probs = np.stack([probs_row(4, 0.9), probs_row(4, 0.9)])
    result = pixelwise_argmax(Prediction.from_arrays(Z, probs, 2, 2))
    assert result.segments == []
    assert not result.segment_id.any()


def test_two_queries_split_the_image_per_pixel():
    Z = np.array([[0.8, 0.2], [0.3, 0.7], [0.6, 0.4], [0.1, 0.9]])
    probs = np.stack([probs_row(1, 0.9), probs_row(3, 0.8)])
    result = pixelwise_argmax(Prediction.from_arrays(Z, probs, 2, 2), 0.7)
    np.testing.assert_array_equal(result.segment_id, [[1, 2], [1, 2]])
    assert result.segments == [(1, 1), (2, 3)]


def test_low_confidence_query_maps_to_void():
    Z = np.array([[0.8, 0.2], [0.3, 0.7]])
    probs = np.stack([probs_row(1, 0.9), probs_row(3, 0.5)])
    pred = Prediction.from_arrays(Z, probs, 1, 2)
    result = pixelwise_argmax(pred, 0.7)
    np.testing.assert_array_equal(result.segment_id, [[1, 0]])
    merged = maskwise_merge(pred, 0.7, 0.5)
    assert [c for _, c in merged.segments] == [1]


def test_maskwise_merge_absorbs_weak_overlapping_query():
    # q0: class 1 @ 0.95; q1: class 2 @ 0.7 with Z >= 0.5 on all four pixels
    Z = np.array([[0.5, 0.5], [0.5, 0.5], [0.5, 0.5], [0.4, 0.6]])
    probs = np.stack([[0.01, 0.95, 0.02, 0.01, 0.01], [0.1, 0.1, 0.7, 0.05, 0.05]])
    pred = Prediction.from_arrays(Z, probs, 1, 4)
    # step 2: q0 scores 0.475 on pixels 0-2 against 0.35; q1 wins pixel 3 (0.42 > 0.38)
    # step 3: q1 keeps 1 of its 4 pixels (0.25 < 0.5) and is dropped
    result = maskwise_merge(pred, object_threshold=0.7, overlap_threshold=0.5)
    np.testing.assert_array_equal(result.segment_id, [[1, 1, 1, 0]])
    assert result.segments == [(1, 1)]


def test_maskwise_merge_without_thresholds_is_weighted_argmax(rng):
    Z = rng.dirichlet(np.ones(3), size=12)
    probs = np.stack([probs_row(1, 0.9), probs_row(2, 0.6), probs_row(3, 0.8)])
    pred = Prediction.from_arrays(Z, probs, 3, 4)
    merged = maskwise_merge(pred, 0.0, 0.0)
    expected_owner = (Z * probs[:, :4].max(axis=1)).argmax(axis=1)
    class_raster = merged.class_raster().reshape(-1)
    np.testing.assert_array_equal(class_raster, probs[:, :4].argmax(axis=1)[expected_owner])


def test_stuff_queries_merge_into_one_segment():
    Z = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
    probs = np.stack([probs_row(0, 0.9), probs_row(0, 0.9), probs_row(2, 0.9)])
    pred = Prediction.from_arrays(Z, probs, 2, 2)
    merged = pixelwise_argmax(pred, 0.7, thing_classes=THINGS)
    assert merged.segments == [(1, 0), (2, 2)]
    np.testing.assert_array_equal(merged.segment_id, [[1, 1], [2, 2]])
    assert len(pixelwise_argmax(pred, 0.7).segments) == 3


def test_prediction_validation():
    with pytest.raises(ContractError):
        Prediction.from_arrays(np.full((4, 2), 0.7), np.full((2, 5), 0.2), 2, 2)
    with pytest.raises(ShapeError):
        Prediction.from_arrays(np.full((3, 2), 0.5), np.full((2, 5), 0.2), 2, 2)


def test_panoptic_map_rejects_unlisted_ids():
    with pytest.raises(ContractError):
        PanopticMap(np.array([[1, 2]]), [(1, 1)])
    with pytest.raises(ContractError):
        PanopticMap(np.array([[1, 1]]), [(1, 1), (1, 2)])


def test_upsample_repeats_blocks():
    small = PanopticMap(np.array([[1, 2]]), [(1, 1), (2, 0)])
    big = small.upsample(2)
    np.testing.assert_array_equal(big.segment_id, [[1, 1, 2, 2], [1, 1, 2, 2]])
    assert big.segments == small.segments


def test_perfect_prediction_scores_one():
    masks = np.zeros((2, 8, 8), dtype=bool)
    masks[0, 1:4, 1:4] = True
    masks[1, 5:8, 2:7] = True
    gt = PanopticTarget(masks, [1, 3]).to_panoptic_map()
    pq, sq, rq, pq_th, pq_st = panoptic_quality(gt, gt, THINGS)
    assert (pq, sq, rq, pq_th, pq_st) == (1.0, 1.0, 1.0, 1.0, 1.0)


def test_iou_point_six_gives_pq_point_six():
    gt = PanopticMap(np.ones((1, 10), dtype=np.int64), [(1, 1)])
    raster = np.zeros((1, 10), dtype=np.int64)
    raster[0, :6] = 1
    pred = PanopticMap(raster, [(1, 1)])
    pq, sq, rq, pq_th, pq_st = panoptic_quality(pred, gt, THINGS)
    assert pq == 0.6 and sq == 0.6 and rq == 1.0
    assert pq_th == 0.6 and pq_st == 0.0


def test_iou_point_four_is_not_a_match():
    gt = PanopticMap(np.ones((1, 10), dtype=np.int64), [(1, 1)])
    raster = np.zeros((1, 10), dtype=np.int64)
    raster[0, :4] = 1
    accumulator = PanopticQualityAccumulator(4, THINGS)
    accumulator.add(PanopticMap(raster, [(1, 1)]), gt)
    assert accumulator.tp[1] == 0 and accumulator.fp[1] == 1 and accumulator.fn[1] == 1
    assert accumulator.summary()['PQ'] == 0.0


def test_class_mismatch_is_never_matched():
    gt = PanopticMap(np.ones((2, 2), dtype=np.int64), [(1, 1)])
    pred = PanopticMap(np.ones((2, 2), dtype=np.int64), [(1, 2)])
    assert panoptic_quality(pred, gt, THINGS)[0] == 0.0


def test_void_ground_truth_is_excluded_from_union_and_false_positives():
    gt_raster = np.array([[1, 1, 0, 0]])
    gt = PanopticMap(gt_raster, [(1, 1)])
    # prediction covers the GT segment and both void pixels: IoU = 2 / (2 + 4 - 2 - 2) = 1
    pred = PanopticMap(np.array([[1, 1, 1, 1]]), [(1, 1)])
    assert panoptic_quality(pred, gt, THINGS)[:3] == (1.0, 1.0, 1.0)

    # a second predicted segment lying mostly on void is not a false positive
    accumulator = PanopticQualityAccumulator(4, THINGS)
    accumulator.add(PanopticMap(np.array([[1, 1, 2, 2]]), [(1, 1), (2, 3)]), gt)
    assert accumulator.fp.sum() == 0


def test_accumulator_summary_and_per_class_table():
    accumulator = PanopticQualityAccumulator(4, THINGS, ['background', 'rectangle', 'circle', 'triangle'])
    gt = PanopticMap(np.array([[1, 1, 2, 2]]), [(1, 1), (2, 0)])
    accumulator.add(gt, gt)
    accumulator.add(PanopticMap(np.array([[1, 1, 1, 1]]), [(1, 2)]), gt)
    table = accumulator.per_class()
    assert list(table['class']) == ['background', 'rectangle', 'circle']
    assert list(table['kind']) == ['stuff', 'thing', 'thing']
    row = table.set_index('class').loc['rectangle']
    assert (row['TP'], row['FP'], row['FN']) == (1, 0, 1)
    np.testing.assert_allclose(table['PQ'], table['SQ'] * table['RQ'])
    summary = accumulator.summary()
    assert summary['PQ_st'] == pytest.approx(2 / 3)
    assert accumulator.images == 2


def test_accumulator_rejects_mismatched_rasters():
    accumulator = PanopticQualityAccumulator(4, THINGS)
    with pytest.raises(ShapeError):
        accumulator.add(PanopticMap(np.ones((1, 2)), [(1, 1)]), PanopticMap(np.ones((2, 1)), [(1, 1)]))
