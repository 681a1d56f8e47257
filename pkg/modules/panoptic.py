"""
Panoptic Post-processing and Evaluation
Turns soft mask predictions into panoptic maps and scores them with PQ/SQ/RQ
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix

from config.config import DATA_CONFIG, INFERENCE_CONFIG
from .errors import ContractError, ShapeError
from .tensor import DenseArray, log, log_softmax_axis

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

VOID_SEGMENT = 0


@dataclass(frozen=True)
class Prediction:
    """
    Soft panoptic prediction for one image

    Z holds HW x N mask probabilities (rows sum to 1); class_probs holds
    N x (num_classes + 1) distributions whose last column is the void class.
    The optional logits keep the loss path numerically stable.
    """
    Z: DenseArray
    class_probs: DenseArray
    height: int
    width: int
    mask_logits: Optional[DenseArray] = None
    class_logits: Optional[DenseArray] = None

    def __post_init__(self):
        if self.Z.shape[0] != self.height * self.width:
            raise ShapeError(f"Z has {self.Z.shape[0]} rows for a {self.height}x{self.width} raster")
        if self.class_probs.shape[0] != self.Z.shape[1]:
            raise ShapeError(
                f"{self.Z.shape[1]} mask columns but {self.class_probs.shape[0]} class rows")

    @classmethod
    def from_arrays(cls, Z, class_probs, height: int, width: int) -> 'Prediction':
        """Build and validate a prediction from plain probability arrays"""
        pred = cls(DenseArray(Z), DenseArray(class_probs), height, width)
        pred.validate()
        return pred

    def validate(self, tolerance: float = 1e-6) -> None:
        for name, probs in (('Z', self.Z.data), ('class_probs', self.class_probs.data)):
            if np.any(probs < 0) or np.max(np.abs(probs.sum(axis=1) - 1.0)) > tolerance:
                raise ContractError(f"Rows of {name} must be distributions")

    @property
    def num_queries(self) -> int:
        return self.Z.shape[1]

    @property
    def void_class(self) -> int:
        return self.class_probs.shape[1] - 1

    def mask_log_probs(self) -> DenseArray:
        if self.mask_logits is not None:
            return log_softmax_axis(self.mask_logits, axis=1)
        return log(self.Z)

    def class_log_probs(self) -> DenseArray:
        if self.class_logits is not None:
            return log_softmax_axis(self.class_logits, axis=1)
        return log(self.class_probs)


@dataclass
class PanopticMap:
    """Per-pixel segment ids (0 = void) plus (segment_id, class_id) pairs"""
    segment_id: np.ndarray
    segments: List[Tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.segment_id = np.asarray(self.segment_id, dtype=np.int64)
        self.segments = [(int(s), int(c)) for s, c in self.segments]
        self.validate()

    def validate(self) -> None:
        if self.segment_id.ndim != 2:
            raise ShapeError(f"Segment raster must be 2-D, got {self.segment_id.shape}")
        if np.any(self.segment_id < 0):
            raise ContractError("Segment ids must be non-negative")
        ids = [s for s, _ in self.segments]
        if len(set(ids)) != len(ids) or VOID_SEGMENT in ids:
            raise ContractError(f"Segment list has duplicate or void ids: {ids}")
        listed = set(ids)
        present = set(np.unique(self.segment_id).tolist()) - {VOID_SEGMENT}
        unlisted = present - listed
        if unlisted:
            raise ContractError(f"Raster ids {sorted(unlisted)} are missing from the segment list")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.segment_id.shape

    def class_of(self) -> Dict[int, int]:
        return dict(self.segments)

    def upsample(self, factor: int) -> 'PanopticMap':
        """Nearest-neighbour repetition of every pixel into a factor x factor block"""
        raster = np.repeat(np.repeat(self.segment_id, factor, axis=0), factor, axis=1)
        return PanopticMap(raster, list(self.segments))

    def class_raster(self, void_label: int = -1) -> np.ndarray:
        lookup = self.class_of()
        out = np.full(self.shape, void_label, dtype=np.int64)
        for segment, cls in lookup.items():
            out[self.segment_id == segment] = cls
        return out


def _assemble(owner: np.ndarray, survivors: Sequence[int], labels: Dict[int, int],
              height: int, width: int, thing_classes: Optional[Iterable[int]]) -> PanopticMap:
    """Number surviving queries 1.. in query order; stuff queries of one class share an id"""
    raster = np.zeros(height * width, dtype=np.int64)
    segments: List[Tuple[int, int]] = []
    stuff_ids: Dict[int, int] = {}
    things = None if thing_classes is None else set(thing_classes)
    next_id = 1
    for query in survivors:
        pixels = owner == query
        if not pixels.any():
            continue
        cls = labels[query]
        if things is not None and cls not in things:
            if cls in stuff_ids:
                raster[pixels] = stuff_ids[cls]
                continue
            stuff_ids[cls] = next_id
        raster[pixels] = next_id
        segments.append((next_id, cls))
        next_id += 1
    return PanopticMap(raster.reshape(height, width), segments)


def pixelwise_argmax(pred: Prediction, conf_threshold: float = INFERENCE_CONFIG['conf_threshold'],
                     thing_classes: Optional[Iterable[int]] = None) -> PanopticMap:
    """
    Per-pixel argmax over queries

    Args:
        pred: Soft prediction
        conf_threshold: Minimum class confidence for a query to produce a segment
        thing_classes: When given, queries of the same stuff class are merged

    Returns:
        PanopticMap; pixels owned by void or low-confidence queries are void
    """
    Z = pred.Z.data
    probs = pred.class_probs.data
    owner = Z.argmax(axis=1)
    classes = probs.argmax(axis=1)
    confidence = probs.max(axis=1)
    survivors = [q for q in range(pred.num_queries)
                 if classes[q] != pred.void_class and confidence[q] >= conf_threshold]
    labels = {q: int(classes[q]) for q in survivors}
    owner = np.where(np.isin(owner, survivors), owner, -1)
    return _assemble(owner, survivors, labels, pred.height, pred.width, thing_classes)


def maskwise_merge(pred: Prediction,
                   object_threshold: float = INFERENCE_CONFIG['object_threshold'],
                   overlap_threshold: float = INFERENCE_CONFIG['overlap_threshold'],
                   thing_classes: Optional[Iterable[int]] = None) -> PanopticMap:
    """
    Mask-wise merge of query masks

    1. Drop queries whose best non-void class probability is below object_threshold.
    2. Give each pixel to the surviving query maximizing confidence * Z.
    3. Drop segments whose won area over the query's own Z >= 0.5 area is below
       overlap_threshold; their pixels become void. A query with no Z >= 0.5
       pixels keeps whatever it won.

    Returns:
        PanopticMap
    """
    Z = pred.Z.data
    thing_probs = pred.class_probs.data[:, :pred.void_class]
    scores = thing_probs.max(axis=1)
    classes = thing_probs.argmax(axis=1)
    kept = [q for q in range(pred.num_queries) if scores[q] >= object_threshold]
    if not kept:
        return PanopticMap(np.zeros((pred.height, pred.width), dtype=np.int64), [])

    weighted = Z[:, kept] * scores[kept][None, :]
    owner = np.asarray(kept)[weighted.argmax(axis=1)]

    survivors = []
    for query in kept:
        won = int((owner == query).sum())
        if won == 0:
            continue
        original = int((Z[:, query] >= 0.5).sum())
        if original > 0 and won / original < overlap_threshold:
            owner[owner == query] = -1
            continue
        survivors.append(query)
    labels = {q: int(classes[q]) for q in survivors}
    return _assemble(owner, survivors, labels, pred.height, pred.width, thing_classes)


class PanopticQualityAccumulator:
    """Per-class TP/FP/FN/IoU counters accumulated over images"""

    def __init__(self, num_classes: int, thing_classes: Iterable[int],
                 class_names: Optional[Sequence[str]] = None):
        self.num_classes = num_classes
        self.thing_classes = set(thing_classes)
        self.class_names = list(class_names) if class_names else [str(c) for c in range(num_classes)]
        self.iou_sum = np.zeros(num_classes)
        self.tp = np.zeros(num_classes, dtype=np.int64)
        self.fp = np.zeros(num_classes, dtype=np.int64)
        self.fn = np.zeros(num_classes, dtype=np.int64)
        self.images = 0

    def add(self, pred_map: PanopticMap, gt_map: PanopticMap) -> None:
        """Match segments of one image and update the counters"""
        if pred_map.shape != gt_map.shape:
            raise ShapeError(f"Prediction raster {pred_map.shape} vs ground truth {gt_map.shape}")
        gt_flat = gt_map.segment_id.reshape(-1)
        # offset predicted ids so both id spaces share one label axis
        offset = int(gt_flat.max()) + 1
        pred_flat = pred_map.segment_id.reshape(-1) + offset
        pred_flat[pred_map.segment_id.reshape(-1) == VOID_SEGMENT] = VOID_SEGMENT
        labels = np.union1d(np.unique(gt_flat), np.unique(pred_flat))
        counts = confusion_matrix(gt_flat, pred_flat, labels=labels)
        index = {int(label): i for i, label in enumerate(labels)}

        def overlap(gt_id: int, pred_id: int) -> int:
            return int(counts[index[gt_id], index[pred_id]])

        gt_area = {s: int((gt_flat == s).sum()) for s, _ in gt_map.segments}
        pred_area = {s + offset: int((pred_flat == s + offset).sum()) for s, _ in pred_map.segments}
        gt_class = gt_map.class_of()
        pred_class = {s + offset: c for s, c in pred_map.segments}

        matched_gt, matched_pred = set(), set()
        for g, g_cls in gt_class.items():
            if gt_area[g] == 0:
                continue
            for p, p_cls in pred_class.items():
                if p_cls != g_cls or p in matched_pred or pred_area[p] == 0:
                    continue
                inter = overlap(g, p)
                if inter == 0:
                    continue
                void_part = overlap(VOID_SEGMENT, p) if VOID_SEGMENT in index else 0
                union = gt_area[g] + pred_area[p] - inter - void_part
                iou = inter / union
                if iou > 0.5:
                    matched_gt.add(g)
                    matched_pred.add(p)
                    self.tp[g_cls] += 1
                    self.iou_sum[g_cls] += iou
                    break

        for g, g_cls in gt_class.items():
            if g not in matched_gt and gt_area[g] > 0:
                self.fn[g_cls] += 1
        for p, p_cls in pred_class.items():
            if p in matched_pred or pred_area[p] == 0:
                continue
            void_part = overlap(VOID_SEGMENT, p) if VOID_SEGMENT in index else 0
            if void_part / pred_area[p] > 0.5:
                continue
            self.fp[p_cls] += 1
        self.images += 1

    def _present(self) -> np.ndarray:
        return (self.tp + self.fp + self.fn) > 0

    def class_metrics(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-class (PQ, SQ, RQ); PQ = SQ * RQ exactly"""
        sq = np.divide(self.iou_sum, self.tp, out=np.zeros(self.num_classes), where=self.tp > 0)
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        rq = np.divide(self.tp, denom, out=np.zeros(self.num_classes), where=denom > 0)
        return sq * rq, sq, rq

    def summary(self) -> Dict[str, float]:
        """Class-averaged PQ, SQ, RQ, PQ_th, PQ_st over classes seen in GT or predictions"""
        pq, sq, rq = self.class_metrics()
        present = self._present()
        things = np.array([c in self.thing_classes for c in range(self.num_classes)])

        def average(values: np.ndarray, selector: np.ndarray) -> float:
            chosen = values[selector]
            return float(chosen.mean()) if chosen.size else 0.0

        return {
            'PQ': average(pq, present),
            'SQ': average(sq, present),
            'RQ': average(rq, present),
            'PQ_th': average(pq, present & things),
            'PQ_st': average(pq, present & ~things)
        }

    def per_class(self) -> pd.DataFrame:
        pq, sq, rq = self.class_metrics()
        rows = []
        for c in np.flatnonzero(self._present()):
            rows.append({
                'class': self.class_names[c],
                'kind': 'thing' if c in self.thing_classes else 'stuff',
                'PQ': pq[c], 'SQ': sq[c], 'RQ': rq[c],
                'TP': int(self.tp[c]), 'FP': int(self.fp[c]), 'FN': int(self.fn[c])
            })
        return pd.DataFrame(rows, columns=['class', 'kind', 'PQ', 'SQ', 'RQ', 'TP', 'FP', 'FN'])


def panoptic_quality(pred_map: PanopticMap, gt_map: PanopticMap,
                     thing_classes: Iterable[int] = DATA_CONFIG['thing_classes'],
                     num_classes: Optional[int] = None) -> Tuple[float, float, float, float, float]:
    """
    PQ of a single image

    Returns:
        (PQ, SQ, RQ, PQ_thing, PQ_stuff)
    """
    if num_classes is None:
        ids = [c for _, c in pred_map.segments] + [c for _, c in gt_map.segments]
        num_classes = max(ids + [len(DATA_CONFIG['class_names']) - 1]) + 1
    accumulator = PanopticQualityAccumulator(num_classes, thing_classes)
    accumulator.add(pred_map, gt_map)
    result = accumulator.summary()
    return result['PQ'], result['SQ'], result['RQ'], result['PQ_th'], result['PQ_st']
