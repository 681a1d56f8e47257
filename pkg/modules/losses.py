"""
Training Losses
Hungarian target assignment, mask approximation, pixel-wise contrastive and
matched segmentation objectives
"""

import logging
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from config.config import DATA_CONFIG, LOSS_CONFIG
from .errors import ContractError, ShapeError
from .location import ReferenceState, normalized_coordinates
from .panoptic import PanopticMap, Prediction
from .tensor import (DenseArray, absolute, exp, expand, l2_normalize_rows, log,
                     log_softmax_axis, matmul, no_tape, reduce, reshape, scale,
                     sum_all, take, transpose)

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

BACKGROUND = -1


@dataclass
class PanopticTarget:
    """Ground-truth thing masks (K x H x W, pairwise disjoint) with class ids"""
    masks: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        self.validate()

    def validate(self) -> None:
        if self.masks.ndim != 3:
            raise ShapeError(f"Target masks must be K x H x W, got {self.masks.shape}")
        if len(self.classes) != self.masks.shape[0]:
            raise ShapeError(f"{self.masks.shape[0]} masks but {len(self.classes)} classes")
        if self.K and not self.masks.reshape(self.K, -1).any(axis=1).all():
            raise ContractError("Every target mask must be non-empty")
        if self.K and self.masks.sum(axis=0).max() > 1:
            raise ContractError("Target masks overlap")

    @classmethod
    def empty(cls, height: int, width: int) -> 'PanopticTarget':
        return cls(np.zeros((0, height, width), dtype=bool), np.zeros(0, dtype=np.int64))

    @classmethod
    def from_id_map(cls, id_map: np.ndarray, classes: Sequence[int]) -> 'PanopticTarget':
        """Masks from an H x W map of mask indices (-1 = background)"""
        classes = list(classes)
        masks = np.stack([id_map == k for k in range(len(classes))]) if classes else \
            np.zeros((0,) + id_map.shape, dtype=bool)
        return cls(masks, classes)

    @property
    def K(self) -> int:
        return self.masks.shape[0]

    @property
    def height(self) -> int:
        return self.masks.shape[1]

    @property
    def width(self) -> int:
        return self.masks.shape[2]

    def id_map(self) -> np.ndarray:
        """H x W map holding the mask index per pixel, -1 for background"""
        out = np.full((self.height, self.width), BACKGROUND, dtype=np.int64)
        for k in range(self.K):
            out[self.masks[k]] = k
        return out

    def areas(self) -> np.ndarray:
        return self.masks.reshape(self.K, -1).sum(axis=1)

    def downsample(self, stride: int) -> 'PanopticTarget':
        """
        Per-block majority label at a coarser stride

        Ties go to the lowest label (background first). Masks that vanish are dropped.
        """
        if self.height % stride or self.width % stride:
            raise ShapeError(f"{self.height}x{self.width} target not divisible by stride {stride}")
        hs, ws = self.height // stride, self.width // stride
        blocks = self.id_map().reshape(hs, stride, ws, stride).transpose(0, 2, 1, 3)
        blocks = blocks.reshape(hs, ws, stride * stride)
        labels = np.arange(BACKGROUND, self.K)
        votes = (blocks[..., None] == labels).sum(axis=2)
        coarse = labels[votes.argmax(axis=2)]
        kept = [k for k in range(self.K) if (coarse == k).any()]
        masks = np.stack([coarse == k for k in kept]) if kept else np.zeros((0, hs, ws), dtype=bool)
        return PanopticTarget(masks, self.classes[kept])

    def permuted(self, order: Sequence[int]) -> 'PanopticTarget':
        order = list(order)
        return PanopticTarget(self.masks[order], self.classes[order])

    def to_panoptic_map(self, background_class: int = DATA_CONFIG['background_class']) -> PanopticMap:
        """Thing masks become segments 1..K; remaining pixels one background segment"""
        raster = self.id_map() + 1
        segments = [(k + 1, int(self.classes[k])) for k in range(self.K)]
        background = raster == 0
        if background.any():
            raster[background] = self.K + 1
            segments.append((self.K + 1, background_class))
        return PanopticMap(raster, segments)


@dataclass(frozen=True)
class Matching:
    """Injective (prediction index, target index) pairs and their total cost"""
    pairs: Tuple[Tuple[int, int], ...]
    total_cost: float

    def prediction_of(self) -> Dict[int, int]:
        """target index -> prediction index"""
        return {k: n for n, k in self.pairs}


@dataclass(frozen=True)
class SampledPixelSet:
    """Unique sampled pixel indices and the target mask of each (-1 = background)"""
    indices: np.ndarray
    cluster_of: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def hungarian(cost) -> Matching:
    """
    Exact minimum-cost injective assignment of all K targets

    Args:
        cost: N x K cost matrix (DenseArray or numpy), N >= K

    Returns:
        Matching with K pairs sorted by prediction index
    """
    matrix = cost.data if isinstance(cost, DenseArray) else np.asarray(cost, dtype=np.float64)
    if matrix.ndim != 2:
        raise ShapeError(f"Cost matrix must be 2-D, got {matrix.shape}")
    num_pred, num_target = matrix.shape
    if num_pred < num_target:
        raise ContractError(f"Cannot match {num_target} targets with {num_pred} predictions")
    if num_target == 0:
        return Matching(pairs=(), total_cost=0.0)
    if not np.all(np.isfinite(matrix)):
        raise ContractError("Cost matrix must be finite")
    rows, cols = linear_sum_assignment(matrix)
    pairs = tuple((int(r), int(c)) for r, c in zip(rows, cols))
    return Matching(pairs=pairs, total_cost=float(matrix[rows, cols].sum()))


def dice_scores(Z: np.ndarray, masks: np.ndarray, eps: float = LOSS_CONFIG['dice_eps']) -> np.ndarray:
    """N x K soft Dice between mask columns of Z (HW x N) and flattened masks (K x HW)"""
    masks = masks.reshape(masks.shape[0], -1).astype(np.float64)
    inter = Z.T @ masks.T
    sizes = Z.sum(axis=0)[:, None] + masks.sum(axis=1)[None, :]
    return 2.0 * inter / (sizes + eps)


def matching_cost(pred: Prediction, target: PanopticTarget,
                  eps: float = LOSS_CONFIG['dice_eps']) -> DenseArray:
    """
    Matching cost between queries and targets

    Returns:
        N x K array with cost[n, k] = -p_n(c_k) - Dice(Z[:, n], m_k)
    """
    if (pred.height, pred.width) != (target.height, target.width):
        raise ShapeError(
            f"Prediction {pred.height}x{pred.width} vs target {target.height}x{target.width}")
    with no_tape():
        class_term = pred.class_probs.data[:, target.classes]
        cost = -class_term - dice_scores(pred.Z.data, target.masks, eps)
        return DenseArray(cost)


def match_predictions(pred: Prediction, target: PanopticTarget,
                      reserve_background: bool = True) -> Matching:
    """Hungarian matching that leaves the last (background) query out"""
    cost = matching_cost(pred, target).data
    if reserve_background:
        cost = cost[:-1]
    if cost.shape[0] < target.K:
        raise ContractError(
            f"{target.K} targets need at least {target.K + int(reserve_background)} queries, "
            f"got {pred.num_queries}")
    return hungarian(cost)


def mask_approximation_loss(ref: ReferenceState, matching: Matching,
                            target: PanopticTarget) -> DenseArray:
    """
    L1 distance between reference-point statistics and matched mask statistics

    Extremes (min/max per axis) average over 4K terms, centers (mean per axis)
    over 2K terms; unmatched centers contribute nothing.

    Returns:
        Scalar L_ext + L_cen (0 when nothing is matched)
    """
    if not matching.pairs:
        return DenseArray(0.0)
    queries = [n for n, _ in matching.pairs]
    stats = np.zeros((len(matching.pairs), 6))
    for i, (_, k) in enumerate(matching.pairs):
        hs, ws = normalized_coordinates(target.masks[k])
        stats[i] = (hs.min(), hs.max(), ws.min(), ws.max(), hs.mean(), ws.mean())

    h = take(ref.h(), queries, axis=0)
    w = take(ref.w(), queries, axis=0)
    predicted = [reduce(h, 'min', 1), reduce(h, 'max', 1), reduce(w, 'min', 1),
                 reduce(w, 'max', 1), reduce(h, 'mean', 1), reduce(w, 'mean', 1)]
    terms = [sum_all(absolute(p - DenseArray(stats[:, j]))) for j, p in enumerate(predicted)]
    count = len(matching.pairs)
    extremes = scale(terms[0] + terms[1] + terms[2] + terms[3], 1.0 / (4 * count))
    centers = scale(terms[4] + terms[5], 1.0 / (2 * count))
    return extremes + centers


def sample_pixels(target: PanopticTarget, count: int, rng_seed,
                  exponent: float = LOSS_CONFIG['size_exponent']) -> SampledPixelSet:
    """
    Size-biased sampling of pixels without replacement

    Args:
        target: Ground truth at the feature resolution
        count: Number of pixels |A|
        rng_seed: Seed (or seed sequence) for numpy's default generator
        exponent: Pixel weight is area ** -exponent of its mask (or background)

    Returns:
        SampledPixelSet with sorted indices
    """
    ids = target.id_map().reshape(-1)
    num_pixels = ids.size
    if count > num_pixels:
        raise ContractError(f"Cannot sample {count} pixels from {num_pixels}")
    labels, inverse, areas = np.unique(ids, return_inverse=True, return_counts=True)
    weights = areas[inverse].astype(np.float64) ** (-exponent)
    rng = np.random.default_rng(rng_seed)
    chosen = np.sort(rng.choice(num_pixels, size=count, replace=False, p=weights / weights.sum()))
    return SampledPixelSet(indices=chosen, cluster_of=ids[chosen])


def pixel_contrastive_loss(features: DenseArray, sample: SampledPixelSet,
                           tau: float = LOSS_CONFIG['temperature']) -> DenseArray:
    """
    Supervised contrastive loss over sampled pixels with multiple positives

    Positives of an anchor are the other sampled pixels of the same mask
    (background pixels form one group). The anchor itself is excluded from the
    denominator; anchors without positives are skipped.

    Returns:
        Scalar averaged over contributing anchors
    """
    if tau <= 0:
        raise ContractError(f"Temperature must be positive, got {tau}")
    count = len(sample)
    same = sample.cluster_of[:, None] == sample.cluster_of[None, :]
    others = ~np.eye(count, dtype=bool)
    positives = same & others
    num_positives = positives.sum(axis=1)
    contributing = num_positives > 0
    if not contributing.any():
        return DenseArray(0.0)

    f = l2_normalize_rows(take(features, sample.indices, axis=0))
    # shift by the largest possible similarity 1/tau so exp stays <= 1
    logits = scale(matmul(f, transpose(f)), 1.0 / tau) - 1.0 / tau
    denominator = reduce(exp(logits) * DenseArray(others.astype(np.float64)), 'sum', 1)
    log_denominator = expand(reshape(log(denominator), (count, 1)), 1, count)
    log_prob = logits - log_denominator

    weights = np.zeros((count, count))
    weights[contributing] = positives[contributing] / num_positives[contributing, None]
    total = sum_all(log_prob * DenseArray(weights))
    return scale(total, -1.0 / int(contributing.sum()))


def mask_targets(matching: Matching, target: PanopticTarget, num_queries: int) -> np.ndarray:
    """Query index per pixel: the matched query, or the reserved last query"""
    labels = np.full(target.height * target.width, num_queries - 1, dtype=np.int64)
    for n, k in matching.pairs:
        labels[target.masks[k].reshape(-1)] = n
    return labels


def mask_cross_entropy(log_probs: DenseArray, labels: np.ndarray) -> DenseArray:
    """Mean over pixels of -log Z[x, label(x)]"""
    one_hot = np.zeros(log_probs.shape)
    one_hot[np.arange(len(labels)), labels] = 1.0
    return scale(sum_all(log_probs * DenseArray(one_hot)), -1.0 / len(labels))


def class_targets(matching: Matching, target: PanopticTarget, num_queries: int,
                  void_class: int,
                  background_class: int = DATA_CONFIG['background_class']) -> np.ndarray:
    """Class per query: matched class, background for the reserved query, void otherwise"""
    labels = np.full(num_queries, void_class, dtype=np.int64)
    labels[num_queries - 1] = background_class
    for n, k in matching.pairs:
        labels[n] = target.classes[k]
    return labels


def segmentation_loss_terms(pred: Prediction, matching: Matching, target: PanopticTarget,
                            aux_logits: Sequence[DenseArray] = (),
                            aux_weight: float = LOSS_CONFIG['aux_weight']) -> Dict[str, DenseArray]:
    """
    Components of the matched segmentation loss

    Args:
        pred: Final prediction at the target's resolution
        matching: Matching computed on the final prediction
        target: Ground truth at the prediction's resolution
        aux_logits: Carried HW x N logits of the intermediate layers
        aux_weight: Weight of each intermediate mask cross-entropy

    Returns:
        Dict with 'mask', 'class' and 'aux' scalars
    """
    num_queries = pred.num_queries
    pixel_labels = mask_targets(matching, target, num_queries)
    query_labels = class_targets(matching, target, num_queries, pred.void_class)

    mask_term = mask_cross_entropy(pred.mask_log_probs(), pixel_labels)
    class_term = mask_cross_entropy(pred.class_log_probs(), query_labels)
    aux_term = DenseArray(0.0)
    for logits in aux_logits:
        layer_term = mask_cross_entropy(log_softmax_axis(logits, axis=1), pixel_labels)
        aux_term = aux_term + scale(layer_term, aux_weight)
    return {'mask': mask_term, 'class': class_term, 'aux': aux_term}


def matched_segmentation_loss(pred: Prediction, matching: Matching, target: PanopticTarget,
                              aux_logits: Sequence[DenseArray] = (),
                              aux_weight: float = LOSS_CONFIG['aux_weight']) -> DenseArray:
    """Mask cross-entropy + class cross-entropy + weighted intermediate mask cross-entropy"""
    terms = segmentation_loss_terms(pred, matching, target, aux_logits, aux_weight)
    return terms['mask'] + terms['class'] + terms['aux']
