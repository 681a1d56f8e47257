"""
Location-Sensitive Clustering
Reference-mask prediction and coordinate injection for pixels and centers
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np

from .errors import ShapeError
from .parameters import MLP, Linear
from .tensor import DenseArray, concat, no_tape, sigmoid, slice_axis

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReferenceState:
    """
    Per-center reference points

    e is the pre-sigmoid N x 2M embedding carried across decoder stages;
    r_c = sigmoid(e). Columns [0, M) hold h-coordinates, [M, 2M) w-coordinates.
    """
    e: DenseArray
    r_c: DenseArray
    num_points: int

    @classmethod
    def from_embedding(cls, e: DenseArray, num_points: int) -> 'ReferenceState':
        if e.ndim != 2 or e.shape[1] != 2 * num_points:
            raise ShapeError(f"Reference embedding must be N x {2 * num_points}, got {e.shape}")
        return cls(e=e, r_c=sigmoid(e), num_points=num_points)

    @classmethod
    def initial(cls, num_centers: int, num_points: int) -> 'ReferenceState':
        """All-zero embedding, i.e. every point at (0.5, 0.5)"""
        return cls.from_embedding(DenseArray(np.zeros((num_centers, 2 * num_points))), num_points)

    @property
    def num_centers(self) -> int:
        return self.e.shape[0]

    def h(self) -> DenseArray:
        return slice_axis(self.r_c, 0, self.num_points, 1)

    def w(self) -> DenseArray:
        return slice_axis(self.r_c, self.num_points, 2 * self.num_points, 1)


@lru_cache(maxsize=32)
def _grid_values(height: int, width: int) -> np.ndarray:
    rows = (np.arange(height) + 0.5) / height
    cols = (np.arange(width) + 0.5) / width
    grid = np.stack(np.meshgrid(rows, cols, indexing='ij'), axis=-1).reshape(height * width, 2)
    grid.setflags(write=False)
    return grid


@dataclass(frozen=True)
class PixelCoordGrid:
    """Fixed HW x 2 pixel-center coordinates ((i + 0.5) / H, (j + 0.5) / W)"""
    height: int
    width: int
    r_p: DenseArray

    @classmethod
    def for_shape(cls, height: int, width: int) -> 'PixelCoordGrid':
        with no_tape():
            return cls(height, width, DenseArray(_grid_values(height, width)))

    @property
    def num_pixels(self) -> int:
        return self.height * self.width


def normalized_coordinates(mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel-center coordinates of the pixels set in a boolean H x W mask"""
    height, width = mask.shape
    rows, cols = np.nonzero(mask)
    return (rows + 0.5) / height, (cols + 0.5) / width


def update_reference_masks(state: ReferenceState, centers: DenseArray, mlp: MLP) -> ReferenceState:
    """
    Residually refine the reference embedding from the current centers

    Args:
        state: Reference state from the previous stage
        centers: N x D cluster centers
        mlp: D -> D -> 2M head

    Returns:
        New state with e' = e + MLP(C) and r_c' = sigmoid(e')
    """
    if centers.shape[0] != state.num_centers:
        raise ShapeError(
            f"update_reference_masks: {centers.shape[0]} centers vs embedding {state.e.shape}")
    delta = mlp(centers)
    if delta.shape != state.e.shape:
        raise ShapeError(f"Reference MLP output {delta.shape} does not match {state.e.shape}")
    return ReferenceState.from_embedding(state.e + delta, state.num_points)


def inject_coordinates(F: DenseArray, C: DenseArray, grid: PixelCoordGrid, ref: ReferenceState,
                       conv_f: Linear, conv_c: Linear) -> Tuple[DenseArray, DenseArray]:
    """
    Coordinate convolution on pixels and centers

    Args:
        F: HW x D pixel features
        C: N x D centers
        grid: Pixel coordinates for the feature resolution
        ref: Current reference state (N x 2M points)
        conv_f: (D + 2) -> D affine map
        conv_c: (D + 2M) -> D affine map

    Returns:
        (F', C') = (conv_f([F | r_p]), conv_c([C | r_c]))
    """
    if F.shape[0] != grid.num_pixels:
        raise ShapeError(f"inject_coordinates: {F.shape[0]} pixels vs grid {grid.height}x{grid.width}")
    F_new = conv_f(concat(F, grid.r_p, axis=1))
    C_new = conv_c(concat(C, ref.r_c, axis=1))
    return F_new, C_new
