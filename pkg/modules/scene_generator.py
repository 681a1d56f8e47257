"""
Synthetic Scene Generator
Seeded panoptic scenes of non-overlapping rectangles, circles and triangles on a
single background class
"""

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from config.config import DATA_CONFIG
from .errors import ContractError, GenerationError
from .losses import PanopticTarget

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

CLASS_IDS = {name: i for i, name in enumerate(DATA_CONFIG['class_names'])}
BASE_COLORS = {
    'background': (0.45, 0.45, 0.45),
    'rectangle': (0.85, 0.25, 0.20),
    'circle': (0.20, 0.75, 0.30),
    'triangle': (0.25, 0.30, 0.90)
}
MAX_SHAPES_LIMIT = 8


class SplitMix64:
    """64-bit splitmix generator; every output is a pure function of the seed"""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    @staticmethod
    def mix(z: int) -> int:
        z = ((z ^ (z >> 30)) * MIX1) & MASK64
        z = ((z ^ (z >> 27)) * MIX2) & MASK64
        return z ^ (z >> 31)

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return self.mix(self.state)

    def randint(self, low: int, high: int) -> int:
        """Integer in [low, high] by modulo reduction"""
        if high < low:
            raise ContractError(f"Empty integer range [{low}, {high}]")
        return low + self.next_u64() % (high - low + 1)

    def uniform(self) -> float:
        """Double in [0, 1) from the top 53 bits"""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform_array(self, count: int) -> np.ndarray:
        """`count` consecutive uniform() draws, vectorized"""
        steps = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over='ignore'):
            z = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + count * GOLDEN_GAMMA) & MASK64
        return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


@dataclass(frozen=True)
class SceneConfig:
    """Scene size and content settings"""
    height: int = DATA_CONFIG['height']
    width: int = DATA_CONFIG['width']
    max_shapes: int = DATA_CONFIG['max_shapes']
    shape_kinds: Tuple[str, ...] = DATA_CONFIG['shape_kinds']
    noise: float = DATA_CONFIG['noise']
    attempts: int = DATA_CONFIG['attempts']

    def validate(self) -> None:
        minimum = DATA_CONFIG['min_extent']
        if self.height < minimum or self.width < minimum:
            raise ContractError(
                f"Scene size {self.height}x{self.width} is below the minimum {minimum}x{minimum}")
        if not 1 <= self.max_shapes <= MAX_SHAPES_LIMIT:
            raise ContractError(f"max_shapes must be in [1, {MAX_SHAPES_LIMIT}], got {self.max_shapes}")
        unknown = [k for k in self.shape_kinds if k not in BASE_COLORS or k == 'background']
        if not self.shape_kinds or unknown:
            raise ContractError(f"Unknown shape kinds: {unknown or 'none given'}")

    def size_range(self) -> Tuple[int, int]:
        """Smallest and largest shape extent in pixels"""
        short = min(self.height, self.width)
        low = max(4, short // 8)
        return low, max(low + 2, short // 3)


@dataclass
class Sample:
    """RGB image in [0, 1] (H x W x 3, float32) and its panoptic target"""
    image: np.ndarray
    target: PanopticTarget = field(repr=False)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ContractError(f"Sample image must be H x W x 3, got {self.image.shape}")
        if self.image.shape[:2] != (self.target.height, self.target.width):
            raise ContractError(
                f"Image {self.image.shape[:2]} and target {self.target.height}x{self.target.width} differ")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def _draw_shape(kind: str, rng: SplitMix64, config: SceneConfig) -> np.ndarray:
    """Rasterize one randomly placed shape with integer geometry"""
    height, width = config.height, config.width
    low, high = config.size_range()
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]

    if kind == 'rectangle':
        h, w = rng.randint(low, high), rng.randint(low, high)
        top, left = rng.randint(0, height - h), rng.randint(0, width - w)
        return (rows >= top) & (rows < top + h) & (cols >= left) & (cols < left + w)

    if kind == 'circle':
        radius = rng.randint(max(2, low // 2), max(2, high // 2))
        cy = rng.randint(radius, height - 1 - radius)
        cx = rng.randint(radius, width - 1 - radius)
        return (rows - cy) ** 2 + (cols - cx) ** 2 <= radius * radius

    size = rng.randint(low, high)
    top, left = rng.randint(0, height - size), rng.randint(0, width - size)
    # apex on top; doubled column coordinates keep the test integral
    dy = rows - top
    inside_rows = (dy >= 0) & (dy < size)
    return inside_rows & (np.abs(2 * (cols - left) - (size - 1)) <= dy)


def generate_scene(rng_seed: int, config: SceneConfig = SceneConfig()) -> Sample:
    """
    Generate one synthetic panoptic scene

    Args:
        rng_seed: Seed of the SplitMix64 stream
        config: Scene settings

    Returns:
        Sample whose things never overlap; background covers the rest
    """
    config.validate()
    rng = SplitMix64(rng_seed)
    wanted = 1 + rng.randint(0, config.max_shapes - 1)
    occupied = np.zeros((config.height, config.width), dtype=bool)
    masks: List[np.ndarray] = []
    kinds: List[str] = []

    for _ in range(wanted):
        kind = config.shape_kinds[rng.randint(0, len(config.shape_kinds) - 1)]
        for _ in range(config.attempts):
            mask = _draw_shape(kind, rng, config)
            if mask.any() and not (mask & occupied).any():
                masks.append(mask)
                kinds.append(kind)
                occupied |= mask
                break

    if not masks:
        raise GenerationError(
            f"Could not place any shape in a {config.height}x{config.width} scene "
            f"after {config.attempts} attempts")

    image = np.empty((config.height, config.width, 3))
    image[:] = BASE_COLORS['background']
    for mask, kind in zip(masks, kinds):
        image[mask] = BASE_COLORS[kind]
    noise = rng.uniform_array(image.size).reshape(image.shape)
    image = np.clip(image + (2.0 * noise - 1.0) * config.noise, 0.0, 1.0)

    target = PanopticTarget(np.stack(masks), [CLASS_IDS[k] for k in kinds])
    return Sample(image=image.astype(np.float32), target=target)


def generate_dataset(count: int, seed: int, config: SceneConfig = SceneConfig()) -> List[Sample]:
    """Samples for seeds seed, seed + 1, ..., seed + count - 1"""
    samples = [generate_scene(seed + i, config) for i in range(count)]
    logger.info(f"Generated {count} scenes of size {config.height}x{config.width}")
    return samples


def class_histogram(samples: Sequence[Sample],
                    class_names: Sequence[str] = DATA_CONFIG['class_names']) -> dict:
    """Number of thing masks per class name over a list of samples"""
    counts = Counter(class_names[int(cls)] for sample in samples for cls in sample.target.classes)
    return {name: counts[name] for name in class_names if name != 'background'}
