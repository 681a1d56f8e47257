"""
Dataset File Format
Little-endian CMTD container for samples and the shared mask-section codec
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

from config.config import DATA_CONFIG
from .errors import CMTError, FormatError
from .losses import PanopticTarget
from .panoptic import PanopticMap
from .scene_generator import Sample

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

MAGIC = b'CMTD'
VERSION = 1
HEADER = struct.Struct('<4sIIHH')
U32 = struct.Struct('<I')


@dataclass(frozen=True)
class DatasetHeader:
    """Fixed 16-byte header"""
    sample_count: int
    class_count: int = len(DATA_CONFIG['class_names'])
    thing_class_mask: int = sum(1 << c for c in DATA_CONFIG['thing_classes'])
    magic: bytes = MAGIC
    version: int = VERSION

    @property
    def thing_classes(self) -> Tuple[int, ...]:
        return tuple(c for c in range(self.class_count) if self.thing_class_mask >> c & 1)

    def pack(self) -> bytes:
        return HEADER.pack(self.magic, self.version, self.sample_count,
                           self.class_count, self.thing_class_mask)


@dataclass
class SceneDataset:
    """Decoded dataset: header plus samples"""
    header: DatasetHeader
    samples: List[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, index: int) -> Sample:
        return self.samples[index]


class ByteReader:
    """Sequential reader that reports the byte offset of every failure"""

    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.offset = offset

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError(f"Truncated file while reading {what}", self.offset)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self, what: str) -> int:
        return U32.unpack(self.take(4, what))[0]

    def at_end(self) -> bool:
        return self.offset == len(self.data)


def encode_mask_section(masks: np.ndarray, classes: Sequence[int]) -> bytes:
    """u32 K, then per mask: u32 class id + H*W u8 mask bytes"""
    parts = [U32.pack(len(classes))]
    for mask, cls in zip(masks, classes):
        parts.append(U32.pack(int(cls)))
        parts.append(np.asarray(mask, dtype=np.uint8).tobytes())
    return b''.join(parts)


def decode_mask_section(reader: ByteReader, height: int,
                        width: int) -> Tuple[np.ndarray, List[int]]:
    count = reader.u32('mask count')
    masks = np.zeros((count, height, width), dtype=bool)
    classes = []
    for k in range(count):
        classes.append(reader.u32(f"class id of mask {k}"))
        start = reader.offset
        raw = np.frombuffer(reader.take(height * width, f"mask {k}"), dtype=np.uint8)
        if raw.max(initial=0) > 1:
            raise FormatError(f"Mask {k} holds bytes other than 0/1", start)
        masks[k] = raw.reshape(height, width).astype(bool)
    return masks, classes


def encode_panoptic_map(panoptic_map: PanopticMap) -> bytes:
    """Mask section with one mask per listed segment, in list order"""
    masks = [panoptic_map.segment_id == sid for sid, _ in panoptic_map.segments]
    return encode_mask_section(masks, [cls for _, cls in panoptic_map.segments])


def decode_panoptic_map(data: bytes, height: int, width: int) -> PanopticMap:
    """Inverse of encode_panoptic_map; segments are renumbered 1..K in order"""
    reader = ByteReader(data)
    masks, classes = decode_mask_section(reader, height, width)
    if not reader.at_end():
        raise FormatError("Trailing bytes after mask section", reader.offset)
    if len(masks) and masks.sum(axis=0).max() > 1:
        raise FormatError("Panoptic segments overlap", 0)
    raster = np.zeros((height, width), dtype=np.int64)
    for k, mask in enumerate(masks):
        raster[mask] = k + 1
    return PanopticMap(raster, [(k + 1, cls) for k, cls in enumerate(classes)])


def encode_sample(sample: Sample) -> bytes:
    height, width = sample.height, sample.width
    parts = [U32.pack(height), U32.pack(width),
             np.ascontiguousarray(sample.image, dtype='<f4').tobytes(),
             encode_mask_section(sample.target.masks, sample.target.classes)]
    return b''.join(parts)


def decode_sample(reader: ByteReader, index: int) -> Sample:
    start = reader.offset
    height = reader.u32(f"height of sample {index}")
    width = reader.u32(f"width of sample {index}")
    if height == 0 or width == 0:
        raise FormatError(f"Sample {index} has an empty raster", start)
    pixels = reader.take(height * width * 12, f"image of sample {index}")
    image = np.frombuffer(pixels, dtype='<f4').reshape(height, width, 3).astype(np.float32)
    masks, classes = decode_mask_section(reader, height, width)
    try:
        return Sample(image=image, target=PanopticTarget(masks, classes))
    except CMTError as e:
        raise FormatError(f"Sample {index} is invalid: {e}", start) from e


def write_dataset(path: Union[str, Path], samples: Iterable[Sample],
                  header: DatasetHeader = None) -> Path:
    """
    Write samples to a CMTD file

    Args:
        path: Output file
        samples: Samples to store
        header: Class metadata (defaults from DATA_CONFIG)

    Returns:
        Path written
    """
    samples = list(samples)
    header = header or DatasetHeader(sample_count=len(samples))
    if header.sample_count != len(samples):
        header = DatasetHeader(len(samples), header.class_count, header.thing_class_mask)
    path = Path(path)
    with open(path, 'wb') as f:
        f.write(header.pack())
        for sample in samples:
            f.write(encode_sample(sample))
    logger.info(f"Wrote {len(samples)} samples to {path}")
    return path


def parse_dataset(data: bytes) -> SceneDataset:
    """Decode a CMTD byte string"""
    if len(data) < HEADER.size:
        raise FormatError("Truncated file while reading header", len(data))
    magic, version, count, class_count, thing_mask = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"Bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"Unsupported version {version}, expected {VERSION}", 4)
    header = DatasetHeader(count, class_count, thing_mask)
    reader = ByteReader(data, HEADER.size)
    samples = [decode_sample(reader, i) for i in range(count)]
    if not reader.at_end():
        raise FormatError("Trailing bytes after last sample", reader.offset)
    return SceneDataset(header, samples)


def read_dataset(path: Union[str, Path]) -> SceneDataset:
    """Read a CMTD file written by write_dataset"""
    with open(path, 'rb') as f:
        data = f.read()
    dataset = parse_dataset(data)
    logger.info(f"Read {len(dataset)} samples from {path}")
    return dataset
