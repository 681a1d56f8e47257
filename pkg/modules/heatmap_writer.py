"""
Heatmap Writer Module
Exports per-layer assignment and attention columns as ASCII PGM images and
summarizes their entropies
"""

import logging
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np
import pandas as pd

from config.config import OUTPUT_CONFIG
from utils.helpers import ensure_directory
from .cmt_layer import LayerTrace, attention_entropy_report
from .errors import ContractError, FormatError

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

MAX_VALUE = OUTPUT_CONFIG['heatmap_max_value']


def normalize_to_gray(values: np.ndarray, max_value: int = MAX_VALUE) -> np.ndarray:
    """
    Min-max scale an array to integers in 0..max_value

    A constant array maps to all zeros. No smoothing is applied.

    Args:
        values: Any real array
        max_value: Top of the gray range

    Returns:
        Integer array of the same shape
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return np.zeros(values.shape, dtype=np.int64)
    low, high = float(values.min()), float(values.max())
    if high - low <= 0:
        return np.zeros(values.shape, dtype=np.int64)
    scaled = (values - low) / (high - low) * max_value
    return np.clip(np.rint(scaled), 0, max_value).astype(np.int64)


def write_pgm(filename: Union[str, Path], image_data: np.ndarray,
              max_value: int = MAX_VALUE) -> Path:
    """
    Write an ASCII PGM (P2) image file

    Args:
        filename: Output filename
        image_data: 2D integer array with values in 0..max_value
        max_value: Maximum pixel value

    Returns:
        Path written
    """
    image_data = np.asarray(image_data)
    if image_data.ndim != 2:
        raise ContractError(f"PGM needs a 2D array, got shape {image_data.shape}")
    if image_data.size and (image_data.min() < 0 or image_data.max() > max_value):
        raise ContractError(f"PGM values must lie in 0..{max_value}")
    height, width = image_data.shape
    lines = ['P2', f'{width} {height}', str(max_value)]
    lines.extend(' '.join(str(int(v)) for v in row) for row in image_data)
    path = Path(filename)
    path.write_text('\n'.join(lines) + '\n', encoding='ascii')
    return path


def parse_pgm(text: str) -> np.ndarray:
    """
    Parse ASCII PGM text; '#' comments are skipped

    Returns:
        2D int64 array
    """
    tokens = []
    offset = 0
    for line in text.splitlines(keepends=True):
        body = line.split('#', 1)[0]
        start = offset
        for token in body.split():
            start = text.index(token, start)
            tokens.append((token, start))
            start += len(token)
        offset += len(line)
    if not tokens or tokens[0][0] != 'P2':
        raise FormatError("Not an ASCII PGM file (expected P2)", 0)
    if len(tokens) < 4:
        raise FormatError("Truncated PGM header", len(text))
    try:
        width, height, max_value = (int(t) for t, _ in tokens[1:4])
    except ValueError as e:
        raise FormatError(f"Bad PGM header value: {e}", tokens[1][1]) from e
    pixels = tokens[4:]
    if len(pixels) != width * height:
        raise FormatError(f"Expected {width * height} pixels, found {len(pixels)}", len(text))
    values = np.empty(width * height, dtype=np.int64)
    for i, (token, position) in enumerate(pixels):
        if not token.isdigit() or int(token) > max_value:
            raise FormatError(f"Bad pixel value {token!r}", position)
        values[i] = int(token)
    return values.reshape(height, width)


def read_pgm(filename: Union[str, Path]) -> np.ndarray:
    return parse_pgm(Path(filename).read_text(encoding='ascii'))


def layer_columns(traces: Sequence[LayerTrace], center: int) -> Dict[str, List[np.ndarray]]:
    """
    The chosen center's clustering column (from Z) and baseline attention row per layer

    Returns:
        {'cluster': [...], 'attention': [...]}, each entry a length-HW vector
    """
    if not traces:
        return {'cluster': [], 'attention': []}
    num_centers = traces[0].Z.shape[1]
    if not 0 <= center < num_centers:
        raise ContractError(f"Center {center} out of range for {num_centers} centers")
    return {
        'cluster': [trace.Z.data[:, center] for trace in traces],
        'attention': [trace.attention.data[center, :] for trace in traces],
    }


def write_attention_heatmaps(traces: Sequence[LayerTrace], center: int, height: int, width: int,
                             out_dir: Union[str, Path]) -> List[Path]:
    """
    Write layerNN_cluster.pgm and layerNN_attention.pgm for every decoder layer

    Args:
        traces: Per-layer traces of one forward pass
        center: Center index to visualize
        height: Stride-4 feature height
        width: Stride-4 feature width
        out_dir: Output directory (created if missing)

    Returns:
        Paths written, in layer order
    """
    directory = ensure_directory(out_dir)
    columns = layer_columns(traces, center)
    written = []
    for layer, (cluster, attention) in enumerate(zip(columns['cluster'], columns['attention']), 1):
        for kind, column in (('cluster', cluster), ('attention', attention)):
            gray = normalize_to_gray(column.reshape(height, width))
            written.append(write_pgm(directory / f"layer{layer:02d}_{kind}.pgm", gray))
    logger.info(f"Wrote {len(written)} heatmaps for center {center} to {directory}")
    return written


def entropy_table(traces: Sequence[LayerTrace], center: int) -> pd.DataFrame:
    """
    Per-layer entropy of the clustering column and the baseline attention row

    Returns:
        DataFrame with columns layer, clustering_entropy, attention_entropy
    """
    z_layers = [trace.Z for trace in traces]
    a_layers = [trace.attention.data.T for trace in traces]
    clustering = attention_entropy_report(z_layers, center)
    attention = attention_entropy_report(a_layers, center)
    return pd.DataFrame({'layer': np.arange(1, len(traces) + 1),
                         'clustering_entropy': clustering,
                         'attention_entropy': attention})
