"""
Utility functions for the Clustering Mask Transformer toolkit
"""

import re
from datetime import datetime
from pathlib import Path
from typing import Any, Tuple


def ensure_directory(path: str) -> Path:
    """
    Ensure directory exists, create if not

    Args:
        path: Directory path

    Returns:
        Path object
    """
    dir_path = Path(path)
    dir_path.mkdir(parents=True, exist_ok=True)
    return dir_path


def format_timestamp(timestamp: datetime = None, fmt: str = "%Y-%m-%dT%H:%M:%S") -> str:
    """
    Format timestamp

    Args:
        timestamp: Datetime object (defaults to now)
        fmt: Format string

    Returns:
        Formatted timestamp string
    """
    if timestamp is None:
        timestamp = datetime.now()
    return timestamp.strftime(fmt)


def format_duration(seconds: float) -> str:
    """
    Human-readable duration

    Args:
        seconds: Elapsed seconds

    Returns:
        Strings like "0.42s", "3m 07s" or "1h 02m"
    """
    if seconds < 60:
        return f"{seconds:.2f}s"
    minutes = int(seconds // 60)
    if minutes < 60:
        return f"{minutes}m {int(seconds % 60):02d}s"
    return f"{minutes // 60}h {minutes % 60:02d}m"


def parse_size(text: str) -> Tuple[int, int]:
    """
    Parse an image size written as HxW

    Args:
        text: e.g. "64x64"

    Returns:
        (height, width)
    """
    match = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", text)
    if not match:
        raise ValueError(f"Size must look like HxW, got {text!r}")
    return int(match.group(1)), int(match.group(2))


def coerce_value(raw: str, kind: type) -> Any:
    """
    Convert a text value to a bool, int, float or str

    Args:
        raw: Text as written in a config file or checkpoint header
        kind: Target type

    Returns:
        Converted value
    """
    raw = raw.strip()
    if kind is bool:
        lowered = raw.lower()
        if lowered in ('1', 'true', 'yes', 'on'):
            return True
        if lowered in ('0', 'false', 'no', 'off'):
            return False
        raise ValueError(f"Expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw
