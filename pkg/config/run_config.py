"""
Run Configuration
Plain-text key = value files covering the model, training and inference
settings, with command-line overrides applied last
"""

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Union

from config.config import INFERENCE_CONFIG
from modules.cmt_model import ModelConfig
from modules.errors import ConfigError
from modules.trainer import TrainConfig
from utils.helpers import coerce_value

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

THRESHOLD_KEYS = {
    'conf_threshold': float,
    'object_threshold': float,
    'overlap_threshold': float,
    'merge': str,
}


def _field_types(cls) -> Dict[str, type]:
    return {f.name: f.type for f in fields(cls)}


MODEL_KEYS = _field_types(ModelConfig)
TRAIN_KEYS = _field_types(TrainConfig)


@dataclass
class RunConfig:
    """Model, training and threshold settings for one command invocation"""
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    thresholds: Dict[str, Any] = field(
        default_factory=lambda: {key: INFERENCE_CONFIG[key] for key in THRESHOLD_KEYS})

    @staticmethod
    def known_keys() -> Dict[str, type]:
        return {**MODEL_KEYS, **TRAIN_KEYS, **THRESHOLD_KEYS}

    def set(self, key: str, value: Any, line: Optional[int] = None) -> None:
        """
        Set one setting, converting text values to the field's type

        Args:
            key: Setting name
            value: Text or already-typed value
            line: Source line number, used in error messages
        """
        where = f" (line {line})" if line is not None else ""
        kinds = self.known_keys()
        if key not in kinds:
            raise ConfigError(f"Unknown config key '{key}'{where}")
        if isinstance(value, str):
            try:
                value = coerce_value(value, kinds[key])
            except ValueError as e:
                raise ConfigError(f"Bad value for '{key}'{where}: {e}") from e
        if key in MODEL_KEYS:
            setattr(self.model, key, value)
        elif key in TRAIN_KEYS:
            setattr(self.train, key, value)
        else:
            self.thresholds[key] = value

    @classmethod
    def from_text(cls, text: str) -> 'RunConfig':
        """Parse key = value lines; '#' starts a comment, blank lines are ignored"""
        config = cls()
        for number, raw in enumerate(text.splitlines(), 1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError(f"Expected 'key = value' on line {number}: {raw.strip()!r}")
            key, value = (part.strip() for part in line.split('=', 1))
            config.set(key, value, line=number)
        return config

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> 'RunConfig':
        config = cls.from_text(Path(path).read_text(encoding='utf-8'))
        logger.info(f"Loaded run configuration from {path}")
        return config

    def apply_overrides(self, overrides: Dict[str, Any]) -> 'RunConfig':
        """Apply command-line values; None means the flag was not given"""
        for key, value in overrides.items():
            if value is not None:
                self.set(key, value)
        return self

    def validate(self, max_targets: Optional[int] = None) -> 'RunConfig':
        self.model.validate(max_targets)
        self.train.validate()
        if self.thresholds['merge'] not in ('argmax', 'maskwise'):
            raise ConfigError(f"Unknown merge mode: {self.thresholds['merge']}")
        return self
