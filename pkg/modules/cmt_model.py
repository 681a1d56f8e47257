"""
Clustering Mask Transformer Model
Convolutional stem, stacked decoder layers, class head and optional recursive
stacking of the whole decoder
"""

import logging
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional

import numpy as np

from config.config import LOSS_CONFIG, MODEL_CONFIG
from utils.helpers import coerce_value
from .cmt_layer import VARIANTS, DecoderOptions, DecoderState, LayerParams, LayerTrace, cmt_layer
from .errors import ConfigError, ShapeError
from .location import PixelCoordGrid, ReferenceState
from .panoptic import Prediction
from .parameters import MLP, Linear, ParameterStore, parameter_count
from .tensor import (DenseArray, as_array, extract_patches, gelu, matmul, reshape,
                     scale, softmax_axis, transpose)

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    """Architecture and loss settings (defaults from MODEL_CONFIG and LOSS_CONFIG)"""
    dim: int = MODEL_CONFIG['dim']
    num_queries: int = MODEL_CONFIG['num_queries']
    num_layers: int = MODEL_CONFIG['num_layers']
    num_points: int = MODEL_CONFIG['num_points']
    variant: str = MODEL_CONFIG['variant']
    rfn: bool = MODEL_CONFIG['rfn']
    stem_channels: int = MODEL_CONFIG['stem_channels']
    stem_stride: int = MODEL_CONFIG['stem_stride']
    num_classes: int = MODEL_CONFIG['num_classes']
    use_self_attention: bool = MODEL_CONFIG['use_self_attention']
    use_ffn: bool = MODEL_CONFIG['use_ffn']
    use_coord_conv: bool = MODEL_CONFIG['use_coord_conv']
    use_reference_masks: bool = MODEL_CONFIG['use_reference_masks']
    share_reference_mlp: bool = MODEL_CONFIG['share_reference_mlp']
    share_affinity_projections: bool = MODEL_CONFIG['share_affinity_projections']
    attention_scale: bool = MODEL_CONFIG['attention_scale']
    layer_norm: bool = MODEL_CONFIG['layer_norm']
    fresh_readout: bool = MODEL_CONFIG['fresh_readout']
    loc_weight: float = LOSS_CONFIG['loc_weight']
    ins_weight: float = LOSS_CONFIG['ins_weight']
    aux_weight: float = LOSS_CONFIG['aux_weight']
    rfn_stack1_weight: float = LOSS_CONFIG['rfn_stack1_weight']
    temperature: float = LOSS_CONFIG['temperature']
    num_sampled_pixels: int = LOSS_CONFIG['num_sampled_pixels']
    size_exponent: float = LOSS_CONFIG['size_exponent']

    def validate(self, max_targets: Optional[int] = None) -> 'ModelConfig':
        """
        Check the configuration

        Args:
            max_targets: Largest K in the dataset; N must leave one query for background

        Returns:
            self
        """
        if self.variant not in VARIANTS:
            raise ConfigError(f"Unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        for name in ('dim', 'num_queries', 'num_layers', 'num_points', 'stem_channels',
                     'num_classes', 'num_sampled_pixels'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_queries < 2:
            raise ConfigError("num_queries must be at least 2 (one is reserved for background)")
        if self.stem_stride != 4:
            raise ConfigError(f"Only stem_stride 4 is supported, got {self.stem_stride}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if max_targets is not None and self.num_queries < max_targets + 1:
            raise ConfigError(
                f"num_queries={self.num_queries} cannot cover {max_targets} masks plus background")
        return self

    def decoder_options(self) -> DecoderOptions:
        return DecoderOptions(
            variant=self.variant,
            use_self_attention=self.use_self_attention,
            use_ffn=self.use_ffn,
            use_coord_conv=self.use_coord_conv,
            use_reference_masks=self.use_reference_masks,
            share_affinity_projections=self.share_affinity_projections,
            attention_scale=self.attention_scale,
            layer_norm=self.layer_norm
        )

    def to_mapping(self) -> Dict[str, str]:
        return {key: str(value) for key, value in asdict(self).items()}

    @classmethod
    def from_mapping(cls, values: Dict[str, str]) -> 'ModelConfig':
        """Rebuild from text values; unknown keys raise ConfigError"""
        kinds = {f.name: f.type for f in fields(cls)}
        parsed = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ConfigError(f"Unknown model setting: {key}")
            kind = kinds[key]
            try:
                parsed[key] = coerce_value(raw, kind)
            except ValueError as e:
                raise ConfigError(f"Bad value for {key}: {e}") from e
        return cls(**parsed)


class ConvStem:
    """Two stride-2 3x3 convolutions with GeLU: H x W x 3 image -> (H/4 * W/4) x D"""

    def __init__(self, store: ParameterStore, rng: np.random.Generator, channels: int, dim: int):
        self.conv1 = Linear(store, 'stem.conv1', 27, channels, rng, init='gaussian')
        self.conv2 = Linear(store, 'stem.conv2', 9 * channels, dim, rng, init='gaussian')
        self.channels = channels

    def __call__(self, image: DenseArray) -> DenseArray:
        height, width = image.shape[0], image.shape[1]
        hidden = gelu(self.conv1(extract_patches(image, size=3, stride=2, pad=1)))
        hidden = reshape(hidden, (height // 2, width // 2, self.channels))
        return gelu(self.conv2(extract_patches(hidden, size=3, stride=2, pad=1)))


@dataclass
class ForwardOutput:
    """
    Prediction plus the per-layer state the losses and reports need

    input_features are the pixel features the stack started from: the stem
    output for a single stack, the stem and first-stack mean for the second.
    """
    prediction: Prediction
    layer_traces: List[LayerTrace]
    reference: ReferenceState
    features: DenseArray
    centers: DenseArray
    stem_features: DenseArray
    input_features: DenseArray
    first_stack: Optional['ForwardOutput'] = None

    @property
    def z_per_layer(self) -> List[DenseArray]:
        return [trace.Z for trace in self.layer_traces]

    @property
    def aux_logits(self) -> List[DenseArray]:
        """Carried logits of every layer except the last"""
        return [trace.logits for trace in self.layer_traces[:-1]]


class CMTModel:
    """Toy end-to-end clustering mask transformer"""

    def __init__(self, config: ModelConfig = None, seed: int = 0):
        self.config = (config or ModelConfig()).validate()
        self.seed = seed
        rng = np.random.default_rng(seed)
        cfg = self.config
        self.store = ParameterStore()
        self.stem = ConvStem(self.store, rng, cfg.stem_channels, cfg.dim)
        self.store.add('queries', rng.standard_normal((cfg.num_queries, cfg.dim)) / np.sqrt(cfg.dim))
        self.options = cfg.decoder_options()
        self.decoder = self._build_decoder('decoder', rng)
        self.second_decoder = self._build_decoder('decoder2', rng) if cfg.rfn else None
        self.class_head = Linear(self.store, 'class_head', cfg.dim, cfg.num_classes + 1, rng,
                                 init='gaussian')
        logger.info(f"Built {cfg.variant} model with {parameter_count(self.store)} parameters")

    def _build_decoder(self, prefix: str, rng: np.random.Generator) -> List[LayerParams]:
        cfg = self.config
        shared = None
        if cfg.use_reference_masks and cfg.share_reference_mlp:
            shared = MLP(self.store, f"{prefix}.reference_mlp", cfg.dim, cfg.dim,
                         2 * cfg.num_points, rng)
        return [LayerParams(self.store, f"{prefix}.layer{i}", cfg.dim, cfg.num_points, rng,
                            self.options, reference_mlp=shared)
                for i in range(cfg.num_layers)]

    @property
    def queries(self) -> DenseArray:
        return self.store['queries']

    def _image(self, image) -> DenseArray:
        image = as_array(image.data if isinstance(image, DenseArray) else np.asarray(image))
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"Expected an H x W x 3 image, got {image.shape}")
        stride = self.config.stem_stride
        if image.shape[0] % stride or image.shape[1] % stride:
            raise ShapeError(f"Image {image.shape[:2]} is not divisible by stride {stride}")
        return image

    def _decode(self, layers: List[LayerParams], state: DecoderState,
                stem_features: DenseArray) -> ForwardOutput:
        input_features = state.F
        traces = []
        for params in layers:
            state = cmt_layer(state, params, self.options)
            traces.append(state.trace)
        if self.config.fresh_readout:
            logits = matmul(state.F, transpose(state.C))
            Z = softmax_axis(logits, axis=1)
        else:
            logits, Z = state.trace.logits, state.trace.Z
        class_logits = self.class_head(state.C)
        prediction = Prediction(
            Z=Z, class_probs=softmax_axis(class_logits, axis=1),
            height=state.grid.height, width=state.grid.width,
            mask_logits=logits, class_logits=class_logits)
        return ForwardOutput(prediction=prediction, layer_traces=traces, reference=state.ref,
                             features=state.F, centers=state.C, stem_features=stem_features,
                             input_features=input_features)

    def forward(self, image) -> ForwardOutput:
        """
        Single-stack forward pass

        Args:
            image: H x W x 3 array, H and W divisible by 4

        Returns:
            ForwardOutput at stride 4
        """
        image = self._image(image)
        features = self.stem(image)
        grid = PixelCoordGrid.for_shape(image.shape[0] // 4, image.shape[1] // 4)
        state = DecoderState.initial(features, self.queries, grid, self.config.num_points)
        return self._decode(self.decoder, state, features)

    def forward_rfn(self, image, run_second_stack: bool = True) -> ForwardOutput:
        """
        Two stacked decoders sharing the stem, centers and carried logits

        The second stack decodes the mean of the stem output and the first stack's
        final pixel features. The returned output keeps the first stack's output in
        `first_stack`.
        """
        if self.second_decoder is None:
            raise ConfigError("forward_rfn needs a model built with rfn=True")
        first = self.forward(image)
        if not run_second_stack:
            return first
        mixed = scale(first.stem_features + first.features, 0.5)
        last = first.layer_traces[-1]
        state = DecoderState(F=mixed, C=first.centers, S=last.logits, ref=first.reference,
                             grid=PixelCoordGrid.for_shape(first.prediction.height,
                                                           first.prediction.width))
        second = self._decode(self.second_decoder, state, first.stem_features)
        second.first_stack = first
        return second

    def predict(self, image) -> ForwardOutput:
        return self.forward_rfn(image) if self.config.rfn else self.forward(image)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return self.store.state_dict()

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.store.load_state_dict(state)
