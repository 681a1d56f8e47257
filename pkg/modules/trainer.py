"""
Training and Evaluation Pipeline
Adam with a warmup + poly schedule, the combined training objective, CMTW
checkpoints, metrics logs and PQ evaluation over a dataset
"""

import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from config.config import ABLATION_LADDER, DATA_CONFIG, INFERENCE_CONFIG, OUTPUT_CONFIG, TRAIN_CONFIG
from utils.helpers import format_timestamp
from .cmt_layer import attention_entropy_report
from .cmt_model import CMTModel, ForwardOutput, ModelConfig
from .dataset_format import U32, ByteReader
from .errors import (CheckpointError, ConfigError, ContractError, DivergenceError,
                     DomainError, FormatError)
from .losses import (Matching, PanopticTarget, mask_approximation_loss, match_predictions,
                     pixel_contrastive_loss, sample_pixels, segmentation_loss_terms)
from .panoptic import PanopticQualityAccumulator, maskwise_merge, pixelwise_argmax
from .parameters import ParameterStore
from .scene_generator import Sample
from .tensor import DenseArray, Tape, no_tape, scale

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'CMTW'
CHECKPOINT_VERSION = 1
MOMENT_PREFIXES = ('optim.m.', 'optim.v.')
METRIC_COLUMNS = ['step', 'loss_total', 'loss_mask', 'loss_loc', 'loss_ins', 'lr']


@dataclass
class TrainConfig:
    """Optimizer and schedule settings (defaults from TRAIN_CONFIG)"""
    iterations: int = TRAIN_CONFIG['iterations']
    batch_size: int = TRAIN_CONFIG['batch_size']
    base_lr: float = TRAIN_CONFIG['base_lr']
    warmup: int = TRAIN_CONFIG['warmup']
    poly_power: float = TRAIN_CONFIG['poly_power']
    beta1: float = TRAIN_CONFIG['beta1']
    beta2: float = TRAIN_CONFIG['beta2']
    adam_eps: float = TRAIN_CONFIG['adam_eps']
    weight_decay: float = TRAIN_CONFIG['weight_decay']
    stem_lr_multiplier: float = TRAIN_CONFIG['stem_lr_multiplier']
    seed: int = TRAIN_CONFIG['seed']
    log_interval: int = TRAIN_CONFIG['log_interval']

    def validate(self) -> 'TrainConfig':
        if self.iterations < 1:
            raise ConfigError(f"iterations must be positive, got {self.iterations}")
        if not 0 <= self.warmup <= self.iterations:
            raise ContractError(
                f"warmup ({self.warmup}) must lie in [0, iterations={self.iterations}]")
        if self.batch_size < 1 or self.log_interval < 1:
            raise ConfigError("batch_size and log_interval must be positive")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        return self


def poly_learning_rate(step: int, config: TrainConfig) -> float:
    """
    Linear warmup to base_lr, then poly decay to 0 at the last iteration

    lr(0) = 0, lr(warmup) = base_lr, lr(iterations) = 0

    The decay is measured from the end of warmup, (1 - (t - w) / (T - w)) ** power,
    not min(t / w, (1 - t / T) ** power), so the rate reaches base_lr exactly at t = w.
    """
    if config.warmup > 0 and step < config.warmup:
        return config.base_lr * step / config.warmup
    remaining = config.iterations - config.warmup
    if remaining <= 0:
        return config.base_lr
    progress = min(1.0, (step - config.warmup) / remaining)
    return config.base_lr * (1.0 - progress) ** config.poly_power


class AdamOptimizer:
    """Adam with per-parameter moments and a learning-rate multiplier for the stem"""

    def __init__(self, store: ParameterStore, config: TrainConfig):
        self.store = store
        self.config = config
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {name: np.zeros(p.shape) for name, p in store.items()}
        self.v: Dict[str, np.ndarray] = {name: np.zeros(p.shape) for name, p in store.items()}

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        cfg = self.config
        self.step_count += 1
        t = self.step_count
        for name, param in list(self.store.items()):
            grad = grads[name]
            if cfg.weight_decay:
                grad = grad + cfg.weight_decay * param.data
            self.m[name] = cfg.beta1 * self.m[name] + (1 - cfg.beta1) * grad
            self.v[name] = cfg.beta2 * self.v[name] + (1 - cfg.beta2) * grad * grad
            m_hat = self.m[name] / (1 - cfg.beta1 ** t)
            v_hat = self.v[name] / (1 - cfg.beta2 ** t)
            rate = lr * (cfg.stem_lr_multiplier if name.startswith('stem.') else 1.0)
            self.store.assign(name, param.data - rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps))

    def state(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in self.store:
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        return out

    def load_state(self, moments: Dict[str, np.ndarray], step_count: int) -> None:
        for name in self.store:
            for prefix, table in zip(MOMENT_PREFIXES, (self.m, self.v)):
                key = prefix + name
                if key not in moments:
                    raise CheckpointError(f"Checkpoint is missing optimizer moment: {key}")
                if moments[key].shape != table[name].shape:
                    raise CheckpointError(f"Optimizer moment {key} has shape {moments[key].shape}")
                table[name] = np.asarray(moments[key], dtype=np.float64)
        self.step_count = step_count


@dataclass
class LossBreakdown:
    """Scalar loss terms of one forward pass (all on the active tape)"""
    total: DenseArray
    mask: DenseArray
    loc: DenseArray
    ins: DenseArray
    matching: Matching

    def values(self) -> Dict[str, float]:
        return {'loss_total': self.total.item(), 'loss_mask': self.mask.item(),
                'loss_loc': self.loc.item(), 'loss_ins': self.ins.item()}


def _stack_losses(output: ForwardOutput, matching: Matching, target: PanopticTarget,
                  config: ModelConfig, pixel_seed):
    terms = segmentation_loss_terms(output.prediction, matching, target,
                                    output.aux_logits, config.aux_weight)
    mask = terms['mask'] + terms['class'] + terms['aux']
    loc = DenseArray(0.0)
    if config.use_reference_masks:
        loc = mask_approximation_loss(output.reference, matching, target)
    ins = DenseArray(0.0)
    if config.ins_weight > 0:
        count = min(config.num_sampled_pixels, target.height * target.width)
        sample = sample_pixels(target, count, pixel_seed, config.size_exponent)
        ins = pixel_contrastive_loss(output.features, sample, config.temperature)
    return mask, loc, ins


def compute_losses(output: ForwardOutput, target: PanopticTarget, config: ModelConfig,
                   pixel_seed=0) -> LossBreakdown:
    """
    Combined objective for one image

    Args:
        output: Model output at stride 4
        target: Ground truth at full resolution
        config: Loss weights and sampling settings
        pixel_seed: Seed for the contrastive pixel sample

    Returns:
        LossBreakdown; total = mask + loc_weight * loc + ins_weight * ins, with the
        first stack of a recursive model added at rfn_stack1_weight
    """
    pred = output.prediction
    small = target.downsample(target.height // pred.height)
    matching = match_predictions(pred, small)
    mask, loc, ins = _stack_losses(output, matching, small, config, pixel_seed)
    if output.first_stack is not None:
        weight = config.rfn_stack1_weight
        mask1, loc1, ins1 = _stack_losses(output.first_stack, matching, small, config, pixel_seed)
        mask = mask + scale(mask1, weight)
        loc = loc + scale(loc1, weight)
        ins = ins + scale(ins1, weight)
    total = mask + scale(loc, config.loc_weight) + scale(ins, config.ins_weight)
    return LossBreakdown(total=total, mask=mask, loc=loc, ins=ins, matching=matching)


@dataclass
class MetricsLog:
    """Header lines plus one row per logged step"""
    header: Dict[str, str] = field(default_factory=dict)
    rows: List[Dict[str, float]] = field(default_factory=list)

    @classmethod
    def for_run(cls, model_config: ModelConfig, train_config: TrainConfig,
                timestamp: bool = True) -> 'MetricsLog':
        header = {
            'variant': model_config.variant,
            'rfn': str(model_config.rfn),
            'loc_weight': str(model_config.loc_weight),
            'ins_weight': str(model_config.ins_weight),
            'aux_weight': str(model_config.aux_weight),
            'seed': str(train_config.seed),
            'iterations': str(train_config.iterations)
        }
        if timestamp:
            header['timestamp'] = format_timestamp(fmt=OUTPUT_CONFIG['timestamp_format'])
        return cls(header=header)

    def add(self, step: int, values: Dict[str, float], lr: float) -> None:
        self.rows.append({'step': step, **values, 'lr': lr})

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=METRIC_COLUMNS).astype({'step': int})

    def to_text(self) -> str:
        lines = [f"# {key}={value}" for key, value in self.header.items()]
        body = self.to_frame().to_csv(sep='\t', index=False, lineterminator='\n',
                                      float_format=OUTPUT_CONFIG['tsv_float_format'])
        return '\n'.join(lines) + '\n' + body

    def write(self, path: Union[str, Path], append: bool = False) -> Path:
        path = Path(path)
        if append and path.exists():
            body = self.to_frame().to_csv(sep='\t', index=False, header=False, lineterminator='\n',
                                          float_format=OUTPUT_CONFIG['tsv_float_format'])
            with open(path, 'a', encoding='utf-8') as f:
                f.write(body)
        else:
            path.write_text(self.to_text(), encoding='utf-8')
        return path

    @classmethod
    def read(cls, path: Union[str, Path]) -> 'MetricsLog':
        text = Path(path).read_text(encoding='utf-8')
        header = {}
        for line in text.splitlines():
            if line.startswith('#'):
                key, _, value = line[1:].strip().partition('=')
                header[key] = value
        frame = pd.read_csv(io.StringIO(text), sep='\t', comment='#')
        return cls(header=header, rows=frame.to_dict('records'))


@dataclass
class TrainResult:
    model: CMTModel
    optimizer: AdamOptimizer
    metrics: MetricsLog
    final_step: int


def _gradients(store: ParameterStore) -> Dict[str, np.ndarray]:
    return {name: param.grad for name, param in store.items()}


def train(samples: Sequence[Sample], model_config: ModelConfig = None,
          train_config: TrainConfig = None, model: Optional[CMTModel] = None,
          optimizer: Optional[AdamOptimizer] = None, start_step: int = 0,
          metrics: Optional[MetricsLog] = None, progress: bool = False) -> TrainResult:
    """
    Train a model on a list of samples

    Args:
        samples: Non-empty training samples
        model_config: Architecture and loss settings (ignored when `model` is given)
        train_config: Optimizer and schedule settings
        model: Model to continue training
        optimizer: Optimizer state to continue from
        start_step: Last completed step (0 for a fresh run)
        metrics: Log to append to
        progress: Show a tqdm progress bar

    Returns:
        TrainResult with the trained model and metrics
    """
    samples = list(samples)
    if not samples:
        raise ContractError("Cannot train on an empty dataset")
    train_config = (train_config or TrainConfig()).validate()
    model = model or CMTModel(model_config or ModelConfig(), seed=train_config.seed)
    config = model.config
    config.validate(max_targets=max(s.target.K for s in samples))
    optimizer = optimizer or AdamOptimizer(model.store, train_config)
    metrics = metrics or MetricsLog.for_run(config, train_config)

    steps = range(start_step + 1, train_config.iterations + 1)
    logger.info(f"Training {config.variant} for steps {start_step + 1}..{train_config.iterations}")
    for step in tqdm(steps, desc="Training", disable=not progress):
        rng = np.random.default_rng([train_config.seed, step])
        batch = rng.integers(0, len(samples), size=train_config.batch_size)
        pixel_seeds = rng.integers(0, 2 ** 32, size=train_config.batch_size)
        try:
            with Tape() as tape:
                breakdowns = []
                for index, pixel_seed in zip(batch, pixel_seeds):
                    output = model.predict(samples[index].image)
                    breakdowns.append(compute_losses(output, samples[index].target, config,
                                                     int(pixel_seed)))
                total = breakdowns[0].total
                for extra in breakdowns[1:]:
                    total = total + extra.total
                total = scale(total, 1.0 / len(breakdowns))
            value = total.item()
            if not np.isfinite(value):
                raise DomainError(f"loss is {value}")
            tape.backward(total)
        except DomainError as e:
            logger.error(f"Training diverged at step {step}: {e}")
            raise DivergenceError(f"Training diverged at step {step}: {e}") from e

        lr = poly_learning_rate(step, train_config)
        optimizer.step(_gradients(model.store), lr)

        if step % train_config.log_interval == 0 or step == train_config.iterations:
            values = {key: float(np.mean([b.values()[key] for b in breakdowns]))
                      for key in METRIC_COLUMNS[1:-1]}
            metrics.add(step, values, lr)
            logger.info(f"Step {step}: loss={values['loss_total']:.4f} lr={lr:.2e}")

    return TrainResult(model=model, optimizer=optimizer, metrics=metrics,
                       final_step=train_config.iterations)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    step: int
    config: ModelConfig
    params: Dict[str, np.ndarray]
    moments: Dict[str, np.ndarray]


def _encode_array(name: str, value: np.ndarray) -> bytes:
    encoded = name.encode('utf-8')
    parts = [U32.pack(len(encoded)), encoded, U32.pack(value.ndim)]
    parts.extend(U32.pack(extent) for extent in value.shape)
    parts.append(np.ascontiguousarray(value, dtype='<f4').tobytes())
    return b''.join(parts)


def save_checkpoint(path: Union[str, Path], model: CMTModel, step: int,
                    optimizer: Optional[AdamOptimizer] = None) -> Path:
    """
    Write a CMTW checkpoint

    Args:
        path: Output file
        model: Model whose config and parameters are stored
        step: Completed training steps
        optimizer: When given, Adam moments are stored as optim.m./optim.v. entries

    Returns:
        Path written
    """
    meta = '\n'.join(f"{k}={v}" for k, v in model.config.to_mapping().items()).encode('utf-8')
    arrays = dict(model.state_dict())
    if optimizer is not None:
        arrays.update(optimizer.state())
    parts = [CHECKPOINT_MAGIC, U32.pack(CHECKPOINT_VERSION), U32.pack(step),
             U32.pack(len(meta)), meta, U32.pack(len(arrays))]
    parts.extend(_encode_array(name, value) for name, value in arrays.items())
    path = Path(path)
    path.write_bytes(b''.join(parts))
    logger.info(f"Saved checkpoint at step {step} to {path}")
    return path


def parse_checkpoint(data: bytes) -> Checkpoint:
    reader = ByteReader(data)
    magic = reader.take(4, 'magic')
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"Bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    version = reader.u32('version')
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"Unsupported checkpoint version {version}", 4)
    step = reader.u32('step')
    meta_start = reader.offset
    meta_text = reader.take(reader.u32('meta length'), 'meta').decode('utf-8', errors='strict')
    settings = {}
    for line in meta_text.splitlines():
        if line.strip():
            key, sep, value = line.partition('=')
            if not sep:
                raise FormatError(f"Malformed meta line {line!r}", meta_start)
            settings[key.strip()] = value.strip()
    try:
        config = ModelConfig.from_mapping(settings)
    except ConfigError as e:
        raise FormatError(f"Invalid model settings: {e}", meta_start) from e

    params, moments = {}, {}
    for i in range(reader.u32('parameter count')):
        name = reader.take(reader.u32(f"name length of entry {i}"), f"name of entry {i}").decode('utf-8')
        rank = reader.u32(f"rank of {name}")
        shape = tuple(reader.u32(f"extent of {name}") for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        value = np.frombuffer(reader.take(4 * count, f"data of {name}"), dtype='<f4')
        value = value.reshape(shape).astype(np.float64)
        (moments if name.startswith(MOMENT_PREFIXES) else params)[name] = value
    if not reader.at_end():
        raise FormatError("Trailing bytes after last parameter", reader.offset)
    return Checkpoint(step=step, config=config, params=params, moments=moments)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def restore_model(checkpoint: Checkpoint, config: Optional[ModelConfig] = None) -> CMTModel:
    """Build a model (from the stored or a given config) and load the checkpoint into it"""
    model = CMTModel(config or checkpoint.config)
    model.load_state_dict(checkpoint.params)
    return model


def restore_optimizer(checkpoint: Checkpoint, model: CMTModel,
                      train_config: TrainConfig) -> AdamOptimizer:
    optimizer = AdamOptimizer(model.store, train_config)
    if checkpoint.moments:
        optimizer.load_state(checkpoint.moments, checkpoint.step)
    return optimizer


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvaluationResult:
    summary: Dict[str, float]
    per_class: pd.DataFrame
    merge: str

    def summary_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{'merge': self.merge, **self.summary}],
                            columns=['merge', 'PQ', 'SQ', 'RQ', 'PQ_th', 'PQ_st'])


def evaluate(model: Optional[CMTModel], samples: Sequence[Sample],
             merge: str = INFERENCE_CONFIG['merge'],
             conf_threshold: float = INFERENCE_CONFIG['conf_threshold'],
             object_threshold: float = INFERENCE_CONFIG['object_threshold'],
             overlap_threshold: float = INFERENCE_CONFIG['overlap_threshold'],
             oracle: bool = False, thing_classes: Sequence[int] = DATA_CONFIG['thing_classes'],
             class_names: Sequence[str] = DATA_CONFIG['class_names'],
             progress: bool = False) -> EvaluationResult:
    """
    PQ over a dataset at full resolution

    Args:
        model: Trained model (unused in oracle mode)
        samples: Evaluation samples
        merge: 'argmax' or 'maskwise'
        conf_threshold: Class confidence for pixel-wise argmax
        object_threshold: Query confidence for mask-wise merge
        overlap_threshold: Kept-area ratio for mask-wise merge
        oracle: Score the ground truth against itself
        thing_classes: Class ids counted as things
        class_names: Names for the per-class table
        progress: Show a tqdm progress bar

    Returns:
        EvaluationResult
    """
    if merge not in ('argmax', 'maskwise'):
        raise ConfigError(f"Unknown merge mode: {merge}")
    accumulator = PanopticQualityAccumulator(len(class_names), thing_classes, class_names)
    for sample in tqdm(samples, desc="Evaluating", disable=not progress):
        gt_map = sample.target.to_panoptic_map()
        if oracle:
            accumulator.add(gt_map, gt_map)
            continue
        with no_tape():
            prediction = model.predict(sample.image).prediction
        if merge == 'argmax':
            pred_map = pixelwise_argmax(prediction, conf_threshold, thing_classes)
        else:
            pred_map = maskwise_merge(prediction, object_threshold, overlap_threshold,
                                      thing_classes)
        factor = sample.height // prediction.height
        accumulator.add(pred_map.upsample(factor), gt_map)
    summary = accumulator.summary()
    logger.info(f"Evaluated {accumulator.images} images ({merge}): PQ={summary['PQ']:.3f}")
    return EvaluationResult(summary=summary, per_class=accumulator.per_class(), merge=merge)


def matched_center_entropies(model: CMTModel, samples: Sequence[Sample]) -> pd.DataFrame:
    """
    Mean entropy per layer of matched centers' columns

    For every sample the final prediction is matched to the stride-4 target; for
    each matched center the clustering assignment column (Z) and the baseline
    cross-attention row are scored with attention_entropy_report.

    Returns:
        DataFrame with columns layer, clustering_entropy, attention_entropy
    """
    clustering = np.zeros(model.config.num_layers)
    attention = np.zeros(model.config.num_layers)
    count = 0
    for sample in samples:
        with no_tape():
            output = model.predict(sample.image)
            pred = output.prediction
            small = sample.target.downsample(sample.height // pred.height)
            matching = match_predictions(pred, small)
        z_layers = output.z_per_layer
        a_layers = [trace.attention.data.T for trace in output.layer_traces]
        for n, _ in matching.pairs:
            clustering += attention_entropy_report(z_layers, n)
            attention += attention_entropy_report(a_layers, n)
            count += 1
    if count:
        clustering /= count
        attention /= count
    return pd.DataFrame({'layer': np.arange(1, model.config.num_layers + 1),
                         'clustering_entropy': clustering,
                         'attention_entropy': attention})


# ---------------------------------------------------------------------------
# Ablation ladder
# ---------------------------------------------------------------------------

def ablation_study(train_samples: Sequence[Sample], val_samples: Sequence[Sample],
                   model_config: ModelConfig = None, train_config: TrainConfig = None,
                   seeds: Sequence[int] = (0, 1, 2),
                   ladder: Sequence[Tuple[str, Dict[str, object]]] = ABLATION_LADDER,
                   merge: str = INFERENCE_CONFIG['merge'],
                   progress: bool = False) -> pd.DataFrame:
    """
    Train and evaluate each rung of an accumulative ablation ladder

    Each rung applies its overrides on top of all previous rungs. Every rung is
    trained once per seed and scored on the validation samples.

    Args:
        train_samples: Training samples
        val_samples: Validation samples
        model_config: Starting configuration before the first rung
        train_config: Schedule shared by every run (its seed is replaced)
        seeds: Training seeds
        ladder: (label, overrides) rows
        merge: Post-processing used for PQ
        progress: Show tqdm progress bars

    Returns:
        DataFrame with columns row, variant, PQ, PQ_th, PQ_st,
        clustering_entropy, attention_entropy, seeds
    """
    if not seeds:
        raise ContractError("ablation_study needs at least one seed")
    config = model_config or ModelConfig()
    train_config = train_config or TrainConfig()
    rows = []
    for label, overrides in ladder:
        try:
            config = replace(config, **overrides)
        except TypeError as e:
            raise ConfigError(f"Bad ablation override in row {label!r}: {e}") from e
        scores = []
        for seed in seeds:
            result = train(train_samples, config, replace(train_config, seed=seed), progress=progress)
            summary = evaluate(result.model, val_samples, merge=merge).summary
            entropies = matched_center_entropies(result.model, val_samples)
            scores.append({**summary,
                           'clustering_entropy': float(entropies['clustering_entropy'].mean()),
                           'attention_entropy': float(entropies['attention_entropy'].mean())})
        means = pd.DataFrame(scores).mean()
        logger.info(f"Ablation row {label!r}: PQ={means['PQ']:.3f} over {len(seeds)} seeds")
        rows.append({'row': label, 'variant': config.variant, 'PQ': means['PQ'],
                     'PQ_th': means['PQ_th'], 'PQ_st': means['PQ_st'],
                     'clustering_entropy': means['clustering_entropy'],
                     'attention_entropy': means['attention_entropy'], 'seeds': len(seeds)})
    return pd.DataFrame(rows, columns=['row', 'variant', 'PQ', 'PQ_th', 'PQ_st',
                                       'clustering_entropy', 'attention_entropy', 'seeds'])
