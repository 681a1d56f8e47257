"""
Configuration settings for the Clustering Mask Transformer toolkit
"""

from pathlib import Path

# Base directory
BASE_DIR = Path(__file__).resolve().parent.parent

# Data directories
DATA_DIR = BASE_DIR / "data"
OUTPUT_DIR = BASE_DIR / "output"

# Tensor engine settings
TENSOR_CONFIG = {
    'dtype': 'float64',          # 'float32' allowed for the training path only
    'checked': True,             # reject NaN/Inf and log-domain errors at op boundaries
    'gradcheck_eps': 1e-5,
    'gradcheck_floor': 1e-8      # denominator floor of the relative error
}

# Model Settings
MODEL_CONFIG = {
    'dim': 64,
    'num_queries': 8,
    'num_layers': 3,
    'num_points': 8,
    'variant': 'combined_eq7',   # 'baseline_eq3', 'clustering_eq5', 'combined_eq7'
    'rfn': False,
    'stem_channels': 32,
    'stem_stride': 4,
    'num_classes': 4,            # background + rectangle, circle, triangle
    'use_self_attention': True,
    'use_ffn': True,
    'use_coord_conv': True,
    'use_reference_masks': True,
    'share_reference_mlp': False,
    'share_affinity_projections': False,
    'attention_scale': False,
    'layer_norm': False,
    'fresh_readout': False
}

# Loss Settings
LOSS_CONFIG = {
    'loc_weight': 1.0,           # mask approximation loss
    'ins_weight': 1.0,           # pixel contrastive loss
    'aux_weight': 0.5,           # intermediate assignment supervision
    'rfn_stack1_weight': 0.5,
    'temperature': 0.3,
    'num_sampled_pixels': 256,
    'size_exponent': 0.5,        # sampling weight = area ** -exponent
    'dice_eps': 1e-6
}

# Training Settings
TRAIN_CONFIG = {
    'iterations': 3000,
    'batch_size': 1,
    'base_lr': 1e-3,
    'warmup': 150,
    'poly_power': 0.9,
    'beta1': 0.9,
    'beta2': 0.999,
    'adam_eps': 1e-8,
    'weight_decay': 0.0,
    'stem_lr_multiplier': 1.0,
    'seed': 0,
    'log_interval': 10,
    'float32': False
}

# Inference Settings
INFERENCE_CONFIG = {
    'conf_threshold': 0.7,
    'object_threshold': 0.7,
    'overlap_threshold': 0.5,
    'merge': 'maskwise',         # 'argmax', 'maskwise'
    'iou_threshold': 0.5
}

# Synthetic data settings
DATA_CONFIG = {
    'height': 64,
    'width': 64,
    'max_shapes': 4,
    'shape_kinds': ('rectangle', 'circle', 'triangle'),
    'noise': 0.1,
    'attempts': 100,
    'min_extent': 16,           # smallest allowed image height/width
    'class_names': ('background', 'rectangle', 'circle', 'triangle'),
    'thing_classes': (1, 2, 3),
    'background_class': 0
}

# Ablation ladder: each row adds one component on top of the previous one
ABLATION_LADDER = [
    ('baseline', {'variant': 'baseline_eq3', 'use_reference_masks': False,
                  'use_coord_conv': False, 'ins_weight': 0.0}),
    ('+ clustering update', {'variant': 'combined_eq7'}),
    ('+ pixel contrastive', {'ins_weight': 1.0}),
    ('+ reference masks', {'use_reference_masks': True}),
    ('+ coord-conv', {'use_coord_conv': True})
]

# Toy benchmark (default model and training settings, see docs/benchmark.md)
BENCHMARK_CONFIG = {
    'train_samples': 512,
    'train_seed': 0,
    'val_samples': 128,
    'val_seed': 100_000,
    'seeds': (0, 1, 2),
    'min_pq': 0.6,              # mean PQ of combined_eq7 over the seeds
    'pq_margin': 0.01           # combined_eq7 may trail baseline_eq3 by at most this
}

# Output Settings
OUTPUT_CONFIG = {
    'float_format': '{:.3f}',
    'tsv_float_format': '%.6f',
    'timestamp_format': '%Y-%m-%dT%H:%M:%S',
    'heatmap_max_value': 255
}

# Logging Settings
LOGGING_CONFIG = {
    'level': 'INFO',
    'format': '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    'log_file': None
}
