"""Long-running acceptance runs (enable with --runslow)"""

import numpy as np
import pytest

from config.config import BENCHMARK_CONFIG
from modules.cmt_model import ModelConfig
from modules.losses import match_predictions, segmentation_loss_terms
from modules.scene_generator import SceneConfig, generate_dataset
from modules.tensor import no_tape
from modules.trainer import TrainConfig, evaluate, matched_center_entropies, train

pytestmark = pytest.mark.slow


@pytest.fixture(scope='module')
def benchmark_data():
    config = SceneConfig()
    return (generate_dataset(BENCHMARK_CONFIG['train_samples'], seed=BENCHMARK_CONFIG['train_seed'],
                             config=config),
            generate_dataset(BENCHMARK_CONFIG['val_samples'], seed=BENCHMARK_CONFIG['val_seed'],
                             config=config))


@pytest.fixture(scope='module')
def benchmark_runs(benchmark_data):
    train_set, _ = benchmark_data
    runs = {}
    for variant in ('baseline_eq3', 'combined_eq7'):
        runs[variant] = [train(train_set, ModelConfig(variant=variant), TrainConfig(seed=seed))
                         for seed in BENCHMARK_CONFIG['seeds']]
    return runs


@pytest.fixture(scope='module')
def mean_pq(benchmark_data, benchmark_runs):
    _, val_set = benchmark_data
    return {variant: float(np.mean([evaluate(run.model, val_set).summary['PQ'] for run in runs]))
            for variant, runs in benchmark_runs.items()}


def test_clustering_update_does_not_lose_pq(mean_pq):
    assert mean_pq['combined_eq7'] >= mean_pq['baseline_eq3'] - BENCHMARK_CONFIG['pq_margin']


def test_combined_variant_reaches_benchmark_pq(mean_pq):
    assert mean_pq['combined_eq7'] >= BENCHMARK_CONFIG['min_pq'], mean_pq


def test_clustering_columns_are_denser_than_attention_rows(benchmark_data, benchmark_runs):
    _, val_set = benchmark_data
    model = benchmark_runs['combined_eq7'][0].model
    frame = matched_center_entropies(model, val_set[:16])
    assert frame['clustering_entropy'].mean() > frame['attention_entropy'].mean()


def test_single_sample_overfits():
    sample = generate_dataset(1, seed=3, config=SceneConfig(height=32, width=32, max_shapes=2))[0]
    result = train([sample], ModelConfig(), TrainConfig(iterations=2000, warmup=100))
    with no_tape():
        output = result.model.forward(sample.image)
        small = sample.target.downsample(sample.height // output.prediction.height)
        terms = segmentation_loss_terms(output.prediction, match_predictions(output.prediction, small),
                                        small)
    assert terms['mask'].item() < 0.1
