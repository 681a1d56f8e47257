"""Tests for the optimizer, training loop, checkpoints and evaluation"""

from dataclasses import replace

import numpy as np
import pytest

from modules.cmt_model import CMTModel
from modules.errors import CheckpointError, ConfigError, ContractError, FormatError
from modules.losses import PanopticTarget
from modules.parameters import ParameterStore
from modules.scene_generator import Sample
from modules.tensor import no_tape
from modules.trainer import (AdamOptimizer, MetricsLog, TrainConfig, ablation_study,
                             compute_losses, evaluate, load_checkpoint, matched_center_entropies,
                             parse_checkpoint, poly_learning_rate, restore_model,
                             restore_optimizer, save_checkpoint, train)


def test_poly_learning_rate_schedule():
    config = TrainConfig(iterations=10, warmup=2, base_lr=1.0, poly_power=0.9)
    assert poly_learning_rate(0, config) == 0.0
    assert poly_learning_rate(1, config) == 0.5
    assert poly_learning_rate(2, config) == 1.0
    assert poly_learning_rate(6, config) == pytest.approx(0.5 ** 0.9)
    assert poly_learning_rate(10, config) == 0.0


def test_warmup_longer_than_run_rejected():
    with pytest.raises(ContractError):
        TrainConfig(iterations=5, warmup=6).validate()
    with pytest.raises(ConfigError):
        TrainConfig(iterations=0, warmup=0).validate()


def test_adam_first_step_moves_by_learning_rate():
    store = ParameterStore()
    store.add('w', np.zeros(3))
    store.add('stem.w', np.zeros(1))
    config = TrainConfig(weight_decay=0.0, stem_lr_multiplier=0.5)
    optimizer = AdamOptimizer(store, config)
    optimizer.step({'w': np.array([1.0, -2.0, 0.0]), 'stem.w': np.array([3.0])}, lr=0.1)
    np.testing.assert_allclose(store['w'].data, [-0.1, 0.1, 0.0], atol=1e-7)
    np.testing.assert_allclose(store['stem.w'].data, [-0.05], atol=1e-7)
    assert optimizer.step_count == 1


def test_adam_load_state_checks_every_moment():
    store = ParameterStore()
    store.add('w', np.zeros(2))
    optimizer = AdamOptimizer(store, TrainConfig())
    with pytest.raises(CheckpointError, match='optim.v.w'):
        optimizer.load_state({'optim.m.w': np.zeros(2)}, 3)
    optimizer.load_state({'optim.m.w': np.ones(2), 'optim.v.w': np.ones(2)}, 3)
    assert optimizer.step_count == 3


def test_compute_losses_combines_weighted_terms(tiny_model_config, tiny_samples):
    config = replace(tiny_model_config, loc_weight=2.0, ins_weight=0.5)
    model = CMTModel(config, seed=0)
    sample = tiny_samples[0]
    with no_tape():
        losses = compute_losses(model.forward(sample.image), sample.target, config, pixel_seed=1)
    values = losses.values()
    assert set(values) == {'loss_total', 'loss_mask', 'loss_loc', 'loss_ins'}
    assert all(np.isfinite(v) for v in values.values())
    expected = values['loss_mask'] + 2.0 * values['loss_loc'] + 0.5 * values['loss_ins']
    assert values['loss_total'] == pytest.approx(expected)


def test_compute_losses_for_recursive_model(tiny_model_config, tiny_samples):
    config = replace(tiny_model_config, rfn=True)
    model = CMTModel(config, seed=0)
    sample = tiny_samples[1]
    with no_tape():
        single = compute_losses(model.forward(sample.image), sample.target, config)
        stacked = compute_losses(model.predict(sample.image), sample.target, config)
    assert np.isfinite(stacked.total.item())
    assert stacked.total.item() != single.total.item()


@pytest.fixture
def trained(tiny_model_config, tiny_train_config, tiny_samples):
    return train(tiny_samples, tiny_model_config, tiny_train_config)


def test_short_training_run(trained, tiny_model_config):
    rows = trained.metrics.rows
    assert [row['step'] for row in rows] == [1, 2, 3, 4]
    assert all(np.isfinite(row['loss_total']) for row in rows)
    assert rows[-1]['lr'] == 0.0
    assert trained.final_step == 4 and trained.optimizer.step_count == 4
    fresh = CMTModel(tiny_model_config, seed=0).state_dict()
    changed = trained.model.state_dict()
    assert any(not np.array_equal(fresh[k], changed[k]) for k in fresh)


def test_training_is_deterministic(tiny_model_config, tiny_train_config, tiny_samples, trained):
    again = train(tiny_samples, tiny_model_config, tiny_train_config)
    assert again.metrics.rows == trained.metrics.rows


def test_training_needs_samples_and_enough_queries(tiny_model_config):
    with pytest.raises(ContractError):
        train([], tiny_model_config)
    masks = np.zeros((2, 16, 16), dtype=bool)
    masks[0, :4, :4] = True
    masks[1, 8:, 8:] = True
    sample = Sample(image=np.zeros((16, 16, 3)), target=PanopticTarget(masks, [1, 2]))
    with pytest.raises(ConfigError):
        train([sample], replace(tiny_model_config, num_queries=2),
              TrainConfig(iterations=1, warmup=0))


def test_checkpoint_round_trip(tmp_path, trained):
    path = save_checkpoint(tmp_path / 'model.cmtw', trained.model, 4, trained.optimizer)
    checkpoint = load_checkpoint(path)
    assert checkpoint.step == 4
    assert checkpoint.config == trained.model.config
    state = trained.model.state_dict()
    assert checkpoint.params.keys() == state.keys()
    for name, value in state.items():
        np.testing.assert_array_equal(checkpoint.params[name], value.astype(np.float32))
    assert len(checkpoint.moments) == 2 * len(state)

    model = restore_model(checkpoint)
    optimizer = restore_optimizer(checkpoint, model, TrainConfig())
    assert optimizer.step_count == 4
    np.testing.assert_array_equal(model.store['queries'].data, checkpoint.params['queries'])


def test_checkpoint_without_optimizer_has_no_moments(tmp_path, trained):
    path = save_checkpoint(tmp_path / 'weights.cmtw', trained.model, 4)
    checkpoint = load_checkpoint(path)
    assert checkpoint.moments == {}
    assert restore_optimizer(checkpoint, restore_model(checkpoint), TrainConfig()).step_count == 0


def test_checkpoint_format_errors(tmp_path, trained):
    data = save_checkpoint(tmp_path / 'model.cmtw', trained.model, 4).read_bytes()
    with pytest.raises(FormatError) as info:
        parse_checkpoint(b'NOPE' + data[4:])
    assert info.value.offset == 0
    with pytest.raises(FormatError) as info:
        parse_checkpoint(data + b'\x00')
    assert info.value.offset == len(data)
    with pytest.raises(FormatError, match='Truncated'):
        parse_checkpoint(data[:-2])


def test_checkpoint_into_mismatched_model(tmp_path, trained):
    checkpoint = load_checkpoint(save_checkpoint(tmp_path / 'model.cmtw', trained.model, 4))
    with pytest.raises(CheckpointError):
        restore_model(checkpoint, replace(checkpoint.config, dim=6))


def test_resume_continues_from_checkpoint(tmp_path, tiny_model_config, tiny_samples):
    first = train(tiny_samples, tiny_model_config, TrainConfig(iterations=2, warmup=1, log_interval=1))
    checkpoint = load_checkpoint(save_checkpoint(tmp_path / 'half.cmtw', first.model, 2,
                                                 first.optimizer))
    config = TrainConfig(iterations=4, warmup=1, log_interval=1)
    model = restore_model(checkpoint)
    resumed = train(tiny_samples, train_config=config, model=model,
                    optimizer=restore_optimizer(checkpoint, model, config),
                    start_step=checkpoint.step)
    assert [row['step'] for row in resumed.metrics.rows] == [3, 4]
    assert resumed.optimizer.step_count == 4


def test_metrics_log_text_and_append(tmp_path, tiny_model_config, tiny_train_config):
    log = MetricsLog.for_run(tiny_model_config, tiny_train_config, timestamp=False)
    log.add(1, {'loss_total': 1.5, 'loss_mask': 1.0, 'loss_loc': 0.25, 'loss_ins': 0.25}, 0.001)
    text = log.to_text()
    lines = text.splitlines()
    assert lines[0] == f"# variant={tiny_model_config.variant}"
    assert 'timestamp' not in text
    assert lines[-2] == 'step\tloss_total\tloss_mask\tloss_loc\tloss_ins\tlr'
    assert lines[-1] == '1\t1.500000\t1.000000\t0.250000\t0.250000\t0.001000'

    path = log.write(tmp_path / 'metrics.tsv')
    more = MetricsLog(header=log.header)
    more.add(2, {'loss_total': 1.0, 'loss_mask': 1.0, 'loss_loc': 0.0, 'loss_ins': 0.0}, 0.0)
    more.write(path, append=True)
    loaded = MetricsLog.read(path)
    assert loaded.header['variant'] == tiny_model_config.variant
    assert [int(row['step']) for row in loaded.rows] == [1, 2]
    assert MetricsLog.for_run(tiny_model_config, tiny_train_config).header['timestamp']


def test_oracle_evaluation_scores_one(tiny_samples):
    result = evaluate(None, tiny_samples, oracle=True)
    assert result.summary['PQ'] == 1.0
    assert result.summary['SQ'] == 1.0 and result.summary['RQ'] == 1.0
    assert list(result.summary_frame().columns) == ['merge', 'PQ', 'SQ', 'RQ', 'PQ_th', 'PQ_st']


@pytest.mark.parametrize("merge", ['argmax', 'maskwise'])
def test_evaluation_of_a_trained_model(trained, tiny_samples, merge):
    result = evaluate(trained.model, tiny_samples, merge=merge)
    for key in ('PQ', 'SQ', 'RQ', 'PQ_th', 'PQ_st'):
        assert 0.0 <= result.summary[key] <= 1.0
    assert result.merge == merge


def test_unknown_merge_mode(tiny_samples):
    with pytest.raises(ConfigError):
        evaluate(None, tiny_samples, merge='vote', oracle=True)


def test_matched_center_entropies_are_bounded(trained, tiny_samples):
    frame = matched_center_entropies(trained.model, tiny_samples)
    assert list(frame['layer']) == [1, 2]
    assert (frame['clustering_entropy'] >= 0).all()
    assert (frame['clustering_entropy'] <= np.log(16) + 1e-9).all()
    assert (frame['attention_entropy'] <= np.log(16) + 1e-9).all()


def test_ablation_study_one_row_per_rung(tiny_model_config, tiny_samples):
    ladder = [('baseline', {'variant': 'baseline_eq3', 'ins_weight': 0.0}),
              ('+ clustering', {'variant': 'combined_eq7'})]
    frame = ablation_study(tiny_samples[:2], tiny_samples[2:], tiny_model_config,
                           TrainConfig(iterations=2, warmup=1, log_interval=1),
                           seeds=(0,), ladder=ladder)
    assert list(frame['row']) == ['baseline', '+ clustering']
    assert list(frame['variant']) == ['baseline_eq3', 'combined_eq7']
    assert (frame['seeds'] == 1).all()
    assert frame['PQ'].between(0, 1).all()


def test_ablation_study_rejects_bad_input(tiny_model_config, tiny_samples):
    with pytest.raises(ContractError):
        ablation_study(tiny_samples, tiny_samples, tiny_model_config, seeds=())
    with pytest.raises(ConfigError):
        ablation_study(tiny_samples, tiny_samples, tiny_model_config,
                       TrainConfig(iterations=1, warmup=0), seeds=(0,),
                       ladder=[('bad', {'depth': 3})])
