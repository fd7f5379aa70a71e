from pathlib import Path

import numpy as np
import pytest
import yaml

from dmole.continual_trainer import (evaluate_all, init_state, load_eval_data, prepare_stream, run_stream,
                                     run_task, stream_specs)
from dmole.errors import ContractError, FreezeViolationError
from dmole.experts import expert_params
from dmole.metrics import ScoreMatrix
from dmole.report_exporter import REPORT_DIR
from dmole.run_store import STATUS_COMPLETED, STATUS_FAILED, read_manifest
from dmole.strategies import STRATEGY_NAMES
from dmole.task_gen import Split, TaskDataset

from conftest import tiny_config


def test_stream_specs_for_custom_tasks(tmp_path):
    config = tiny_config(tmp_path, stream={'tasks': [{'name': 'left', 'alpha': 1.0},
                                                     {'name': 'right', 'alpha': 0.0, 'n_train': 90}],
                                           'n_test': 30})
    preset = stream_specs(config)
    assert [t.name for t in preset.tasks] == ['left', 'right']
    assert [t.n_train for t in preset.tasks] == [600, 90]
    assert preset.tasks[0].n_test == 30
    assert preset.holdout.task_id == 3
    assert preset.tasks[0].d_v == config.model.d_v


def test_full_run_produces_complete_matrix_and_artifacts(run_config, stream_data):
    result = run_stream(run_config, data=stream_data)
    run_dir = result.run_dir
    assert result.scores.is_complete()
    assert result.scores.rows.shape == (3, 3)
    assert np.all((result.scores.rows >= 0) & (result.scores.rows <= 1))

    manifest = read_manifest(run_dir)
    assert manifest.status == STATUS_COMPLETED
    for name in ('config.yaml', 'plans.yaml', 'score_matrix.csv', 'sensitivity.csv', 'dynamics.csv',
                 'activation.csv', 'routing.csv', 'admissions.csv', 'freeze_audit.yaml', 'run.log',
                 'router_embeddings.csv', 'checkpoints/task_3/manifest.yaml', 'eval_data/task_1.npz',
                 'reports/report.txt', 'reports/summary.csv'):
        assert name in manifest.files, name

    loaded = ScoreMatrix.load_csv(run_dir / 'score_matrix.csv')
    np.testing.assert_array_equal(loaded.rows, result.scores.rows)


def test_freeze_audit_is_clean(run_config, stream_data):
    result = run_stream(run_config, data=stream_data)
    audit = yaml.safe_load((result.run_dir / 'freeze_audit.yaml').read_text(encoding='utf-8'))
    assert [entry['task_id'] for entry in audit] == [1, 2, 3]
    assert all(entry['backbone_unchanged'] and entry['changed_tasks'] == [] for entry in audit)
    assert audit[2]['frozen_tasks'] == [1, 2]


def test_plans_respect_budget(run_config, stream_data):
    result = run_stream(run_config, data=stream_data)
    for plan in result.state.plans:
        assert plan.b_llm + plan.b_vision == run_config.b_total
        assert sum(plan.indicators['vision']) == plan.b_vision
        assert sum(plan.indicators['llm']) == plan.b_llm
        assert plan.trainable_params == result.state.bank.n_params(plan.task_id)
        narrowest = min(run_config.model.widths().values())
        assert abs(plan.trainable_params - plan.param_budget) <= expert_params(narrowest, run_config.model.lora_rank)
    assert result.state.transfers[1] is None


def test_runs_are_deterministic(tmp_path):
    first = run_stream(tiny_config(tmp_path / 'a'))
    second = run_stream(tiny_config(tmp_path / 'b'))
    np.testing.assert_array_equal(first.scores.rows, second.scores.rows)
    assert (first.run_dir / 'score_matrix.csv').read_bytes() == (second.run_dir / 'score_matrix.csv').read_bytes()
    assert (first.run_dir / 'plans.yaml').read_bytes() == (second.run_dir / 'plans.yaml').read_bytes()
    summary = Path(REPORT_DIR) / 'summary.csv'
    assert (first.run_dir / summary).is_file()
    assert (first.run_dir / summary).read_bytes() == (second.run_dir / summary).read_bytes()


def test_poisoning_finished_tasks_changes_nothing(tmp_path):
    clean = run_stream(tiny_config(tmp_path / 'clean'))

    config = tiny_config(tmp_path / 'poisoned')
    data = prepare_stream(config)
    train_splits = {ds.spec.task_id: ds.train for ds in data.tasks}

    def poison(state, task_id):
        split = train_splits[task_id]
        split.vision[...] = np.nan
        split.text[...] = 1e6
        split.labels[...] = 0

    poisoned = run_stream(config, data=data, on_task_end=poison)
    np.testing.assert_array_equal(poisoned.scores.rows, clean.scores.rows)


@pytest.mark.parametrize('strategy', STRATEGY_NAMES)
def test_every_strategy_completes(tmp_path, strategy):
    result = run_stream(tiny_config(tmp_path, strategy=strategy))
    assert result.scores.is_complete()
    state = result.state
    if strategy == 'seq_ft':
        assert state.bank.task_ids() == [1]
        assert not state.routers
    elif strategy == 'dense_mole':
        assert state.bank.task_ids() == [1, 2, 3]
        assert not state.routers
    else:
        assert sorted(state.routers) == [1, 2, 3]
    if strategy == 'dmole_llm_only':
        assert all(sum(p.indicators['vision']) == 0 for p in state.plans)


def test_single_task_stream_has_undefined_bwt(tmp_path):
    config = tiny_config(tmp_path, stream={'tasks': [{'name': 'solo', 'alpha': 0.5}], 'n_train': 160, 'n_test': 48})
    result = run_stream(config)
    assert result.scores.rows.shape == (1, 1)
    assert result.summary['per_task'][0]['bwt'] is None
    assert result.summary['average']['bwt'] is None


def test_evaluation_matches_recorded_row_when_reloaded(run_config, stream_data):
    result = run_stream(run_config, data=stream_data)
    splits, holdout = load_eval_data(result.run_dir)
    assert sorted(splits) == [1, 2, 3]
    evaluation = evaluate_all(result.state, splits, holdout)
    np.testing.assert_array_equal(evaluation['scores'], result.scores.rows[-1])
    assert 0.0 <= evaluation['holdout']['rejection_rate'] <= 1.0


def test_empty_training_data_is_a_contract_error(run_config, stream_data):
    state = init_state(run_config, stream_data.task_names, None)
    first = stream_data.tasks[0]
    empty = Split(first.train.vision[:0], first.train.text[:0], first.train.labels[:0])
    with pytest.raises(ContractError):
        run_task(state, TaskDataset(first.spec, empty, first.test))
    with pytest.raises(ContractError):
        run_task(state, stream_data.tasks[1])


def test_backbone_tampering_is_detected(run_config, stream_data, monkeypatch):
    import dmole.continual_trainer as trainer

    class TamperingOptimizer(trainer.Optimizer):
        def step(self):
            super().step()
            state.model.params['head.b'].data += 1e-3

    monkeypatch.setattr(trainer, 'Optimizer', TamperingOptimizer)
    state = init_state(run_config, stream_data.task_names, None)
    with pytest.raises(FreezeViolationError):
        run_task(state, stream_data.tasks[0])
    assert state.freeze_audit[-1]['backbone_unchanged'] is False


def test_failed_run_marks_manifest(run_config, stream_data):
    def explode(state, task_id):
        raise RuntimeError('boom')

    with pytest.raises(RuntimeError):
        run_stream(run_config, data=stream_data, on_task_end=explode)
    manifest = read_manifest(run_config.output_dir)
    assert manifest.status == STATUS_FAILED
    assert 'boom' in manifest.error
