import numpy as np
import pandas as pd
import pytest

from dmole.cli import SWEEP_FILE, build_config, main
from dmole.config import load_config, save_config
from dmole.continual_trainer import sweep_thresholds
from dmole.errors import EXIT_OK, EXIT_PARTIAL, EXIT_RUNTIME, EXIT_USAGE, EXIT_VALIDATION
from dmole.metrics import ScoreMatrix
from dmole.run_store import STATUS_FAILED, read_manifest, write_manifest

from conftest import tiny_config


def test_missing_config_is_usage_error(tmp_path, capsys):
    code = main(['run', '--config', str(tmp_path / 'missing.yaml')])
    assert code == EXIT_USAGE
    assert 'config not found' in capsys.readouterr().err


def test_bad_arguments_and_missing_command():
    assert main(['run', '--top-k', 'many']) == EXIT_USAGE
    assert main([]) == EXIT_USAGE
    assert main(['generate-data']) == EXIT_USAGE


def test_invalid_strategy_is_validation_error(tmp_path):
    assert main(['run', '--strategy', 'magic', '--output-dir', str(tmp_path)]) == EXIT_VALIDATION


def test_override_precedence(tmp_path):
    path = save_config(tiny_config(tmp_path, seed=1, stream={'tasks': [{'name': 'x', 'alpha': 0.5}]}),
                       tmp_path / 'config.yaml')
    flags = {'seed': 5, 'router.top_k': None, 'stream.preset': None}
    assert build_config(str(path), flags).seed == 5
    assert build_config(str(path), flags, ['seed=7']).seed == 7
    assert build_config(str(path), flags).router.top_k == 2
    assert build_config(str(path), flags).stream.tasks == [{'name': 'x', 'alpha': 0.5}]
    with_preset = build_config(str(path), {**flags, 'stream.preset': 'twin-pair'})
    assert with_preset.stream.tasks == []
    assert with_preset.stream.preset == 'twin-pair'


def test_run_command_writes_run_directory(tmp_path, capsys):
    path = save_config(tiny_config(tmp_path), tmp_path / 'config.yaml')
    out = tmp_path / 'cli_run'
    code = main(['run', '--config', str(path), '--output-dir', str(out), '--set', 'router.top_k=1'])
    assert code == EXIT_OK
    assert load_config(out / 'config.yaml').router.top_k == 1
    assert ScoreMatrix.load_csv(out / 'score_matrix.csv').is_complete()
    assert 'Average' in capsys.readouterr().out


def test_report_command_exit_codes(run_copy):
    assert main(['report', str(run_copy)]) == EXIT_OK
    (run_copy / 'dynamics.csv').unlink()
    assert main(['report', str(run_copy)]) == EXIT_PARTIAL


def test_report_on_failed_run_is_partial(run_copy):
    manifest = read_manifest(run_copy)
    manifest.status = STATUS_FAILED
    write_manifest(run_copy, manifest)
    assert main(['report', str(run_copy)]) == EXIT_PARTIAL


def test_report_on_corrupt_run_is_runtime_error(run_copy):
    (run_copy / 'routing.csv').write_text('nothing,useful\n', encoding='utf-8')
    assert main(['report', str(run_copy)]) == EXIT_RUNTIME
    assert main(['report', str(run_copy / 'absent')]) == EXIT_USAGE


def test_sweep_at_unit_scale_reproduces_last_row(finished_run):
    frame = sweep_thresholds(finished_run, [1.0])
    scores = ScoreMatrix.load_csv(finished_run / 'score_matrix.csv')
    values = [frame.loc[0, f"last_{name}"] for name in scores.task_names]
    np.testing.assert_array_equal(values, scores.rows[-1])


def test_sweep_admissions_grow_with_scale(run_copy):
    assert main(['sweep-thresholds', str(run_copy), '--scales', '0.1', '1', '10']) == EXIT_OK
    frame = pd.read_csv(run_copy / SWEEP_FILE)
    assert list(frame['scale']) == [0.1, 1.0, 10.0]
    for column in [c for c in frame.columns if c.startswith('admitted_t')]:
        assert list(frame[column]) == sorted(frame[column])
    assert list(frame['holdout_rejection']) == sorted(frame['holdout_rejection'], reverse=True)


def test_sweep_rejects_bad_scale_and_tampered_config(run_copy):
    assert main(['sweep-thresholds', str(run_copy), '--scales', '0']) == EXIT_RUNTIME
    config = load_config(run_copy / 'config.yaml')
    config.seed += 1
    save_config(config, run_copy / 'config.yaml')
    assert main(['sweep-thresholds', str(run_copy)]) == EXIT_RUNTIME


def test_generate_data(tmp_path):
    out = tmp_path / 'data'
    code = main(['generate-data', '--preset', 'desk-3', '--output-dir', str(out), '--no-csv'])
    assert code == EXIT_OK
    names = sorted(p.name for p in out.iterdir())
    assert names == ['00_generic', '01_task1-a0.9', '02_task2-a0.1', '03_task3-a0.5', '04_unseen']
    assert (out / '01_task1-a0.9' / 'train.npz').is_file()
    assert not (out / '01_task1-a0.9' / 'train.csv').exists()


def test_verify_gradients_command(capsys):
    assert main(['verify-gradients', '--trials', '2']) == EXIT_OK
    assert '梯度校验: 验证通过 ✅' in capsys.readouterr().out


def test_verify_gradients_command_reports_failure(monkeypatch, capsys):
    failing = {'results': [{}], 'max_rel_error': 0.3, 'status': 'fail',
               'failed_cases': ['relu'], 'recommendation': 'relu 不一致'}
    monkeypatch.setattr('dmole.cli.verify_gradients', lambda **kwargs: failing)
    assert main(['verify-gradients', '--trials', '1']) == EXIT_RUNTIME
    assert '梯度校验: 需要检查 ⚠️' in capsys.readouterr().out


def test_unexpected_error_is_runtime_exit(monkeypatch, tmp_path, capsys):
    def broken(run_dir):
        raise RuntimeError('disk vanished')

    monkeypatch.setattr('dmole.cli.cmd_report', broken)
    assert main(['report', str(tmp_path)]) == EXIT_RUNTIME
    assert 'RuntimeError: disk vanished' in capsys.readouterr().err


@pytest.mark.parametrize('argv', [['--log-level', 'debug', 'verify-gradients', '--trials', '1', '--no-model']])
def test_global_log_level(argv):
    assert main(argv) == EXIT_OK
