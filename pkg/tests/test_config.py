from pathlib import Path

import pytest

from dmole.config import (RunConfig, apply_overrides, config_hash, flatten_config, load_config,
                          parse_set_overrides, resolve_output_dir, save_config)
from dmole.errors import ConfigError, UsageError

EXAMPLE_CONFIG = Path(__file__).resolve().parent.parent / 'configs' / 'heterogeneous5.yaml'


def test_example_config_matches_defaults():
    config = load_config(EXAMPLE_CONFIG).validate()
    assert config.stream.preset == 'heterogeneous-5'
    assert config.b_total == 5
    assert config.router.top_k == 2
    assert config.model == RunConfig().model


def test_save_and_load_round_trip(tmp_path):
    config = RunConfig.from_dict({'seed': 3, 'strategy': 'mola', 'router': {'top_k': 1}})
    path = save_config(config, tmp_path / 'config.yaml')
    loaded = load_config(path)
    assert loaded == config
    assert config_hash(loaded) == config_hash(config)


def test_hash_changes_with_content():
    assert config_hash(RunConfig(seed=1)) != config_hash(RunConfig(seed=2))


def test_missing_file_is_usage_error(tmp_path):
    with pytest.raises(UsageError, match='config not found'):
        load_config(tmp_path / 'nope.yaml')


def test_unknown_fields_are_rejected(tmp_path):
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({'router': {'topk': 2}})
    assert info.value.field == 'router.topk'
    bad = tmp_path / 'bad.yaml'
    bad.write_text('- just\n- a list\n', encoding='utf-8')
    with pytest.raises(ConfigError):
        load_config(bad)


@pytest.mark.parametrize('data, field', [
    ({'strategy': 'magic'}, 'strategy'),
    ({'seed': -1}, 'seed'),
    ({'router': {'top_k': 0}}, 'router.top_k'),
    ({'router': {'features': 'all'}}, 'router.features'),
    ({'allocation': {'b_total': 11}}, 'allocation.b_total'),
    ({'allocation': {'budget_ratio': 0.0}}, 'allocation.budget_ratio'),
    ({'stream': {'preset': 'huge'}}, 'stream.preset'),
    ({'stream': {'tasks': [{'name': 'x'}]}}, 'stream.tasks[0].alpha'),
    ({'training': {'lr': 0}}, 'training.lr'),
    ({'model': {'lora_rank': 16}}, 'model.lora_rank'),
])
def test_validation_names_the_field(data, field):
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict(data).validate()
    assert info.value.field == field


def test_set_overrides_parse_yaml_scalars():
    overrides = parse_set_overrides(['router.top_k=1', 'router.lr=0.01', 'strategy=seq_ft'])
    assert overrides == {'router.top_k': 1, 'router.lr': 0.01, 'strategy': 'seq_ft'}
    with pytest.raises(UsageError):
        parse_set_overrides(['router.top_k'])


def test_apply_overrides_returns_new_config():
    base = RunConfig()
    changed = apply_overrides(base, {'router.top_k': 1, 'seed': 9, 'stream.n_train': None})
    assert changed.router.top_k == 1 and changed.seed == 9
    assert base.router.top_k == 2
    assert changed.stream.n_train is None
    with pytest.raises(ConfigError):
        apply_overrides(base, {'router.nope': 1})
    with pytest.raises(ConfigError):
        apply_overrides(base, {'nope.top_k': 1})


def test_flatten_config():
    flat = flatten_config(RunConfig().to_dict())
    assert flat['router.threshold_scale'] == 1.2
    assert flat['model.d_t'] == 32


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv('DMOLE_OUTPUT_ROOT', str(tmp_path))
    assert resolve_output_dir(RunConfig(output_dir='runs/a')) == tmp_path / 'runs' / 'a'
    assert resolve_output_dir(RunConfig(output_dir=str(tmp_path / 'abs'))) == tmp_path / 'abs'
    monkeypatch.delenv('DMOLE_OUTPUT_ROOT')
    assert resolve_output_dir(RunConfig(output_dir='runs/a')) == Path('runs/a')
