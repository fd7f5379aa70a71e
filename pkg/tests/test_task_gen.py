import numpy as np
import pytest

from dmole.errors import ContractError, GenerationError
from dmole.task_gen import (TaskSpec, build_preset, generate, linear_readout_accuracy, load_dataset,
                            minibatches, save_dataset, subset)


def _spec(**overrides):
    data = dict(task_id=1, name='toy', seed=11, geometry_seed=12, alpha=1.0, shift_seed=13,
                n_train=300, n_test=200)
    data.update(overrides)
    return TaskSpec(**data)


def test_generation_is_deterministic():
    a = generate(_spec(alpha=0.5))
    b = generate(_spec(alpha=0.5))
    np.testing.assert_array_equal(a.train.vision, b.train.vision)
    np.testing.assert_array_equal(a.test.text, b.test.text)
    np.testing.assert_array_equal(a.train.labels, b.train.labels)
    c = generate(_spec(alpha=0.5, seed=99))
    assert not np.array_equal(a.train.vision, c.train.vision)


def test_shapes_and_class_balance():
    data = generate(_spec(alpha=0.5))
    assert data.train.vision.shape == (300, 4, 16)
    assert data.train.text.shape == (300, 6, 32)
    counts = np.bincount(data.train.labels, minlength=4)
    assert counts.max() - counts.min() <= 1


@pytest.mark.parametrize('alpha, informative, blind', [(1.0, 'vision', 'text'), (0.0, 'text', 'vision')])
def test_label_signal_lives_in_one_modality(alpha, informative, blind):
    data = generate(_spec(alpha=alpha))
    assert linear_readout_accuracy(data.train, data.test, (informative,)) >= 0.95
    assert linear_readout_accuracy(data.train, data.test, (blind,)) < 0.45


def test_unlearnable_task_raises_generation_error():
    with pytest.raises(GenerationError, match='toy'):
        generate(_spec(alpha=0.5, class_sep=0.0))


def test_invalid_spec():
    with pytest.raises(ContractError):
        generate(_spec(alpha=1.5))
    with pytest.raises(ContractError):
        generate(_spec(noise=0.0))


def test_twin_pair_shares_distribution_but_not_samples():
    preset = build_preset('twin-pair', 0, n_train=50, n_test=20)
    first, second = preset.tasks
    assert first.geometry_seed == second.geometry_seed
    assert first.shift_seed == second.shift_seed
    assert first.seed != second.seed


def test_heterogeneous_preset_layout():
    preset = build_preset('heterogeneous-5', 0)
    assert [t.alpha for t in preset.tasks] == [0.9, 0.1, 0.7, 0.3, 0.5]
    assert [t.task_id for t in preset.tasks] == [1, 2, 3, 4, 5]
    assert len({t.shift_seed for t in preset.tasks}) == 5
    assert preset.holdout.task_id == 6
    with pytest.raises(ContractError):
        build_preset('nope', 0)


def test_preset_follows_model_dims():
    preset = build_preset('desk-3', 0, model_dims={'d_v': 12, 'd_t': 16, 'unrelated': 1})
    assert preset.tasks[0].d_v == 12
    assert preset.pretrain.d_t == 16


@pytest.mark.parametrize('n, fraction, min_count, expected', [
    (1000, 0.01, 64, 64),
    (10000, 0.01, 64, 100),
    (40, 0.01, 64, 40),
    (500, 0.5, 10, 250),
])
def test_subset_size(n, fraction, min_count, expected):
    split = generate(_spec(n_train=n, n_test=4, alpha=0.5), check_learnable=False).train
    picked = subset(split, fraction, min_count, seed=1)
    assert len(picked) == expected
    again = subset(split, fraction, min_count, seed=1)
    np.testing.assert_array_equal(picked.labels, again.labels)


def test_subset_rejects_bad_fraction():
    split = generate(_spec(n_train=10, n_test=4), check_learnable=False).train
    with pytest.raises(ContractError):
        subset(split, 0.0)


def test_minibatches_cover_every_index_once():
    seen = np.concatenate(list(minibatches(23, 5, np.random.default_rng(0))))
    assert sorted(seen.tolist()) == list(range(23))


def test_save_and_load_dataset(tmp_path):
    data = generate(_spec(n_train=20, n_test=8), check_learnable=False)
    written = save_dataset(data, tmp_path / 'task')
    names = {p.name for p in written}
    assert names == {'train.npz', 'test.npz', 'train.csv', 'test.csv', 'manifest.yaml'}
    loaded = load_dataset(tmp_path / 'task')
    assert loaded.spec == data.spec
    np.testing.assert_array_equal(loaded.test.vision, data.test.vision)
