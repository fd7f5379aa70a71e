import numpy as np
import pytest

from dmole.checkpoint import MANIFEST, load_checkpoint, save_checkpoint
from dmole.errors import ArtifactError
from dmole.experts import ExpertBank
from dmole.router import calibrate_threshold, train_autoencoder
from dmole.toy_model import backbone_checksum, pooled_features, predict

from conftest import random_split


@pytest.fixture
def trained_parts(tiny_model, model_config):
    rng = np.random.default_rng(0)
    bank = ExpertBank()
    indicators = {'vision': [1, 0], 'llm': [0, 1]}
    for expert in bank.allocate(1, indicators, model_config.widths(), model_config.lora_rank, rng):
        expert.B.data = rng.normal(size=expert.B.shape)
    data = random_split(model_config, 12)
    feats = pooled_features(tiny_model, data.vision, data.text)
    ae = train_autoencoder(feats, 1, hidden=4, epochs=2, seed=0)
    calibrate_threshold(ae, feats)
    return tiny_model, bank, {1: ae}, data


def test_round_trip_is_exact(tmp_path, trained_parts, model_config):
    model, bank, routers, data = trained_parts
    files = save_checkpoint(tmp_path / 'ckpt', model, bank, routers)
    assert tmp_path / 'ckpt' / MANIFEST in files

    loaded_model, loaded_bank, loaded_routers = load_checkpoint(tmp_path / 'ckpt')
    assert loaded_model.config == model_config
    assert backbone_checksum(loaded_model) == backbone_checksum(model)
    for key, expert in bank.experts.items():
        other = loaded_bank.experts[key]
        assert other.A.data.tobytes() == expert.A.data.tobytes()
        assert other.B.data.tobytes() == expert.B.data.tobytes()
    assert loaded_bank.indicators == bank.indicators

    ae, other = routers[1], loaded_routers[1]
    assert other.threshold == ae.threshold
    assert other.threshold_scale == ae.threshold_scale
    feats = pooled_features(model, data.vision, data.text)
    np.testing.assert_array_equal(other.reconstruction_loss(feats), ae.reconstruction_loss(feats))
    np.testing.assert_array_equal(predict(loaded_model, loaded_bank, (1,), data.vision, data.text),
                                  predict(model, bank, (1,), data.vision, data.text))


def test_loaded_parameters_are_frozen(tmp_path, trained_parts):
    model, bank, routers, _ = trained_parts
    save_checkpoint(tmp_path, model, bank, routers)
    loaded_model, loaded_bank, loaded_routers = load_checkpoint(tmp_path)
    tensors = loaded_model.backbone_params() + loaded_bank.parameters() + loaded_routers[1].parameters()
    assert all(not t.requires_grad for t in tensors)


def test_missing_manifest(tmp_path):
    with pytest.raises(ArtifactError, match=MANIFEST):
        load_checkpoint(tmp_path)


def test_corrupt_parameter_file(tmp_path, trained_parts):
    model, bank, routers, _ = trained_parts
    save_checkpoint(tmp_path, model, bank, routers)
    (tmp_path / 'head.b.npy').write_bytes(b'not a numpy file')
    with pytest.raises(ArtifactError, match='head.b.npy'):
        load_checkpoint(tmp_path)


def test_shape_mismatch(tmp_path, trained_parts):
    model, bank, routers, _ = trained_parts
    save_checkpoint(tmp_path, model, bank, routers)
    np.save(tmp_path / 'projector.b.npy', np.zeros((1, 3)))
    with pytest.raises(ArtifactError, match='projector.b'):
        load_checkpoint(tmp_path)
