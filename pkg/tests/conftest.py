import shutil
from pathlib import Path

import numpy as np
import pytest

from dmole.config import RunConfig
from dmole.continual_trainer import prepare_stream, run_stream
from dmole.task_gen import Split
from dmole.toy_model import ModelConfig, freeze_backbone, init_toy_model

TINY_MODEL = dict(d_v=12, d_t=16, n_vision_layers=2, n_llm_layers=2, n_vision_tokens=2,
                  n_text_tokens=3, n_classes=4, lora_rank=2)


def tiny_config(tmp_path=None, **top) -> RunConfig:
    """小模型 + desk-3 任务流，单元测试几秒内跑完"""
    data = {
        'seed': 0,
        'strategy': 'dmole',
        'output_dir': str(tmp_path / 'run') if tmp_path is not None else 'runs/test',
        'stream': {'preset': 'desk-3', 'n_train': 160, 'n_test': 48},
        'model': dict(TINY_MODEL),
        'allocation': {'subset_fraction': 0.01, 'subset_min': 32},
        'router': {'hidden': 16, 'epochs': 15, 'lr': 0.005, 'batch_size': 16},
        'training': {'epochs': 1, 'lr': 0.005, 'batch_size': 32, 'eval_batch_size': 64},
        'pretrain': {'n_train': 200, 'epochs': 1, 'lr': 0.005, 'batch_size': 32},
    }
    data.update(top)
    return RunConfig.from_dict(data).validate()


@pytest.fixture
def model_config():
    return ModelConfig(**TINY_MODEL)


@pytest.fixture
def tiny_model(model_config):
    model = init_toy_model(model_config, seed=3)
    freeze_backbone(model)
    return model


@pytest.fixture
def run_config(tmp_path):
    return tiny_config(tmp_path)


@pytest.fixture
def stream_data(run_config):
    return prepare_stream(run_config)


def random_split(config: ModelConfig, n: int, seed: int = 0) -> Split:
    rng = np.random.default_rng(seed)
    return Split(rng.normal(size=(n, config.n_vision_tokens, config.d_v)),
                 rng.normal(size=(n, config.n_text_tokens, config.d_t)),
                 rng.integers(0, config.n_classes, size=n))


@pytest.fixture(scope='session')
def finished_run(tmp_path_factory):
    """整个测试会话共享的一次完整运行（只读）"""
    config = tiny_config(tmp_path_factory.mktemp('finished'))
    return run_stream(config).run_dir


@pytest.fixture
def run_copy(finished_run, tmp_path):
    """可以随意改动的运行目录副本"""
    return Path(shutil.copytree(finished_run, tmp_path / 'run_copy'))
