"""
检查点模块 - 每个命名参数一个 .npy 文件 + manifest.yaml（名字、形状、任务号、指示变量、路由阈值）
"""
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
import yaml

from .autograd import Tensor
from .errors import ArtifactError
from .experts import ExpertBank, LoraExpert
from .router import TaskAutoencoder
from .toy_model import ModelConfig, ToyMLLM

MANIFEST = 'manifest.yaml'


def _save_array(directory: Path, name: str, array: np.ndarray) -> str:
    filename = f"{name}.npy"
    np.save(directory / filename, array, allow_pickle=False)
    return filename


def _load_array(directory: Path, filename: str) -> np.ndarray:
    path = directory / filename
    try:
        return np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise ArtifactError(f"无法读取参数文件（{exc}）", [path]) from exc


def save_checkpoint(directory: Union[str, Path], model: ToyMLLM, bank: ExpertBank,
                    routers: Dict[int, TaskAutoencoder]) -> List[Path]:
    """
    保存模型、专家库和路由器

    Returns:
        写出的文件列表（含 manifest）
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {'model_config': model.config.to_dict(), 'params': [], 'experts': [],
                'indicators': [], 'routers': []}

    for name, p in model.params.items():
        manifest['params'].append({'name': name, 'shape': list(p.shape),
                                   'file': _save_array(directory, name, p.data)})

    for key, expert in sorted(bank.experts.items()):
        prefix = f"expert.t{expert.task_id}.{expert.module}.{expert.layer}.{expert.slot}"
        manifest['experts'].append({
            'task_id': expert.task_id, 'module': expert.module, 'layer': expert.layer,
            'slot': expert.slot, 'rank': expert.rank,
            'A': _save_array(directory, f"{prefix}.A", expert.A.data),
            'B': _save_array(directory, f"{prefix}.B", expert.B.data),
        })
    for (module, layer, task_id), flag in sorted(bank.indicators.items()):
        manifest['indicators'].append({'module': module, 'layer': layer, 'task_id': task_id, 'value': int(flag)})

    for task_id, ae in sorted(routers.items()):
        entry = {'task_id': task_id, 'input_dim': ae.input_dim, 'hidden': ae.hidden,
                 'threshold': ae.threshold, 'max_train_loss': ae.max_train_loss,
                 'threshold_scale': ae.threshold_scale, 'files': {}}
        for tensor in ae.parameters():
            field_name = tensor.name.rsplit('.', 1)[-1]
            entry['files'][field_name] = _save_array(directory, tensor.name, tensor.data)
        manifest['routers'].append(entry)

    manifest_path = directory / MANIFEST
    manifest_path.write_text(yaml.safe_dump(manifest, sort_keys=False), encoding='utf-8')
    return sorted(directory.iterdir())


def load_checkpoint(directory: Union[str, Path]) -> Tuple[ToyMLLM, ExpertBank, Dict[int, TaskAutoencoder]]:
    """读取检查点；所有参数都处于冻结状态"""
    directory = Path(directory)
    manifest_path = directory / MANIFEST
    if not manifest_path.is_file():
        raise ArtifactError("检查点缺少 manifest", [manifest_path])
    try:
        manifest = yaml.safe_load(manifest_path.read_text(encoding='utf-8'))
    except yaml.YAMLError as exc:
        raise ArtifactError(f"manifest 无法解析（{exc}）", [manifest_path]) from exc

    config = ModelConfig.from_dict(manifest['model_config'])
    params = {}
    for entry in manifest['params']:
        array = _load_array(directory, entry['file'])
        if list(array.shape) != entry['shape']:
            raise ArtifactError(f"{entry['name']} 形状与 manifest 不一致", [directory / entry['file']])
        params[entry['name']] = Tensor(array, name=entry['name'])
    model = ToyMLLM(config, params)

    bank = ExpertBank()
    for entry in manifest['experts']:
        prefix = f"expert.t{entry['task_id']}.{entry['module']}.{entry['layer']}.{entry['slot']}"
        bank.add_expert(LoraExpert(
            task_id=entry['task_id'], module=entry['module'], layer=entry['layer'], slot=entry['slot'],
            A=Tensor(_load_array(directory, entry['A']), name=f"{prefix}.A"),
            B=Tensor(_load_array(directory, entry['B']), name=f"{prefix}.B"),
        ))
    for entry in manifest['indicators']:
        bank.indicators[(entry['module'], entry['layer'], entry['task_id'])] = int(entry['value'])

    routers = {}
    for entry in manifest['routers']:
        ae = TaskAutoencoder(entry['task_id'], entry['input_dim'], hidden=entry['hidden'])
        for tensor in ae.parameters():
            field_name = tensor.name.rsplit('.', 1)[-1]
            tensor.data = _load_array(directory, entry['files'][field_name])
            tensor.requires_grad = False
        ae.threshold = entry['threshold']
        ae.max_train_loss = entry['max_train_loss']
        ae.threshold_scale = entry['threshold_scale']
        ae.trained = True
        routers[entry['task_id']] = ae
    return model, bank, routers
