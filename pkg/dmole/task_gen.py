"""
合成任务生成模块 - 可复现的多模态分类任务流

每个任务两个 token 流（视觉、文本），类别信息按 alpha 在两个模态之间分配:
    视觉类别均值 = alpha × sep × u_v[c]，文本类别均值 = (1 - alpha) × sep × u_t[c]
alpha = 1 时只有视觉携带标签信息，alpha = 0 时只有文本携带。
分布偏移种子决定每个任务的随机正交旋转和整体平移，使不同任务的特征簇可区分。
"""
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import yaml

from .errors import ContractError, GenerationError
from .log_utils import get_logger
from .seeding import derive_seed

logger = get_logger(__name__)

PRESETS = ('heterogeneous-5', 'twin-pair', 'desk-3')
READOUT_MIN_ACCURACY = 0.95


@dataclass
class TaskSpec:
    """单个合成任务的生成参数"""
    task_id: int
    name: str
    seed: int
    geometry_seed: int
    alpha: float
    shift_seed: Optional[int] = None
    n_train: int = 600
    n_test: int = 200
    n_classes: int = 4
    d_v: int = 16
    d_t: int = 32
    n_vision_tokens: int = 4
    n_text_tokens: int = 6
    class_sep: float = 1.0
    noise: float = 1.0
    shift_scale: float = 2.0

    def validate(self) -> 'TaskSpec':
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"{self.name}: alpha 必须在 [0, 1] 内，收到 {self.alpha}")
        for name in ('n_train', 'n_test', 'n_classes', 'd_v', 'd_t', 'n_vision_tokens', 'n_text_tokens'):
            if getattr(self, name) <= 0:
                raise ContractError(f"{self.name}: {name} 必须为正数")
        if self.noise <= 0:
            raise ContractError(f"{self.name}: noise 必须为正数")
        return self

    @property
    def distribution_shift(self) -> str:
        return 'none' if self.shift_seed is None else f"shift-{self.shift_seed % 100000:05d}"

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class Split:
    """一个数据划分: vision (N, Nv, d_v), text (N, Nt, d_t), labels (N,)"""
    vision: np.ndarray
    text: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def take(self, idx: Sequence[int]) -> 'Split':
        idx = np.asarray(idx, dtype=np.int64)
        return Split(self.vision[idx], self.text[idx], self.labels[idx])


@dataclass
class TaskDataset:
    spec: TaskSpec
    train: Split
    test: Split


@dataclass
class StreamPreset:
    """有序任务流 + 一个从不训练的留出任务（用于测试未知任务回退）"""
    name: str
    tasks: List[TaskSpec]
    holdout: Optional[TaskSpec] = None
    pretrain: Optional[TaskSpec] = None
    notes: Dict = field(default_factory=dict)


# ==================== 生成 ====================

def _random_rotation(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def _task_geometry(spec: TaskSpec) -> Dict[str, np.ndarray]:
    geo = np.random.default_rng(spec.geometry_seed)
    u_v = geo.normal(size=(spec.n_classes, spec.d_v))
    u_t = geo.normal(size=(spec.n_classes, spec.d_t))
    geometry = {
        'mu_v': spec.alpha * spec.class_sep * u_v,
        'mu_t': (1.0 - spec.alpha) * spec.class_sep * u_t,
        'rot_v': np.eye(spec.d_v),
        'rot_t': np.eye(spec.d_t),
        'off_v': np.zeros(spec.d_v),
        'off_t': np.zeros(spec.d_t),
    }
    if spec.shift_seed is not None:
        shift = np.random.default_rng(spec.shift_seed)
        geometry['rot_v'] = _random_rotation(shift, spec.d_v)
        geometry['rot_t'] = _random_rotation(shift, spec.d_t)
        geometry['off_v'] = spec.shift_scale * shift.normal(size=spec.d_v)
        geometry['off_t'] = spec.shift_scale * shift.normal(size=spec.d_t)
    return geometry


def _sample_split(spec: TaskSpec, geometry: Dict[str, np.ndarray], n: int,
                  rng: np.random.Generator) -> Split:
    # 类别均衡：先按顺序铺满再打乱
    labels = rng.permutation(np.arange(n) % spec.n_classes)
    vision = geometry['mu_v'][labels][:, None, :] + spec.noise * rng.normal(
        size=(n, spec.n_vision_tokens, spec.d_v))
    text = geometry['mu_t'][labels][:, None, :] + spec.noise * rng.normal(
        size=(n, spec.n_text_tokens, spec.d_t))
    vision = vision @ geometry['rot_v'] + geometry['off_v']
    text = text @ geometry['rot_t'] + geometry['off_t']
    return Split(vision, text, labels.astype(np.int64))


def linear_readout_accuracy(train: Split, test: Split, modalities: Sequence[str] = ('vision', 'text'),
                          ridge: float = 1.0) -> float:
    """
    线性读出：在拼接的原始 token 上做岭回归到 one-hot，返回测试准确率

    特征先按训练集均值中心化；正则强度为 ridge × 训练样本数，样本数接近特征维数时也不会过拟合。
    """
    def features(split: Split) -> np.ndarray:
        return np.concatenate([getattr(split, m).reshape(len(split), -1) for m in modalities], axis=1)

    x_train = features(train)
    center = x_train.mean(axis=0)
    x_train = x_train - center
    n_classes = int(max(train.labels.max(), test.labels.max())) + 1
    y_train = np.eye(n_classes)[train.labels]
    y_mean = y_train.mean(axis=0)
    gram = x_train.T @ x_train + ridge * len(train) * np.eye(x_train.shape[1])
    weights = np.linalg.solve(gram, x_train.T @ (y_train - y_mean))
    preds = np.argmax((features(test) - center) @ weights + y_mean, axis=1)
    return float(np.mean(preds == test.labels))


def generate(spec: TaskSpec, check_learnable: bool = True) -> TaskDataset:
    """
    生成一个任务的训练/测试集

    Args:
        spec: 任务参数
        check_learnable: 是否用线性读出确认任务可学习

    Returns:
        TaskDataset

    Raises:
        GenerationError: 线性读出准确率低于 0.95
    """
    spec.validate()
    geometry = _task_geometry(spec)
    rng = np.random.default_rng(spec.seed)
    train = _sample_split(spec, geometry, spec.n_train, rng)
    test = _sample_split(spec, geometry, spec.n_test, rng)

    if check_learnable:
        accuracy = linear_readout_accuracy(train, test)
        if accuracy < READOUT_MIN_ACCURACY:
            raise GenerationError(
                f"{spec.name}: 线性读出准确率 {accuracy:.3f} < {READOUT_MIN_ACCURACY}"
                f"（alpha={spec.alpha}, class_sep={spec.class_sep}, noise={spec.noise}）")
        logger.debug(f"{spec.name}: 读出准确率 {accuracy:.3f}")
    return TaskDataset(spec, train, test)


def subset(split: Split, fraction: float = 0.01, min_count: int = 64, seed: int = 0) -> Split:
    """
    无放回均匀采样: 大小 = max(ceil(fraction·N), min(min_count, N))
    """
    if not 0.0 < fraction <= 1.0:
        raise ContractError(f"fraction 必须在 (0, 1] 内，收到 {fraction}")
    n = len(split)
    size = min(n, max(math.ceil(fraction * n), min(min_count, n)))
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=size, replace=False))
    return split.take(idx)


def minibatches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
    """按批产生样本下标；给了 rng 时先打乱"""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# ==================== 预设任务流 ====================

def _dims(model_dims: Optional[Dict]) -> Dict:
    dims = {'d_v': 16, 'd_t': 32, 'n_vision_tokens': 4, 'n_text_tokens': 6, 'n_classes': 4}
    if model_dims:
        dims.update({k: v for k, v in model_dims.items() if k in dims})
    return dims


def pretrain_spec(root_seed: int, n_train: int, model_dims: Optional[Dict] = None) -> TaskSpec:
    """预训练用的通用任务（两个模态各携带一半信息，无分布偏移）"""
    return TaskSpec(task_id=0, name='generic', alpha=0.5, n_train=n_train, n_test=max(1, n_train // 5),
                    seed=derive_seed(root_seed, 'task-gen', 'pretrain-sample'),
                    geometry_seed=derive_seed(root_seed, 'task-gen', 'pretrain-geometry'),
                    **_dims(model_dims))


def build_preset(name: str, root_seed: int, n_train: Optional[int] = None, n_test: Optional[int] = None,
                 model_dims: Optional[Dict] = None, pretrain_n: int = 1000) -> StreamPreset:
    """
    构建预设任务流

    - heterogeneous-5: 5个任务，alpha 依次为 0.9, 0.1, 0.7, 0.3, 0.5，类别几何与分布偏移各不相同
    - twin-pair: 两个同分布任务（共享几何和偏移，只有样本种子不同）
    - desk-3: 3个小任务，测试用
    """
    dims = _dims(model_dims)

    def spec(task_id, label, alpha, geometry_key, shift_key, default_train, default_test):
        return TaskSpec(
            task_id=task_id, name=label, alpha=alpha,
            seed=derive_seed(root_seed, 'task-gen', name, 'sample', task_id),
            geometry_seed=derive_seed(root_seed, 'task-gen', name, 'geometry', geometry_key),
            shift_seed=derive_seed(root_seed, 'task-gen', name, 'shift', shift_key),
            n_train=n_train or default_train, n_test=n_test or default_test, **dims)

    if name == 'heterogeneous-5':
        alphas = [0.9, 0.1, 0.7, 0.3, 0.5]
        tasks = [spec(i + 1, f"task{i + 1}-a{a:.1f}", a, i + 1, i + 1, 600, 200) for i, a in enumerate(alphas)]
        holdout = spec(len(tasks) + 1, 'unseen', 0.5, 'holdout', 'holdout', 600, 200)
    elif name == 'twin-pair':
        tasks = [spec(i + 1, f"twin{i + 1}", 0.5, 'shared', 'shared', 600, 200) for i in range(2)]
        holdout = spec(3, 'unseen', 0.5, 'holdout', 'holdout', 600, 200)
    elif name == 'desk-3':
        alphas = [0.9, 0.1, 0.5]
        tasks = [spec(i + 1, f"task{i + 1}-a{a:.1f}", a, i + 1, i + 1, 240, 120) for i, a in enumerate(alphas)]
        holdout = spec(len(tasks) + 1, 'unseen', 0.5, 'holdout', 'holdout', 240, 120)
    else:
        raise ContractError(f"未知的预设: {name}（可选: {', '.join(PRESETS)}）")

    return StreamPreset(name=name, tasks=tasks, holdout=holdout,
                        pretrain=pretrain_spec(root_seed, pretrain_n, dims))


# ==================== 导出 ====================

def save_dataset(dataset: TaskDataset, out_dir: Union[str, Path], export_csv: bool = True) -> List[Path]:
    """
    保存数据集：每个划分一个 .npz，另有 manifest.yaml 与可选的 CSV 导出

    Returns:
        写出的文件列表
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    manifest = {'spec': dataset.spec.to_dict(), 'splits': {}}
    for split_name in ('train', 'test'):
        split = getattr(dataset, split_name)
        path = out_dir / f"{split_name}.npz"
        np.savez(path, vision=split.vision, text=split.text, labels=split.labels)
        written.append(path)
        manifest['splits'][split_name] = {
            'file': path.name,
            'vision_shape': list(split.vision.shape),
            'text_shape': list(split.text.shape),
            'n': len(split),
        }
        if export_csv:
            frame = pd.DataFrame(split.vision.reshape(len(split), -1)).add_prefix('v')
            frame = frame.join(pd.DataFrame(split.text.reshape(len(split), -1)).add_prefix('t'))
            frame.insert(0, 'label', split.labels)
            csv_path = out_dir / f"{split_name}.csv"
            frame.to_csv(csv_path, index_label='sample')
            written.append(csv_path)

    manifest_path = out_dir / 'manifest.yaml'
    manifest_path.write_text(yaml.safe_dump(manifest, sort_keys=False, allow_unicode=True), encoding='utf-8')
    written.append(manifest_path)
    return written


def load_dataset(in_dir: Union[str, Path]) -> TaskDataset:
    in_dir = Path(in_dir)
    manifest = yaml.safe_load((in_dir / 'manifest.yaml').read_text(encoding='utf-8'))
    splits = {}
    for split_name, info in manifest['splits'].items():
        with np.load(in_dir / info['file']) as arrays:
            splits[split_name] = Split(arrays['vision'], arrays['text'], arrays['labels'])
    return TaskDataset(TaskSpec(**manifest['spec']), splits['train'], splits['test'])
