"""
自编码器路由模块 - 每个任务一个两层自编码器，按重构误差做相关任务筛选、排序和 top-K 门控
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .autograd import ComputationTape, Tensor, add, backward, matmul, mse_loss, relu
from .errors import ContractError
from .log_utils import get_logger
from .optim import Optimizer

logger = get_logger(__name__)

DEFAULT_HIDDEN = 128
DEFAULT_EPOCHS = 100
DEFAULT_LR = 1e-3
DEFAULT_SCALE = 1.2
DEFAULT_TOP_K = 2


class TaskAutoencoder:
    """
    任务自编码器: 编码器 D→h（ReLU），解码器 h→D

    threshold 只在训练完成后由 calibrate_threshold 设置。
    """

    def __init__(self, task_id: int, input_dim: int, hidden: int = DEFAULT_HIDDEN, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.task_id = task_id
        self.input_dim = input_dim
        self.hidden = hidden
        prefix = f"router.t{task_id}"
        self.enc_W = Tensor(rng.normal(0.0, np.sqrt(2.0 / (input_dim + hidden)), size=(input_dim, hidden)),
                            requires_grad=True, name=f"{prefix}.enc_W")
        self.enc_b = Tensor(np.zeros((1, hidden)), requires_grad=True, name=f"{prefix}.enc_b")
        self.dec_W = Tensor(rng.normal(0.0, np.sqrt(2.0 / (input_dim + hidden)), size=(hidden, input_dim)),
                            requires_grad=True, name=f"{prefix}.dec_W")
        self.dec_b = Tensor(np.zeros((1, input_dim)), requires_grad=True, name=f"{prefix}.dec_b")
        self.threshold: Optional[float] = None
        self.max_train_loss: Optional[float] = None
        self.threshold_scale: Optional[float] = None
        self.trained = False
        self.loss_history: List[float] = []

    def parameters(self) -> List[Tensor]:
        return [self.enc_W, self.enc_b, self.dec_W, self.dec_b]

    def reconstruct(self, z: Union[np.ndarray, Tensor]) -> Tensor:
        x = z if isinstance(z, Tensor) else Tensor(np.atleast_2d(z))
        hidden = relu(add(matmul(x, self.enc_W), self.enc_b))
        return add(matmul(hidden, self.dec_W), self.dec_b)

    def reconstruction_loss(self, z: np.ndarray) -> np.ndarray:
        """每个样本的重构损失: 各坐标 (z − ẑ)² 的平均"""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        z_hat = self.reconstruct(z).data
        return np.mean((z - z_hat) ** 2, axis=1)


@dataclass
class RoutingDecision:
    """
    一次路由结果

    relevant: 重构损失不超过阈值的任务；ranking: 相关任务按损失升序；
    active: ranking 的前 min(K, |R|) 个；fallback 当且仅当 relevant 为空
    """
    losses: Dict[int, float]
    relevant: Tuple[int, ...]
    ranking: Tuple[int, ...]
    active: Tuple[int, ...]
    fallback: bool

    def gate(self, task_id: int) -> int:
        return 1 if task_id in self.active else 0


def train_autoencoder(features: np.ndarray, task_id: int, hidden: int = DEFAULT_HIDDEN,
                      epochs: int = DEFAULT_EPOCHS, learning_rate: float = DEFAULT_LR,
                      batch_size: int = 16, seed: int = 0) -> TaskAutoencoder:
    """
    用 Adam 最小化均方重构误差

    Args:
        features: (N, D) 池化特征，N ≥ 2
        task_id: 任务编号
        hidden: 隐藏宽度
        epochs: 训练轮数
        learning_rate: 学习率
        batch_size: 批大小
        seed: 初始化与打乱顺序的种子

    Returns:
        训练完成的 TaskAutoencoder（loss_history 记录每轮平均损失，第0项为训练前损失）
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ContractError(f"训练自编码器至少需要2个特征向量，收到形状 {features.shape}")

    ae = TaskAutoencoder(task_id, features.shape[1], hidden=hidden, seed=seed)
    rng = np.random.default_rng(seed + 1)
    opt = Optimizer(ae.parameters(), learning_rate, variant='adam')
    ae.loss_history.append(float(np.mean(ae.reconstruction_loss(features))))

    n = features.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = features[order[start:start + batch_size]]
            opt.zero_grad()
            with ComputationTape():
                loss = mse_loss(ae.reconstruct(batch), batch)
            backward(loss)
            opt.step()
        ae.loss_history.append(float(np.mean(ae.reconstruction_loss(features))))
    opt.zero_grad()

    for p in ae.parameters():
        p.requires_grad = False
    ae.trained = True
    logger.info(f"任务 {task_id} 自编码器: loss {ae.loss_history[0]:.4f} → {ae.loss_history[-1]:.4f}")
    return ae


def calibrate_threshold(ae: TaskAutoencoder, training_features: np.ndarray,
                        scale: float = DEFAULT_SCALE) -> float:
    """
    阈值 τ = scale × 训练特征上的最大重构损失
    """
    if not ae.trained:
        raise ContractError(f"任务 {ae.task_id} 的自编码器尚未训练，不能设置阈值")
    if scale <= 0:
        raise ContractError(f"scale 必须为正数，收到 {scale}")
    ae.max_train_loss = float(np.max(ae.reconstruction_loss(training_features)))
    ae.threshold_scale = float(scale)
    ae.threshold = ae.threshold_scale * ae.max_train_loss
    return ae.threshold


def _decide(losses: Dict[int, float], thresholds: Dict[int, float], k: int) -> RoutingDecision:
    relevant = tuple(sorted(t for t, loss in losses.items() if loss <= thresholds[t]))
    ranking = tuple(sorted(relevant, key=lambda t: (losses[t], t)))
    active = ranking[:k]
    return RoutingDecision(losses=dict(losses), relevant=relevant, ranking=ranking,
                           active=active, fallback=not relevant)


def _thresholds(routers: Sequence[TaskAutoencoder], threshold_factor: float) -> Dict[int, float]:
    thresholds = {}
    for ae in routers:
        if ae.threshold is None:
            raise ContractError(f"任务 {ae.task_id} 的自编码器没有阈值")
        thresholds[ae.task_id] = ae.threshold * threshold_factor
    return thresholds


def route(routers: Sequence[TaskAutoencoder], z: np.ndarray, k: int = DEFAULT_TOP_K,
          threshold_factor: float = 1.0) -> RoutingDecision:
    """
    单个样本的路由

    R = {t : L_rec^t(z) ≤ τ_t}，按损失升序排名，取前 K 个激活；R 为空时回退到预训练主干。

    Args:
        routers: 已训练并标定的自编码器
        z: 一个池化特征向量
        k: top-K
        threshold_factor: 所有阈值统一乘的缩放系数（阈值敏感性扫描用）
    """
    if k < 1:
        raise ContractError(f"K 必须 ≥ 1，收到 {k}")
    thresholds = _thresholds(routers, threshold_factor)
    losses = {ae.task_id: float(ae.reconstruction_loss(z)[0]) for ae in routers}
    return _decide(losses, thresholds, k)


def route_batch(routers: Sequence[TaskAutoencoder], features: np.ndarray, k: int = DEFAULT_TOP_K,
                threshold_factor: float = 1.0) -> List[RoutingDecision]:
    """逐样本路由一批特征（每个自编码器只做一次批量前向）"""
    if k < 1:
        raise ContractError(f"K 必须 ≥ 1，收到 {k}")
    features = np.atleast_2d(features)
    if not routers:
        return [RoutingDecision({}, (), (), (), True) for _ in range(features.shape[0])]
    thresholds = _thresholds(routers, threshold_factor)
    loss_table = {ae.task_id: ae.reconstruction_loss(features) for ae in routers}
    return [_decide({t: float(loss_table[t][i]) for t in loss_table}, thresholds, k)
            for i in range(features.shape[0])]


def select_transfer_expert(routers: Sequence[TaskAutoencoder], features: np.ndarray) -> Optional[int]:
    """
    训练阶段选择迁移专家: 之前任务中在当前特征上平均重构损失最低的那个

    没有之前的任务时返回 None。
    """
    if not routers:
        return None
    means = [(float(np.mean(ae.reconstruction_loss(features))), ae.task_id) for ae in routers]
    return min(means)[1]


def export_router_embeddings(routers: Sequence[TaskAutoencoder], features_by_task: Dict[int, np.ndarray],
                             path: Union[str, Path], max_samples: int = 200) -> Path:
    """
    导出每个任务的嵌入样本及其在各路由器上的重构损失，供外部可视化

    列: source_task, sample, z0..z{D-1}, loss_t{k}...
    """
    frames = []
    for source_task, features in sorted(features_by_task.items()):
        features = np.atleast_2d(features)[:max_samples]
        frame = pd.DataFrame(features).add_prefix('z')
        for ae in routers:
            frame[f"loss_t{ae.task_id}"] = ae.reconstruction_loss(features)
        frame.insert(0, 'sample', np.arange(features.shape[0]))
        frame.insert(0, 'source_task', source_task)
        frames.append(frame)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=['source_task', 'sample'])
    table.to_csv(path, index=False)
    return path
