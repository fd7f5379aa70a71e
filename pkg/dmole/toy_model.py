"""
双塔玩具多模态模型 - 视觉塔 + 投影器 + 语言塔 + 分类头

每个块: x ← x + ReLU(x·W1 + b1)·W2 + b2，W1/W2 两个子槽都可以挂载按任务划分的 LoRA 专家。
某一层某一子槽的输出按混合规则计算:
    x·W⁰ + Σ_{k 被门控激活} x·ΔWᵏ
"""
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterable, List, Tuple

import numpy as np

from .autograd import (ComputationTape, Tensor, add, backward, concat_groups, matmul,
                       max_over_rows, relu, softmax_cross_entropy)
from .errors import ConfigError, ContractError
from .experts import LLM, MODULES, SLOTS, VISION, ExpertBank, LoraExpert, checksum_arrays
from .log_utils import get_logger
from .optim import Optimizer

logger = get_logger(__name__)


@dataclass
class ModelConfig:
    """玩具模型的尺寸配置（默认值对应桌面规模实验）"""
    d_v: int = 16
    d_t: int = 32
    n_vision_layers: int = 4
    n_llm_layers: int = 6
    n_vision_tokens: int = 4
    n_text_tokens: int = 6
    n_classes: int = 4
    lora_rank: int = 8

    def validate(self) -> 'ModelConfig':
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"model.{f.name}", f"必须为正整数，收到 {value!r}")
        if self.n_classes < 2:
            raise ConfigError('model.n_classes', "至少需要2个类别")
        if self.lora_rank >= min(self.d_v, self.d_t):
            raise ConfigError('model.lora_rank',
                              f"必须小于 min(d_v, d_t) = {min(self.d_v, self.d_t)}")
        return self

    def width(self, module: str) -> int:
        return self.d_v if module == VISION else self.d_t

    def n_layers(self, module: str) -> int:
        return self.n_vision_layers if module == VISION else self.n_llm_layers

    @property
    def total_layers(self) -> int:
        return self.n_vision_layers + self.n_llm_layers

    def widths(self) -> Dict[str, int]:
        return {m: self.width(m) for m in MODULES}

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'ModelConfig':
        return cls(**data)


class ToyMLLM:
    """
    模型参数容器

    参数命名:
        vision.{l}.W1 / b1 / W2 / b2, llm.{l}.W1 / ...
        projector.W / projector.b
        head.Wv / head.Wt / head.b
    """

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor]):
        self.config = config
        self.params = params

    def block(self, module: str, layer: int) -> Dict[str, Tensor]:
        prefix = f"{module}.{layer}."
        return {name[len(prefix):]: p for name, p in self.params.items() if name.startswith(prefix)}

    def block_weight_names(self, module: str, layer: int) -> List[str]:
        return [f"{module}.{layer}.{slot}" for slot in SLOTS]

    def backbone_params(self) -> List[Tensor]:
        return list(self.params.values())

    def clone(self) -> 'ToyMLLM':
        params = {name: Tensor(p.data.copy(), requires_grad=p.requires_grad, name=name)
                  for name, p in self.params.items()}
        return ToyMLLM(self.config, params)


def init_toy_model(config: ModelConfig, seed: int) -> ToyMLLM:
    """按配置随机初始化一个模型（全部参数可训练，用于预训练）"""
    config.validate()
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}

    def new(name, array):
        params[name] = Tensor(array, requires_grad=True, name=name)

    for module in MODULES:
        d = config.width(module)
        for layer in range(config.n_layers(module)):
            new(f"{module}.{layer}.W1", rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)))
            new(f"{module}.{layer}.b1", np.zeros((1, d)))
            new(f"{module}.{layer}.W2", rng.normal(0.0, 0.5 / np.sqrt(d), size=(d, d)))
            new(f"{module}.{layer}.b2", np.zeros((1, d)))

    new('projector.W', rng.normal(0.0, 1.0 / np.sqrt(config.d_v), size=(config.d_v, config.d_t)))
    new('projector.b', np.zeros((1, config.d_t)))
    new('head.Wv', rng.normal(0.0, 1.0 / np.sqrt(config.d_v), size=(config.d_v, config.n_classes)))
    new('head.Wt', rng.normal(0.0, 1.0 / np.sqrt(config.d_t), size=(config.d_t, config.n_classes)))
    new('head.b', np.zeros((1, config.n_classes)))
    return ToyMLLM(config, params)


# ==================== 前向计算 ====================

def mixture_linear(x: Tensor, weight: Tensor, experts: Iterable[LoraExpert]) -> Tensor:
    """单个子槽的混合输出: x·W⁰ + Σ (x·B)·A"""
    out = matmul(x, weight)
    for expert in experts:
        out = add(out, matmul(matmul(x, expert.B), expert.A))
    return out


def _check_active(bank: ExpertBank, active: Iterable[int]) -> Tuple[int, ...]:
    active = tuple(sorted(set(active)))
    missing = [t for t in active if not bank.has_task(t)]
    if missing:
        raise ContractError(f"门控指向不存在的专家: 任务 {missing}")
    return active


def _run_tower(model: ToyMLLM, bank: ExpertBank, active: Tuple[int, ...],
               module: str, x: Tensor) -> Tensor:
    for layer in range(model.config.n_layers(module)):
        p = model.block(module, layer)
        h = add(mixture_linear(x, p['W1'], bank.experts_at(module, layer, 'W1', active)), p['b1'])
        h = relu(h)
        y = add(mixture_linear(h, p['W2'], bank.experts_at(module, layer, 'W2', active)), p['b2'])
        x = add(x, y)
    return x


def _check_batch(config: ModelConfig, vision: np.ndarray, text: np.ndarray) -> None:
    if vision.ndim != 3 or vision.shape[2] != config.d_v:
        raise ContractError(f"视觉 token 形状应为 (B, Nv, {config.d_v})，收到 {vision.shape}")
    if text.ndim != 3 or text.shape[2] != config.d_t:
        raise ContractError(f"文本 token 形状应为 (B, Nt, {config.d_t})，收到 {text.shape}")
    if vision.shape[0] != text.shape[0]:
        raise ContractError(f"两个模态的批大小不一致: {vision.shape[0]} 与 {text.shape[0]}")


def encode(model: ToyMLLM, bank: ExpertBank, active: Iterable[int],
           vision: np.ndarray, text: np.ndarray) -> Dict[str, Tensor]:
    """
    前向计算并返回中间结果

    Returns:
        dict: vision_hidden (B*Nv, d_v), llm_hidden (B*(Nt+1), d_t),
              v_pooled (B, d_v), w_pooled (B, d_t), logits (B, C)
    """
    config = model.config
    _check_batch(config, vision, text)
    active = _check_active(bank, active)
    batch, n_v, _ = vision.shape
    n_t = text.shape[1]
    p = model.params

    xv = _run_tower(model, bank, active, VISION, Tensor(vision.reshape(batch * n_v, config.d_v)))
    v_pooled = max_over_rows(xv, n_v)

    prefix = add(matmul(v_pooled, p['projector.W']), p['projector.b'])
    xt = concat_groups(prefix, Tensor(text.reshape(batch * n_t, config.d_t)), 1, n_t)
    xt = _run_tower(model, bank, active, LLM, xt)
    w_pooled = max_over_rows(xt, n_t + 1)

    logits = add(add(matmul(v_pooled, p['head.Wv']), matmul(w_pooled, p['head.Wt'])), p['head.b'])
    return {'vision_hidden': xv, 'llm_hidden': xt, 'v_pooled': v_pooled,
            'w_pooled': w_pooled, 'logits': logits}


def forward(model: ToyMLLM, bank: ExpertBank, active: Iterable[int],
            vision: np.ndarray, text: np.ndarray) -> Tensor:
    """
    返回 logits

    Args:
        model: 玩具模型
        bank: 专家库
        active: 门控为1的任务编号集合；每层只有分配了专家的任务才会贡献
        vision: (B, Nv, d_v) 视觉 token
        text: (B, Nt, d_t) 文本 token
    """
    return encode(model, bank, active, vision, text)['logits']


def pooled_features(model: ToyMLLM, vision: np.ndarray, text: np.ndarray,
                    batch_size: int = 256) -> np.ndarray:
    """
    路由特征 z = concat(视觉塔最终隐藏状态的 token 最大池化, 语言塔最终隐藏状态的 token 最大池化)

    所有专家门控关闭（只用主干），保证不同任务的特征可比。
    """
    empty = ExpertBank()
    chunks = []
    for start in range(0, vision.shape[0], batch_size):
        out = encode(model, empty, (), vision[start:start + batch_size], text[start:start + batch_size])
        chunks.append(np.concatenate([out['v_pooled'].data, out['w_pooled'].data], axis=1))
    if not chunks:
        return np.zeros((0, model.config.d_v + model.config.d_t))
    return np.concatenate(chunks, axis=0)


def predict(model: ToyMLLM, bank: ExpertBank, active: Iterable[int],
            vision: np.ndarray, text: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """不记录计算带的推理，返回预测标签"""
    preds = []
    for start in range(0, vision.shape[0], batch_size):
        logits = forward(model, bank, active, vision[start:start + batch_size], text[start:start + batch_size])
        preds.append(np.argmax(logits.data, axis=1))
    if not preds:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate(preds)


def batch_loss(model: ToyMLLM, bank: ExpertBank, active: Iterable[int],
               vision: np.ndarray, text: np.ndarray, labels: np.ndarray) -> Tensor:
    return softmax_cross_entropy(forward(model, bank, active, vision, text), labels)


# ==================== 预训练与冻结 ====================

def pretrain_backbone(model: ToyMLLM, vision: np.ndarray, text: np.ndarray, labels: np.ndarray,
                      epochs: int, learning_rate: float, batch_size: int, seed: int) -> List[float]:
    """
    在通用合成任务上做简短的监督预训练，结束后冻结全部主干参数

    Returns:
        每个 epoch 的平均训练损失
    """
    rng = np.random.default_rng(seed)
    params = model.backbone_params()
    for p in params:
        p.requires_grad = True
    opt = Optimizer(params, learning_rate, variant='adam')
    empty = ExpertBank()
    history = []
    n = vision.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            with ComputationTape():
                loss = batch_loss(model, empty, (), vision[idx], text[idx], labels[idx])
            backward(loss)
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        logger.info(f"预训练 epoch {epoch + 1}/{epochs}: loss={history[-1]:.4f}")
    opt.zero_grad()
    freeze_backbone(model)
    return history


def freeze_backbone(model: ToyMLLM) -> None:
    for p in model.backbone_params():
        p.requires_grad = False
        p.zero_grad()


def set_trainable(model: ToyMLLM, bank: ExpertBank, task_ids: Iterable[int]) -> List[Tensor]:
    """
    只让指定任务的专家可训练，主干与其余专家全部冻结

    Returns:
        可训练参数列表
    """
    freeze_backbone(model)
    wanted = set(task_ids)
    trainable = []
    for expert in bank.experts.values():
        flag = expert.task_id in wanted
        for p in expert.parameters():
            p.requires_grad = flag
            p.zero_grad()
            if flag:
                trainable.append(p)
    return trainable


def freeze_for_task(model: ToyMLLM, bank: ExpertBank, task_id: int) -> List[Tensor]:
    """训练任务 t 前: 冻结预训练权重和之前任务的专家，只训练任务 t 的专家"""
    return set_trainable(model, bank, [task_id])


def count_trainable(model: ToyMLLM, bank: ExpertBank) -> int:
    total = sum(p.size for p in model.backbone_params() if p.requires_grad)
    for expert in bank.experts.values():
        total += sum(p.size for p in expert.parameters() if p.requires_grad)
    return total


def backbone_checksum(model: ToyMLLM) -> str:
    return checksum_arrays(model.params[name].data for name in sorted(model.params))


def effective_weights(model: ToyMLLM, bank: ExpertBank, active: Iterable[int]) -> Dict[str, np.ndarray]:
    """把激活专家的 ΔW 折叠进主干后得到的块权重快照（只含 W1/W2）"""
    active = _check_active(bank, active)
    snapshot = {}
    for module in MODULES:
        for layer in range(model.config.n_layers(module)):
            for slot in SLOTS:
                weight = model.params[f"{module}.{layer}.{slot}"].data.copy()
                for expert in bank.experts_at(module, layer, slot, active):
                    weight = weight + expert.delta()
                snapshot[f"{module}.{layer}.{slot}"] = weight
    return snapshot

