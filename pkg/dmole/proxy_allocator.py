"""
零成本代理与专家分配模块

流程: 子集上一次前向 + 一次反向 → 每层梯度范数 → 模块难度分数 → 模态间预算划分 → 每个模块按范数排名取前 B_M 层
"""
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .autograd import ComputationTape, Tensor, backward, softmax_cross_entropy
from .errors import ContractError, DegenerateTaskError
from .experts import LLM, MODULES, VISION, ExpertBank
from .log_utils import get_logger
from .task_gen import Split
from .toy_model import ToyMLLM, encode

logger = get_logger(__name__)


@dataclass
class LayerSensitivity:
    module: str
    layer: int
    grad_norm: float


@dataclass
class ModuleScore:
    """模块难度分数 = sqrt(Σ_层 梯度范数²)"""
    module: str
    score: float


@dataclass
class BudgetSplit:
    r_llm: float
    r_vision: float
    b_llm: int
    b_vision: int
    degenerate: bool = False


@dataclass
class AllocationPlan:
    """
    一个任务的分配方案

    indicators[module][layer] ∈ {0, 1}，在每个模块排名前 B_M 的层上为1；
    ranks[module][layer] 是该层专家的秩（没有专家时为0），param_budget 是每个任务的参数预算
    """
    task_id: int
    b_total: int
    r_llm: float
    r_vision: float
    b_llm: int
    b_vision: int
    ranked_layers: Dict[str, List[int]]
    indicators: Dict[str, List[int]]
    grad_norms: Dict[str, List[float]] = field(default_factory=dict)
    module_scores: Dict[str, float] = field(default_factory=dict)
    strategy: str = 'dmole'
    ranks: Dict[str, List[int]] = field(default_factory=dict)
    param_budget: int = 0
    trainable_params: int = 0
    degenerate: bool = False

    def budget(self, module: str) -> int:
        return self.b_vision if module == VISION else self.b_llm

    def selected_layers(self, module: str) -> List[int]:
        return [layer for layer, flag in enumerate(self.indicators[module]) if flag]

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'AllocationPlan':
        return cls(**data)


def _default_loss(model: ToyMLLM, batch: Split) -> Tensor:
    logits = encode(model, ExpertBank(), (), batch.vision, batch.text)['logits']
    return softmax_cross_entropy(logits, batch.labels)


def compute_sensitivities(model: ToyMLLM, data: Split,
                          loss_fn: Optional[Callable[[ToyMLLM, Split], Tensor]] = None
                          ) -> Tuple[List[LayerSensitivity], Dict[str, ModuleScore]]:
    """
    在子集上计算每层梯度范数（零成本代理）

    整个子集的平均损失只做一次反向；期间主干块权重临时设为可求导，不做任何参数更新，
    调用结束后恢复原有的 requires_grad 标志和梯度。

    Args:
        model: 预训练模型（专家全部关闭）
        data: 当前任务的子集
        loss_fn: 可选的自定义损失（默认交叉熵）

    Returns:
        (每层敏感度列表, {模块: 模块分数})
    """
    if len(data) == 0:
        raise ContractError("计算零成本代理需要非空子集")
    loss_fn = loss_fn or _default_loss

    names = [name for module in MODULES for layer in range(model.config.n_layers(module))
             for name in model.block_weight_names(module, layer)]
    saved = {name: (model.params[name].requires_grad, model.params[name].grad) for name in names}
    try:
        for name in names:
            model.params[name].requires_grad = True
            model.params[name].zero_grad()
        with ComputationTape():
            loss = loss_fn(model, data)
        backward(loss)

        sensitivities = []
        scores = {}
        for module in MODULES:
            squared = 0.0
            for layer in range(model.config.n_layers(module)):
                total = 0.0
                for name in model.block_weight_names(module, layer):
                    grad = model.params[name].grad
                    if grad is not None:
                        total += float(np.sum(grad * grad))
                sensitivities.append(LayerSensitivity(module, layer, math.sqrt(total)))
                squared += total
            scores[module] = ModuleScore(module, math.sqrt(squared))
    finally:
        for name, (flag, grad) in saved.items():
            model.params[name].requires_grad = flag
            model.params[name].grad = grad
    return sensitivities, scores


def split_budget(scores: Dict[str, ModuleScore], b_total: int) -> BudgetSplit:
    """
    模态间课程：按难度分数比例划分预算

    r_M = Score_M / (Score_LLM + Score_Vision)
    B_vision = round_half_to_even(r_vision × B_total)，B_llm = B_total − B_vision

    Raises:
        DegenerateTaskError: 两个分数都为0
    """
    s_llm = float(scores[LLM].score)
    s_vision = float(scores[VISION].score)
    if s_llm < 0 or s_vision < 0:
        raise ContractError("难度分数不能为负")
    if s_llm + s_vision == 0:
        raise DegenerateTaskError("两个模块的梯度范数都为0")
    r_vision = s_vision / (s_llm + s_vision)
    r_llm = 1.0 - r_vision
    # Python 的 round 是银行家舍入
    b_vision = int(round(r_vision * b_total))
    return BudgetSplit(r_llm=r_llm, r_vision=r_vision, b_llm=b_total - b_vision, b_vision=b_vision)


def equal_split(b_total: int) -> BudgetSplit:
    b_vision = int(round(0.5 * b_total))
    return BudgetSplit(r_llm=0.5, r_vision=0.5, b_llm=b_total - b_vision, b_vision=b_vision, degenerate=True)


def static_split(b_total: int, n_vision_layers: int, n_llm_layers: int) -> BudgetSplit:
    """不看任务难度，按两个模块的层数比例划分（去掉课程时的对照设置）"""
    r_vision = n_vision_layers / (n_vision_layers + n_llm_layers)
    b_vision = int(round(r_vision * b_total))
    return BudgetSplit(r_llm=1.0 - r_vision, r_vision=r_vision, b_llm=b_total - b_vision, b_vision=b_vision)


def split_budget_or_fallback(scores: Dict[str, ModuleScore], b_total: int, task_id: int = 0) -> BudgetSplit:
    try:
        return split_budget(scores, b_total)
    except DegenerateTaskError as exc:
        logger.warning(f"任务 {task_id}: {exc}，退回 50/50 划分")
        return equal_split(b_total)


def rank_layers(norms: Sequence[float]) -> List[int]:
    """按梯度范数降序排列层下标，并列时下标小的在前"""
    return sorted(range(len(norms)), key=lambda layer: (-norms[layer], layer))


def allocate_layers(sensitivities: Sequence[LayerSensitivity], b_llm: int, b_vision: int,
                    task_id: int = 0, split: Optional[BudgetSplit] = None) -> AllocationPlan:
    """
    每个模块内按范数排名，排名 ≤ B_M 的层指示为1

    某个模块的预算超过其层数时，多出的层数转给另一个模块（记录警告），
    因此指示为1的层数总和始终等于 B_llm + B_vision。

    Raises:
        ContractError: 预算为负，或总预算超过两个模块的总层数
    """
    budgets = {LLM: b_llm, VISION: b_vision}
    norms: Dict[str, List[float]] = {m: [] for m in MODULES}
    for item in sorted(sensitivities, key=lambda s: (s.module, s.layer)):
        norms[item.module].append(float(item.grad_norm))
    n_layers = {m: len(norms[m]) for m in MODULES}

    for module in MODULES:
        if budgets[module] < 0:
            raise ContractError(f"{module} 预算不能为负: {budgets[module]}")
    b_total = budgets[LLM] + budgets[VISION]
    if b_total > sum(n_layers.values()):
        raise ContractError(f"总预算 {b_total} 超过总层数 {sum(n_layers.values())}")
    for module, other in ((VISION, LLM), (LLM, VISION)):
        overflow = budgets[module] - n_layers[module]
        if overflow > 0:
            logger.warning(f"任务 {task_id}: {module} 预算 {budgets[module]} 超过层数 {n_layers[module]}，"
                           f"多出的 {overflow} 层转给 {other}")
            budgets[module] = n_layers[module]
            budgets[other] += overflow

    ranked, indicators = {}, {}
    for module in MODULES:
        ranked[module] = rank_layers(norms[module])
        flags = [0] * n_layers[module]
        for layer in ranked[module][:budgets[module]]:
            flags[layer] = 1
        indicators[module] = flags
    if sum(sum(flags) for flags in indicators.values()) != b_total:
        raise ContractError(f"任务 {task_id}: 分配层数与总预算 {b_total} 不一致")

    module_scores = {m: math.sqrt(sum(v * v for v in norms[m])) for m in MODULES}
    if split is None:
        r_vision = budgets[VISION] / b_total if b_total else 0.5
        split = BudgetSplit(r_llm=1.0 - r_vision, r_vision=r_vision, b_llm=budgets[LLM], b_vision=budgets[VISION])

    return AllocationPlan(
        task_id=task_id, b_total=b_total,
        r_llm=split.r_llm, r_vision=split.r_vision,
        b_llm=budgets[LLM], b_vision=budgets[VISION],
        ranked_layers=ranked, indicators=indicators, grad_norms=norms,
        module_scores=module_scores, degenerate=split.degenerate,
    )


def relative_dynamics(before: Dict[str, np.ndarray], after: Dict[str, np.ndarray]) -> Dict[str, float]:
    """
    每个模块的相对权重变化 ‖θ_after − θ_before‖₂ / ‖θ_before‖₂

    Args:
        before / after: 有效权重快照（名字 → 数组，名字以模块名开头）
    """
    if set(before) != set(after):
        raise ContractError(f"快照参数名不一致: {sorted(set(before) ^ set(after))}")
    result = {}
    for module in MODULES:
        names = sorted(n for n in before if n.split('.')[0] == module)
        for name in names:
            if before[name].shape != after[name].shape:
                raise ContractError(f"{name}: 形状不一致 {before[name].shape} 与 {after[name].shape}")
        diff = math.sqrt(sum(float(np.sum((after[n] - before[n]) ** 2)) for n in names))
        base = math.sqrt(sum(float(np.sum(before[n] ** 2)) for n in names))
        result[module] = diff / base if base > 0 else 0.0
    return result


def layer_discrepancy(sens_a: Sequence[LayerSensitivity], sens_b: Sequence[LayerSensitivity],
                      eps: float = 1e-12) -> float:
    """两个任务逐层梯度范数对数比的最大绝对值 max_l |log(G(l, A) / G(l, B))|"""
    norms_b = {(s.module, s.layer): s.grad_norm for s in sens_b}
    best = 0.0
    for s in sens_a:
        other = norms_b[(s.module, s.layer)]
        best = max(best, abs(math.log((s.grad_norm + eps) / (other + eps))))
    return best


def sensitivity_records(task_id: int, sensitivities: Sequence[LayerSensitivity]) -> List[Dict]:
    return [{'task_id': task_id, 'module': s.module, 'layer': s.layer, 'grad_norm': s.grad_norm}
            for s in sensitivities]


def dump_sensitivities(records: Sequence[Dict], path: Union[str, Path]) -> Path:
    """导出敏感度 CSV: task_id, module, layer, grad_norm"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(list(records), columns=['task_id', 'module', 'layer', 'grad_norm']).to_csv(path, index=False)
    return path
