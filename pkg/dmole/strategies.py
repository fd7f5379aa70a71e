"""
策略模块 - D-MoLE 及对照方法的分配规则与门控方式

所有策略每个任务新增的可训练参数量都对齐到同一个参数预算:
    param_budget = B_total × 单层专家参数量（按最窄模块、lora_rank 计）
按代理选层的策略每层放一个等参数量的专家；覆盖全部层的策略与 MoLA 把同样的预算按层权重折算成逐层的秩。
"""
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence

from .experts import LLM, MODULES, VISION, expert_params, unit_ranks
from .proxy_allocator import (AllocationPlan, BudgetSplit, LayerSensitivity, ModuleScore, allocate_layers,
                              rank_layers, split_budget_or_fallback, static_split)

STRATEGY_NAMES = (
    'dmole', 'seq_ft', 'dense_mole', 'sparse_mole', 'mola',
    'dmole_llm_only', 'dmole_vision_only', 'dmole_static_split',
)


@dataclass(frozen=True)
class StrategyProfile:
    """
    name: 策略名
    allocation: proxy / static_proxy / llm_only / vision_only / all_layers / higher_layers
    gate: router（自编码器 top-K）/ all（所有已训练专家常开）/ shared（单一共享专家）
    transfer: 训练时是否激活最相关的旧任务专家
    """
    name: str
    allocation: str
    gate: str
    transfer: bool

    @property
    def uses_router(self) -> bool:
        return self.gate == 'router'

    @property
    def shared_expert(self) -> bool:
        return self.gate == 'shared'


PROFILES: Dict[str, StrategyProfile] = {
    'dmole': StrategyProfile('dmole', 'proxy', 'router', True),
    'dmole_llm_only': StrategyProfile('dmole_llm_only', 'llm_only', 'router', True),
    'dmole_vision_only': StrategyProfile('dmole_vision_only', 'vision_only', 'router', True),
    'dmole_static_split': StrategyProfile('dmole_static_split', 'static_proxy', 'router', True),
    'seq_ft': StrategyProfile('seq_ft', 'all_layers', 'shared', False),
    'dense_mole': StrategyProfile('dense_mole', 'all_layers', 'all', False),
    'sparse_mole': StrategyProfile('sparse_mole', 'all_layers', 'router', False),
    'mola': StrategyProfile('mola', 'higher_layers', 'router', False),
}


def get_strategy(name: str) -> StrategyProfile:
    return PROFILES[name]


def param_budget(lora_rank: int, b_total: int, widths: Dict[str, int]) -> int:
    """
    每个任务的参数预算

    例如 lora_rank=8、b_total=5、d_v=16、d_t=32 → 5 × 512 = 2560
    """
    return b_total * expert_params(min(widths.values()), lora_rank)


def plan_params(ranks: Dict[str, Sequence[int]], widths: Dict[str, int]) -> int:
    """按逐层秩计算方案的新增参数量"""
    return sum(expert_params(widths[m], r) for m in MODULES for r in ranks[m])


def proportional_ranks(weights: Dict[str, Sequence[float]], widths: Dict[str, int], budget: int,
                       min_rank: int = 0) -> Dict[str, List[int]]:
    """
    把参数预算按层权重分给各层，每层参数量 ∝ 权重

    理想秩 = 权重 × (budget / Σ权重) / 每单位秩的参数量，先向下取整（不低于 min_rank、低于宽度），
    再按小数部分从大到小逐层加1，直到再加就会超出预算。
    min_rank 不起作用时，总参数量与预算之差小于最宽模块一个单位秩的参数量。
    """
    total_weight = sum(w for m in MODULES for w in weights[m])
    if total_weight <= 0:
        return {m: [0] * len(weights[m]) for m in MODULES}
    per_weight = budget / total_weight
    ideal = {m: [w * per_weight / expert_params(widths[m], 1) for w in weights[m]] for m in MODULES}
    ranks = {m: [min(max(min_rank, math.floor(x)), widths[m] - 1) for x in ideal[m]] for m in MODULES}
    spent = plan_params(ranks, widths)

    # 小数部分取到9位，浮点误差造成的“假并列”按模块顺序、层号决出
    order = sorted(((round(ideal[m][l] - math.floor(ideal[m][l]), 9), MODULES.index(m), l)
                    for m in MODULES for l in range(len(ideal[m]))),
                   key=lambda item: (-item[0], item[1], item[2]))
    for _, module_index, layer in order:
        module = MODULES[module_index]
        step = expert_params(widths[module], 1)
        if ranks[module][layer] < widths[module] - 1 and spent + step <= budget:
            ranks[module][layer] += 1
            spent += step
    return ranks


def _plan_from_ranks(task_id: int, ranks: Dict[str, List[int]], sensitivities: Sequence[LayerSensitivity],
                     ) -> AllocationPlan:
    real = allocate_layers(sensitivities, 0, 0, task_id)
    indicators = {m: [int(r > 0) for r in ranks[m]] for m in MODULES}
    b_vision, b_llm = sum(indicators[VISION]), sum(indicators[LLM])
    total = b_vision + b_llm
    r_vision = b_vision / total if total else 0.5
    return AllocationPlan(
        task_id=task_id, b_total=total, r_llm=1.0 - r_vision, r_vision=r_vision,
        b_llm=b_llm, b_vision=b_vision,
        ranked_layers={m: rank_layers([float(r) for r in ranks[m]]) for m in MODULES},
        indicators=indicators, grad_norms=real.grad_norms, module_scores=real.module_scores,
    )


def plan_for_strategy(profile: StrategyProfile, task_id: int, sensitivities: Sequence[LayerSensitivity],
                      scores: Dict[str, ModuleScore], b_total: int, n_layers: Dict[str, int],
                      lora_rank: int, widths: Dict[str, int]) -> AllocationPlan:
    """
    按策略生成分配方案（含逐层秩）

    Args:
        profile: 策略
        task_id: 任务编号
        sensitivities / scores: 零成本代理结果（所有策略都会计算，用于报告）
        b_total: 总预算（层数）
        n_layers: 每个模块的层数
        lora_rank: 最窄模块上单层专家的秩
        widths: 每个模块的隐藏宽度
    """
    budget = param_budget(lora_rank, b_total, widths)
    kind = profile.allocation
    if kind in ('proxy', 'static_proxy', 'llm_only', 'vision_only'):
        if kind == 'proxy':
            split = split_budget_or_fallback(scores, b_total, task_id)
        elif kind == 'static_proxy':
            split = static_split(b_total, n_layers[VISION], n_layers[LLM])
        elif kind == 'llm_only':
            split = BudgetSplit(r_llm=1.0, r_vision=0.0, b_llm=b_total, b_vision=0)
        else:
            split = BudgetSplit(r_llm=0.0, r_vision=1.0, b_llm=0, b_vision=b_total)
        plan = allocate_layers(sensitivities, split.b_llm, split.b_vision, task_id, split)
        per_layer = unit_ranks(lora_rank, widths)
        plan.ranks = {m: [per_layer[m] * flag for flag in plan.indicators[m]] for m in MODULES}
    elif kind == 'all_layers':
        # 每层至少秩1；预算小于“全部层各秩1”时会超出预算
        weights = {m: [1.0] * n_layers[m] for m in MODULES}
        ranks = proportional_ranks(weights, widths, budget, min_rank=1)
        plan = _plan_from_ranks(task_id, ranks, sensitivities)
        plan.ranks = ranks
    elif kind == 'higher_layers':
        # 每层参数量 ∝ 层号 + 1
        weights = {m: [float(l + 1) for l in range(n_layers[m])] for m in MODULES}
        ranks = proportional_ranks(weights, widths, budget)
        plan = _plan_from_ranks(task_id, ranks, sensitivities)
        plan.ranks = ranks
    else:
        raise ValueError(f"未知的分配方式: {kind}")

    plan.strategy = profile.name
    plan.param_budget = budget
    for module in MODULES:
        assert sum(plan.indicators[module]) == plan.budget(module)
        assert [int(r > 0) for r in plan.ranks[module]] == plan.indicators[module]
    return plan
