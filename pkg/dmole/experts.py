"""
LoRA 专家库模块 - 按 (模块, 层, 子槽, 任务) 存放低秩专家以及分配指示变量
"""
import hashlib
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autograd import Tensor
from .errors import ContractError

VISION = 'vision'
LLM = 'llm'
MODULES = (VISION, LLM)
SLOTS = ('W1', 'W2')

ExpertKey = Tuple[str, int, str, int]
IndicatorKey = Tuple[str, int, int]
RankSpec = Union[int, Dict[str, Sequence[int]]]


def expert_params(width: int, rank: int) -> int:
    """一个层上的专家（W1、W2 两个子槽，各含 A 与 B）的参数量"""
    return len(SLOTS) * 2 * rank * width


def unit_ranks(lora_rank: int, widths: Dict[str, int]) -> Dict[str, int]:
    """
    每个模块的单层专家秩：最窄的模块用 lora_rank，更宽的模块按宽度等比缩小，
    使两个模块上一个专家的参数量相同

    例如 lora_rank=8、d_v=16、d_t=32 → vision 8，llm 4（每个专家 512 个参数）
    """
    narrowest = min(widths.values())
    return {m: max(1, int(round(lora_rank * narrowest / widths[m]))) for m in MODULES}


@dataclass
class LoraExpert:
    """
    单个低秩专家 ΔW = B·A

    A: rank×d，B: d×rank；B 初始化为0，因此刚创建时 ΔW = 0
    """
    task_id: int
    module: str
    layer: int
    slot: str
    A: Tensor
    B: Tensor

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def n_params(self) -> int:
        return self.A.size + self.B.size

    def delta(self) -> np.ndarray:
        return self.B.data @ self.A.data

    def parameters(self) -> List[Tensor]:
        return [self.A, self.B]


class ExpertBank:
    """
    专家库

    experts: (module, layer, slot, task_id) → LoraExpert
    indicators: (module, layer, task_id) → 0/1，指示为0的位置不存放专家
    """

    def __init__(self):
        self.experts: Dict[ExpertKey, LoraExpert] = {}
        self.indicators: Dict[IndicatorKey, int] = {}

    def allocate(self, task_id: int, indicators: Dict[str, List[int]], widths: Dict[str, int],
                 rank: RankSpec, rng: np.random.Generator, init_std: float = 0.02) -> List[LoraExpert]:
        """
        按分配指示为任务创建专家（被选中的层上 W1、W2 两个子槽各一个）

        Args:
            task_id: 任务编号（≥1）
            indicators: 每个模块一个 0/1 列表，长度为该模块层数
            widths: 每个模块的隐藏宽度
            rank: LoRA 秩；可以是整数（所有层相同），也可以是每个模块逐层的秩列表（0 表示不分配）
            rng: 随机数发生器（用于 A 的高斯初始化）

        Returns:
            新建的专家列表
        """
        if task_id < 1:
            raise ContractError(f"task_id 必须 ≥ 1，收到 {task_id}")
        if self.has_task(task_id):
            raise ContractError(f"任务 {task_id} 的专家已经分配过")

        created = []
        for module in MODULES:
            d = widths[module]
            for layer, flag in enumerate(indicators.get(module, [])):
                self.indicators[(module, layer, task_id)] = int(flag)
                if not flag:
                    continue
                layer_rank = int(rank) if isinstance(rank, (int, np.integer)) else int(rank[module][layer])
                if not 1 <= layer_rank < d:
                    raise ContractError(f"{module} 第 {layer} 层的 LoRA 秩 {layer_rank} 必须在 [1, {d}) 内")
                for slot in SLOTS:
                    prefix = f"expert.t{task_id}.{module}.{layer}.{slot}"
                    expert = LoraExpert(
                        task_id=task_id, module=module, layer=layer, slot=slot,
                        A=Tensor(rng.normal(0.0, init_std, size=(layer_rank, d)), name=f"{prefix}.A"),
                        B=Tensor(np.zeros((d, layer_rank)), name=f"{prefix}.B"),
                    )
                    self.experts[(module, layer, slot, task_id)] = expert
                    created.append(expert)
        return created

    def add_expert(self, expert: LoraExpert) -> None:
        """直接登记一个专家（加载检查点时使用）"""
        self.experts[(expert.module, expert.layer, expert.slot, expert.task_id)] = expert
        self.indicators[(expert.module, expert.layer, expert.task_id)] = 1

    def has_task(self, task_id: int) -> bool:
        return any(key[2] == task_id for key in self.indicators)

    def task_ids(self) -> List[int]:
        return sorted({key[2] for key in self.indicators})

    def indicator(self, module: str, layer: int, task_id: int) -> int:
        return self.indicators.get((module, layer, task_id), 0)

    def allocated_layers(self, task_id: int, module: str) -> List[int]:
        return sorted(layer for (m, layer, t), flag in self.indicators.items()
                      if m == module and t == task_id and flag)

    def experts_at(self, module: str, layer: int, slot: str, active: Iterable[int]) -> List[LoraExpert]:
        """返回在该层该子槽上、门控为1的专家（按任务编号排序）"""
        found = []
        for task_id in sorted(set(active)):
            expert = self.experts.get((module, layer, slot, task_id))
            if expert is not None:
                found.append(expert)
        return found

    def experts_of(self, task_id: int) -> List[LoraExpert]:
        return [e for key, e in sorted(self.experts.items()) if key[3] == task_id]

    def parameters(self, task_ids: Optional[Iterable[int]] = None) -> List[Tensor]:
        wanted = None if task_ids is None else set(task_ids)
        params = []
        for key, expert in sorted(self.experts.items()):
            if wanted is None or key[3] in wanted:
                params.extend(expert.parameters())
        return params

    def n_params(self, task_id: int) -> int:
        return sum(e.n_params for e in self.experts_of(task_id))


def checksum_arrays(arrays: Iterable[np.ndarray]) -> str:
    """对一组数组的原始字节计算 SHA-256"""
    digest = hashlib.sha256()
    for array in arrays:
        digest.update(np.ascontiguousarray(array).tobytes())
    return digest.hexdigest()


def bank_checksums(bank: ExpertBank, task_ids: Iterable[int]) -> Dict[int, str]:
    """每个任务一份专家参数校验和"""
    return {t: checksum_arrays(p.data for p in bank.parameters([t])) for t in task_ids}
