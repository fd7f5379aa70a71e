"""
优化器模块 - SGD / Adam
"""
from typing import Dict, Iterable, List

import numpy as np

from .autograd import Tensor
from .errors import ContractError

VARIANTS = ('sgd', 'adam')


class Optimizer:
    """
    参数优化器

    Args:
        params: 待优化参数
        learning_rate: 学习率（正数）
        variant: 'sgd' 或 'adam'

    step() 不会修改 requires_grad 为 False 的参数；梯度只在 zero_grad() 时清除。
    """

    def __init__(self, params: Iterable[Tensor], learning_rate: float, variant: str = 'adam',
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if learning_rate <= 0:
            raise ContractError(f"学习率必须为正数，收到 {learning_rate}")
        if variant not in VARIANTS:
            raise ContractError(f"未知的优化器类型: {variant}")
        self.params: List[Tensor] = list(params)
        self.learning_rate = learning_rate
        self.variant = variant
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m: Dict[int, np.ndarray] = {}
        self._v: Dict[int, np.ndarray] = {}

    def step(self) -> None:
        trainable = [p for p in self.params if p.requires_grad]
        missing = [p.name or repr(p) for p in trainable if p.grad is None]
        if missing:
            raise ContractError(f"以下参数缺少梯度: {', '.join(missing)}")

        self.step_count += 1
        for p in trainable:
            if self.variant == 'sgd':
                p.data -= self.learning_rate * p.grad
                continue

            key = id(p)
            m = self._m.get(key)
            v = self._v.get(key)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = self.beta1 * m + (1.0 - self.beta1) * p.grad
            v = self.beta2 * v + (1.0 - self.beta2) * p.grad * p.grad
            self._m[key] = m
            self._v[key] = v
            m_hat = m / (1.0 - self.beta1 ** self.step_count)
            v_hat = v / (1.0 - self.beta2 ** self.step_count)
            p.data -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def step(opt: Optimizer, params: Iterable[Tensor] = None) -> None:
    """函数式入口：可选地替换参数集合后执行一步更新"""
    if params is not None:
        opt.params = list(params)
    opt.step()
