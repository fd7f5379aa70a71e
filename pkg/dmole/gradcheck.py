"""
梯度校验模块 - 用中心差分交叉验证自动微分的结果
"""
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autograd import (ComputationTape, Tensor, add, backward, concat_groups, matmul, max_over_rows, mean,
                       mse_loss, mul, relu, softmax_cross_entropy)
from .experts import ExpertBank
from .toy_model import ModelConfig, batch_loss, init_toy_model

LossFn = Callable[[], Tensor]
DEFAULT_TOLERANCE = 1e-4


def numeric_gradient(loss_fn: LossFn, param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """
    中心差分: (f(θ + eps) − f(θ − eps)) / (2·eps)，逐元素扰动
    """
    grad = np.zeros_like(param.data)
    for idx in np.ndindex(param.data.shape):
        original = param.data[idx]
        param.data[idx] = original + eps
        plus = loss_fn().item()
        param.data[idx] = original - eps
        minus = loss_fn().item()
        param.data[idx] = original
        grad[idx] = (plus - minus) / (2.0 * eps)
    return grad


def analytic_gradients(loss_fn: LossFn, params: Sequence[Tensor]) -> List[np.ndarray]:
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    with ComputationTape():
        loss = loss_fn()
    backward(loss)
    return [p.grad.copy() for p in params]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """‖a − n‖ / max(‖a‖, ‖n‖)；两者都接近0时返回绝对误差"""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    diff = float(np.linalg.norm(analytic - numeric))
    return diff / scale if scale > 1e-10 else diff


def check_gradients(loss_fn: LossFn, params: Sequence[Tensor], name: str = 'case',
                    eps: float = 1e-5, tolerance: float = DEFAULT_TOLERANCE) -> Dict:
    """
    对一个损失函数做梯度校验

    Returns:
        dict: name, status（pass / fail）, max_rel_error, params（每个参数的相对误差）
    """
    analytic = analytic_gradients(loss_fn, params)
    errors = {}
    for i, (p, grad) in enumerate(zip(params, analytic)):
        errors[p.name or f"param{i}"] = relative_error(grad, numeric_gradient(loss_fn, p, eps))
    for p in params:
        p.zero_grad()
    max_error = max(errors.values()) if errors else 0.0
    return {
        'name': name,
        'status': 'pass' if max_error < tolerance else 'fail',
        'max_rel_error': max_error,
        'params': errors,
    }


# ==================== 校验用例 ====================

def _param(rng: np.random.Generator, shape: Tuple[int, int], name: str) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True, name=name)


def primitive_cases(rng: np.random.Generator) -> List[Tuple[str, LossFn, List[Tensor]]]:
    """每个基本运算一个随机用例，损失都归约成标量"""
    n, d, k = int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
    a = _param(rng, (n, d), 'a')
    b = _param(rng, (d, k), 'b')
    c = _param(rng, (n, d), 'c')
    bias = _param(rng, (1, d), 'bias')
    scalar = _param(rng, (1, 1), 'scalar')
    groups = int(rng.integers(2, 4))
    pooled_in = _param(rng, (groups * n, d), 'pooled_in')
    prefix = _param(rng, (n, d), 'prefix')
    labels = rng.integers(0, k, size=n)
    target = rng.normal(size=(n, k))
    weights = rng.normal(size=(n, k))
    w_d = Tensor(rng.normal(size=(n, d)))
    w_pool = Tensor(rng.normal(size=(n, d)))
    w_cat = Tensor(rng.normal(size=(n * (1 + groups), d)))

    return [
        ('matmul', lambda: mean(mul(matmul(a, b), Tensor(weights))), [a, b]),
        ('add', lambda: mean(mul(add(add(a, c), bias), w_d)), [a, c, bias]),
        ('mul', lambda: mean(mul(mul(a, c), scalar)), [a, c, scalar]),
        ('relu', lambda: mean(mul(relu(a), w_d)), [a]),
        ('max_over_rows', lambda: mean(mul(max_over_rows(pooled_in, groups), w_pool)), [pooled_in]),
        ('mean', lambda: mean(a), [a]),
        ('softmax_cross_entropy', lambda: softmax_cross_entropy(matmul(a, b), labels), [a, b]),
        ('concat_groups', lambda: mean(mul(concat_groups(prefix, pooled_in, 1, groups), w_cat)),
         [prefix, pooled_in]),
        ('mse_loss', lambda: mse_loss(matmul(a, b), target), [a, b]),
    ]


GRADCHECK_MODEL = ModelConfig(d_v=4, d_t=6, n_vision_layers=2, n_llm_layers=2, n_vision_tokens=2,
                              n_text_tokens=3, n_classes=3, lora_rank=2)


def model_case(rng: np.random.Generator,
               config: Optional[ModelConfig] = None) -> Tuple[str, LossFn, List[Tensor]]:
    """
    完整玩具模型的交叉熵损失: 全部主干参数 + 两个任务的专家（逐层随机秩；B 随机化，使 A 的梯度非零）
    """
    config = config or GRADCHECK_MODEL
    model = init_toy_model(config, int(rng.integers(0, 2 ** 31)))
    bank = ExpertBank()
    for task_id in (1, 2):
        indicators = {'vision': [int(rng.integers(0, 2)) for _ in range(config.n_vision_layers)],
                      'llm': [1] * config.n_llm_layers}
        ranks = {m: [int(rng.integers(1, d)) for _ in range(config.n_layers(m))]
                 for m, d in config.widths().items()}
        for expert in bank.allocate(task_id, indicators, config.widths(), ranks, rng):
            expert.B.data = rng.normal(0.0, 0.5, size=expert.B.shape)
    batch = int(rng.integers(2, 4))
    vision = rng.normal(size=(batch, config.n_vision_tokens, config.d_v))
    text = rng.normal(size=(batch, config.n_text_tokens, config.d_t))
    labels = rng.integers(0, config.n_classes, size=batch)
    params = model.backbone_params() + bank.parameters()
    return 'toy_model', lambda: batch_loss(model, bank, (1, 2), vision, text, labels), params


def verify_gradients(trials: int = 100, seed: int = 0, include_model: bool = True,
                     tolerance: float = DEFAULT_TOLERANCE) -> Dict:
    """
    随机重复校验全部基本运算（以及完整模型损失），每次试验都重新抽取一组输入

    Returns:
        完整的校验报告:
        - results: 每个用例每次试验的结果
        - max_rel_error: 所有试验中的最大相对误差
        - status: pass / fail
        - recommendation: 可读的结论
    """
    rng = np.random.default_rng(seed)
    results = []
    for trial in range(trials):
        for name, loss_fn, params in primitive_cases(rng):
            results.append({**check_gradients(loss_fn, params, name, tolerance=tolerance), 'trial': trial})
        if include_model:
            name, loss_fn, params = model_case(rng)
            results.append({**check_gradients(loss_fn, params, name, tolerance=tolerance), 'trial': trial})

    max_error = max(r['max_rel_error'] for r in results) if results else 0.0
    failed = sorted({r['name'] for r in results if r['status'] != 'pass'})
    report = {
        'results': results,
        'trials': trials,
        'max_rel_error': max_error,
        'failed_cases': failed,
        'status': 'pass' if not failed else 'fail',
    }
    report['recommendation'] = get_recommendation(report)
    return report


def get_recommendation(report: Dict) -> str:
    if report['status'] == 'pass':
        return f"✅ 自动微分与中心差分一致（最大相对误差 {report['max_rel_error']:.2e}）"
    return f"⚠️ 以下运算的梯度与中心差分不一致: {', '.join(report['failed_cases'])}"


def get_verification_summary(report: Dict) -> str:
    return "验证通过 ✅" if report['status'] == 'pass' else "需要检查 ⚠️"
