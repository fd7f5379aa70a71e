"""
自动微分模块 - 最小的二维张量运算 + 反向模式自动微分（显式计算带）

约定：
- 所有数据均为 float64 的二维数组（标量损失的形状为 (1, 1)）
- 只有在 ComputationTape 处于激活状态时才记录运算；没有激活的计算带时即为纯前向推理
- 广播只支持 (1, n) 行偏置或 (1, 1) 标量
"""
import threading
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, DimensionError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, 'stack', None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional['ComputationTape']:
    """返回当前线程上激活的计算带（没有则为 None）"""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """
    稠密实数张量

    Attributes:
        data: float64 数组
        grad: 与 data 同形状的梯度累加器（可训练叶子从全0开始，冻结张量为 None）
        requires_grad: 是否为需要梯度的叶子参数
        name: 可选的参数名
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1, 1)
        elif array.ndim == 1:
            array = array.reshape(1, -1)
        elif array.ndim > 2:
            raise ContractError(f"只支持二维张量，收到形状 {array.shape}")
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self._requires_grad = False
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Optional['ComputationTape'] = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() 只适用于标量，形状为 {self.shape}")
        return float(self.data.reshape(-1)[0])

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, flag: bool) -> None:
        # 可训练叶子始终带一个梯度缓冲区（未到达时为0）
        self._requires_grad = bool(flag)
        if self._requires_grad and self.grad is None:
            self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self._requires_grad else None

    def _needs_tape(self, tape: 'ComputationTape') -> bool:
        return self.requires_grad or self._tape is tape

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        return matmul(self, other)

    def __add__(self, other: 'Tensor') -> 'Tensor':
        return add(self, other)

    def __mul__(self, other: 'Tensor') -> 'Tensor':
        return mul(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ''
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


class TapeNode:
    """计算带上的一个节点：输出、输入以及局部反向规则"""
    __slots__ = ('out', 'inputs', 'backward')

    def __init__(self, out: Tensor, inputs: Tuple[Tensor, ...],
                 backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class ComputationTape:
    """
    define-by-run 计算带

    with ComputationTape() as tape:
        loss = ...
    backward(loss)
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []

    def __enter__(self) -> 'ComputationTape':
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, out: Tensor, inputs: Tuple[Tensor, ...], backward) -> Tensor:
        out._tape = self
        self.nodes.append(TapeNode(out, inputs, backward))
        return out


def _emit(data: np.ndarray, inputs: Tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t._needs_tape(tape) for t in inputs):
        tape.record(out, inputs, backward)
    return out


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    rows, cols = b.shape
    if rows == 1 and cols in (1, a.shape[1]):
        return
    raise DimensionError(op, a.shape, b.shape)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    reduced = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and reduced.shape[1] != 1:
        reduced = reduced.sum(axis=1, keepdims=True)
    return reduced


# ==================== 算术原语 ====================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """矩阵乘法 (m×k)·(k×n)，反向: dA = dC·Bᵀ, dB = Aᵀ·dC"""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError('matmul', a.shape, b.shape)
    a_data, b_data = a.data, b.data

    def backward(g):
        return g @ b_data.T, a_data.T @ g

    return _emit(a_data @ b_data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """逐元素加法；b 可以是 (1, n) 偏置或 (1, 1) 标量"""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast('add', a, b)
    a_shape, b_shape = a.shape, b.shape

    def backward(g):
        return g, _unbroadcast(g, b_shape)

    return _emit(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """逐元素乘法；广播规则同 add"""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast('mul', a, b)
    a_data, b_data = a.data, b.data
    b_shape = b.shape

    def backward(g):
        return g * b_data, _unbroadcast(g * a_data, b_shape)

    return _emit(a_data * b_data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _emit(np.where(mask, x.data, 0.0), (x,), backward)


def max_over_rows(x: Tensor, group_size: int) -> Tensor:
    """
    分组最大池化：把 (B*group_size, d) 的行按样本分组，逐列取最大值得到 (B, d)

    次梯度只传给取到最大值的元素，并列时取最小下标。
    """
    rows, cols = x.shape
    if group_size <= 0 or rows % group_size != 0:
        raise ContractError(f"max_over_rows: {rows} 行无法按 {group_size} 分组")
    grouped = x.data.reshape(rows // group_size, group_size, cols)
    # np.argmax 在并列时返回第一个下标
    idx = np.argmax(grouped, axis=1)[:, None, :]
    out = np.take_along_axis(grouped, idx, axis=1)[:, 0, :]

    def backward(g):
        grad = np.zeros_like(grouped)
        np.put_along_axis(grad, idx, g[:, None, :], axis=1)
        return (grad.reshape(rows, cols),)

    return _emit(out, (x,), backward)


def mean(x: Tensor) -> Tensor:
    """全部元素的平均值，输出形状 (1, 1)"""
    n = x.size
    shape = x.shape

    def backward(g):
        return (np.full(shape, g.reshape(-1)[0] / n),)

    return _emit(np.array([[x.data.mean()]]), (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """
    融合的 softmax + 交叉熵，返回批平均损失 (1, 1)

    Args:
        logits: (B, C)
        labels: 长度 B 的整数标签
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    batch, n_classes = logits.shape
    if labels.shape[0] != batch:
        raise DimensionError('softmax_cross_entropy', logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(f"标签越界: 类别数 {n_classes}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(exp.sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(batch), labels].mean()

    def backward(g):
        grad = probs.copy()
        grad[np.arange(batch), labels] -= 1.0
        return (grad * (g.reshape(-1)[0] / batch),)

    return _emit(np.array([[loss]]), (logits,), backward)


# ==================== 结构运算 ====================

def concat_groups(a: Tensor, b: Tensor, group_a: int, group_b: int) -> Tensor:
    """
    按样本拼接两组行：每个样本输出 group_a 行来自 a，随后 group_b 行来自 b

    用于把投影后的前缀 token 拼到每个样本的文本 token 之前。
    """
    if a.shape[1] != b.shape[1]:
        raise DimensionError('concat_groups', a.shape, b.shape)
    if a.shape[0] % group_a or b.shape[0] % group_b or a.shape[0] // group_a != b.shape[0] // group_b:
        raise DimensionError('concat_groups', a.shape, b.shape)
    n = a.shape[0] // group_a
    cols = a.shape[1]
    out = np.concatenate(
        [a.data.reshape(n, group_a, cols), b.data.reshape(n, group_b, cols)], axis=1
    ).reshape(n * (group_a + group_b), cols)

    def backward(g):
        grouped = g.reshape(n, group_a + group_b, cols)
        return (grouped[:, :group_a, :].reshape(n * group_a, cols),
                grouped[:, group_a:, :].reshape(n * group_b, cols))

    return _emit(out, (a, b), backward)


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """均方误差（对所有元素取平均），target 视为常量"""
    diff = add(pred, Tensor(-np.asarray(target, dtype=np.float64).reshape(pred.shape)))
    return mean(mul(diff, diff))


# ==================== 反向传播 ====================

def backward(loss: Tensor) -> None:
    """
    从标量损失出发反向传播，把梯度累加到所有可达的 requires_grad 叶子上（不可达的叶子保持全0）

    多次调用会累加梯度，直到显式清零。
    """
    if loss.size != 1:
        raise ContractError(f"backward 需要标量损失，收到形状 {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("损失不是在激活的计算带下产生的")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, g_in in zip(node.inputs, node.backward(g)):
            if g_in is None:
                continue
            if inp._tape is tape:
                key = id(inp)
                grads[key] = grads[key] + g_in if key in grads else g_in
            elif inp.requires_grad:
                inp.grad = g_in.copy() if inp.grad is None else inp.grad + g_in
