"""
错误类型模块 - 按类别划分异常，每类对应一个命令行退出码
"""
from typing import Iterable, Optional

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_VALIDATION = 3
EXIT_PARTIAL = 4


class DmoleError(Exception):
    """所有实验室异常的基类"""
    exit_code = EXIT_RUNTIME
    category = 'runtime'


class ContractError(DmoleError):
    """调用前置条件被违反"""
    category = 'contract'


class DimensionError(ContractError):
    """张量形状不匹配"""
    category = 'dimension'

    def __init__(self, op: str, shape_a, shape_b):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{op}: 形状不匹配 {self.shape_a} 与 {self.shape_b}")


class DegenerateTaskError(DmoleError):
    """两个模块的难度分数都为0，无法按比例分配预算"""
    category = 'degenerate-task'


class GenerationError(DmoleError):
    """合成任务不可学习（线性读出未达标）"""
    category = 'generation'


class FreezeViolationError(DmoleError):
    """冻结参数的校验和在训练中发生了变化"""
    category = 'freeze'


class ConfigError(DmoleError):
    """配置校验失败，消息中带字段名"""
    exit_code = EXIT_VALIDATION
    category = 'validation'

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class UsageError(DmoleError):
    exit_code = EXIT_USAGE
    category = 'usage'


class ArtifactError(DmoleError):
    """运行产物缺失或损坏"""
    category = 'artifact'

    def __init__(self, message: str, files: Optional[Iterable] = None):
        self.files = [str(f) for f in (files or [])]
        if self.files:
            message = f"{message}: {', '.join(self.files)}"
        super().__init__(message)


class ManifestError(ArtifactError):
    category = 'manifest'
