"""
配置模块 - YAML 运行配置的解析、校验、覆盖与序列化
"""
import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

import yaml

from .errors import ConfigError, UsageError
from .strategies import STRATEGY_NAMES
from .task_gen import PRESETS
from .toy_model import ModelConfig

OUTPUT_ROOT_ENV = 'DMOLE_OUTPUT_ROOT'
ROUTER_FEATURE_SOURCES = ('subset', 'train')


@dataclass
class StreamConfig:
    preset: str = 'heterogeneous-5'
    n_train: Optional[int] = None
    n_test: Optional[int] = None
    tasks: List[Dict] = field(default_factory=list)


@dataclass
class AllocationConfig:
    budget_ratio: float = 0.5
    b_total: Optional[int] = None
    subset_fraction: float = 0.01
    subset_min: int = 64


@dataclass
class RouterConfig:
    hidden: int = 128
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 16
    threshold_scale: float = 1.2
    top_k: int = 2
    features: str = 'subset'


@dataclass
class TrainingConfig:
    epochs: int = 3
    lr: float = 1e-3
    batch_size: int = 32
    eval_batch_size: int = 256


@dataclass
class PretrainConfig:
    n_train: int = 1000
    epochs: int = 5
    lr: float = 3e-3
    batch_size: int = 32


SECTIONS = {
    'stream': StreamConfig,
    'model': ModelConfig,
    'allocation': AllocationConfig,
    'router': RouterConfig,
    'training': TrainingConfig,
    'pretrain': PretrainConfig,
}


@dataclass
class RunConfig:
    seed: int = 0
    strategy: str = 'dmole'
    output_dir: str = 'runs/default'
    stream: StreamConfig = field(default_factory=StreamConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    allocation: AllocationConfig = field(default_factory=AllocationConfig)
    router: RouterConfig = field(default_factory=RouterConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    @property
    def b_total(self) -> int:
        """每个任务的总预算（层数），默认 budget_ratio × 总层数"""
        if self.allocation.b_total is not None:
            return int(self.allocation.b_total)
        return int(round(self.allocation.budget_ratio * self.model.total_layers))

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Optional[Dict]) -> 'RunConfig':
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "未知的配置项")
        kwargs = {}
        for name, value in data.items():
            section_cls = SECTIONS.get(name)
            if section_cls is None:
                kwargs[name] = value
                continue
            if value is None:
                value = {}
            if not isinstance(value, dict):
                raise ConfigError(name, "应为映射")
            section_fields = {f.name for f in fields(section_cls)}
            bad = sorted(set(value) - section_fields)
            if bad:
                raise ConfigError(f"{name}.{bad[0]}", "未知的配置项")
            kwargs[name] = section_cls(**value)
        return cls(**kwargs)

    def validate(self) -> 'RunConfig':
        """在任何计算之前做完整校验，失败时抛出带字段名的 ConfigError"""
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError('seed', f"必须为非负整数，收到 {self.seed!r}")
        if self.strategy not in STRATEGY_NAMES:
            raise ConfigError('strategy', f"未知策略 {self.strategy!r}（可选: {', '.join(STRATEGY_NAMES)}）")
        if not self.output_dir:
            raise ConfigError('output_dir', "不能为空")

        self.model.validate()

        stream = self.stream
        if not stream.tasks and stream.preset not in PRESETS:
            raise ConfigError('stream.preset', f"未知预设 {stream.preset!r}（可选: {', '.join(PRESETS)}）")
        for name in ('n_train', 'n_test'):
            value = getattr(stream, name)
            if value is not None and (not isinstance(value, int) or value <= 0):
                raise ConfigError(f"stream.{name}", f"必须为正整数，收到 {value!r}")
        for idx, task in enumerate(stream.tasks):
            for key in ('name', 'alpha'):
                if key not in task:
                    raise ConfigError(f"stream.tasks[{idx}].{key}", "缺少必填项")
            if not 0.0 <= float(task['alpha']) <= 1.0:
                raise ConfigError(f"stream.tasks[{idx}].alpha", "必须在 [0, 1] 内")

        alloc = self.allocation
        if not 0.0 < alloc.budget_ratio <= 1.0:
            raise ConfigError('allocation.budget_ratio', "必须在 (0, 1] 内")
        if alloc.b_total is not None and (not isinstance(alloc.b_total, int) or alloc.b_total <= 0):
            raise ConfigError('allocation.b_total', "必须为正整数")
        if self.b_total <= 0:
            raise ConfigError('allocation.budget_ratio', "得到的总预算为0")
        if self.b_total > self.model.total_layers:
            raise ConfigError('allocation.b_total', f"不能超过总层数 {self.model.total_layers}")
        if not 0.0 < alloc.subset_fraction <= 1.0:
            raise ConfigError('allocation.subset_fraction', "必须在 (0, 1] 内")
        if alloc.subset_min <= 0:
            raise ConfigError('allocation.subset_min', "必须为正整数")

        router = self.router
        if router.top_k < 1:
            raise ConfigError('router.top_k', "K 必须 ≥ 1")
        if router.threshold_scale <= 0:
            raise ConfigError('router.threshold_scale', "必须 > 0")
        if router.features not in ROUTER_FEATURE_SOURCES:
            raise ConfigError('router.features', f"可选: {', '.join(ROUTER_FEATURE_SOURCES)}")
        for name in ('hidden', 'epochs', 'batch_size'):
            if getattr(router, name) <= 0:
                raise ConfigError(f"router.{name}", "必须为正整数")
        if router.lr <= 0:
            raise ConfigError('router.lr', "必须 > 0")

        for section in ('training', 'pretrain'):
            cfg = getattr(self, section)
            for f in fields(cfg):
                if getattr(cfg, f.name) is None or getattr(cfg, f.name) <= 0:
                    raise ConfigError(f"{section}.{f.name}", "必须 > 0")
        return self


# ==================== 读写 ====================

def load_config(path: Union[str, Path]) -> RunConfig:
    """
    读取 YAML 配置文件

    Raises:
        UsageError: 文件不存在（"config not found"）
        ConfigError: 内容无法解析或包含未知字段
    """
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding='utf-8'))
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"YAML 解析失败: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(str(path), "顶层应为映射")
    return RunConfig.from_dict(data)


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False, allow_unicode=True)


def save_config(config: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(config), encoding='utf-8')
    return path


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


# ==================== 覆盖 ====================

def flatten_config(config: Dict, parent_key: str = '', sep: str = '.') -> Dict[str, Any]:
    """把嵌套字典展开成点号分隔的键"""
    flat = {}
    for key, value in config.items():
        new_key = f"{parent_key}{sep}{key}" if parent_key else key
        if isinstance(value, dict):
            flat.update(flatten_config(value, new_key, sep))
        else:
            flat[new_key] = value
    return flat


def parse_set_overrides(items: Iterable[str]) -> Dict[str, Any]:
    """解析 --set section.key=value，值按 YAML 标量解析"""
    overrides = {}
    for item in items or []:
        if '=' not in item:
            raise UsageError(f"--set 需要 key=value 形式，收到 {item!r}")
        key, raw = item.split('=', 1)
        overrides[key.strip()] = yaml.safe_load(raw)
    return overrides


def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """
    按点号键覆盖配置字段，返回新的 RunConfig（值为 None 的覆盖被忽略）
    """
    data = copy.deepcopy(config.to_dict())
    for key, value in overrides.items():
        if value is None:
            continue
        parts = key.split('.')
        node = data
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(key, "未知的配置项")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(key, "未知的配置项")
        node[parts[-1]] = value
    return RunConfig.from_dict(data)


def resolve_output_dir(config: RunConfig) -> Path:
    """相对输出目录以环境变量 DMOLE_OUTPUT_ROOT 为根"""
    out = Path(config.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out
