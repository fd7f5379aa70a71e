"""
运行目录模块 - run_manifest.yaml 的读写与一致性检查
"""
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Union

import yaml

from .config import RunConfig, config_hash, load_config
from .errors import ArtifactError, ManifestError

CODE_VERSION = '0.1.0'
MANIFEST_NAME = 'run_manifest.yaml'
CONFIG_NAME = 'config.yaml'

STATUS_RUNNING = 'running'
STATUS_COMPLETED = 'completed'
STATUS_FAILED = 'failed'


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec='seconds')


@dataclass
class RunManifest:
    """
    config_hash: 配置快照的 SHA-256
    code_version: 写出本次运行的 dmole 版本
    files: 运行目录下的全部产物（相对路径，不含 manifest 自身）
    """
    config_hash: str
    code_version: str = CODE_VERSION
    started_at: str = field(default_factory=_now)
    finished_at: Optional[str] = None
    status: str = STATUS_RUNNING
    error: Optional[str] = None
    files: List[str] = field(default_factory=list)


def list_artifacts(run_dir: Union[str, Path]) -> List[str]:
    run_dir = Path(run_dir)
    return sorted(p.relative_to(run_dir).as_posix() for p in run_dir.rglob('*')
                  if p.is_file() and p.name != MANIFEST_NAME)


def write_manifest(run_dir: Union[str, Path], manifest: RunManifest) -> Path:
    path = Path(run_dir) / MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(asdict(manifest), sort_keys=False, allow_unicode=True), encoding='utf-8')
    return path


def finish_manifest(run_dir: Union[str, Path], manifest: RunManifest, status: str,
                    error: Optional[str] = None) -> RunManifest:
    """填写结束时间、状态和文件清单后写回"""
    manifest.finished_at = _now()
    manifest.status = status
    manifest.error = error
    manifest.files = list_artifacts(run_dir)
    write_manifest(run_dir, manifest)
    return manifest


def read_manifest(run_dir: Union[str, Path]) -> RunManifest:
    path = Path(run_dir) / MANIFEST_NAME
    if not path.is_file():
        raise ArtifactError("运行目录缺少 manifest", [path])
    try:
        data = yaml.safe_load(path.read_text(encoding='utf-8'))
        return RunManifest(**data)
    except (yaml.YAMLError, TypeError) as exc:
        raise ArtifactError(f"manifest 无法解析（{exc}）", [path]) from exc


def load_run_config(run_dir: Union[str, Path]) -> RunConfig:
    """
    读取运行目录的配置快照，并与 manifest 中记录的哈希比对

    Raises:
        ArtifactError: 配置快照或 manifest 缺失
        ManifestError: 哈希不一致（配置在运行后被改动）
    """
    run_dir = Path(run_dir)
    config_path = run_dir / CONFIG_NAME
    if not config_path.is_file():
        raise ArtifactError("运行目录缺少配置快照", [config_path])
    config = load_config(config_path)
    manifest = read_manifest(run_dir)
    actual = config_hash(config)
    if actual != manifest.config_hash:
        raise ManifestError(f"配置哈希不一致（manifest {manifest.config_hash[:12]}，实际 {actual[:12]}）",
                            [config_path, run_dir / MANIFEST_NAME])
    return config
