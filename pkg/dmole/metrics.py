"""
持续学习指标模块 - AVG / Last / BWT 与汇总表

A[t][i] 为训练完第 t 个任务后在任务 i 上的得分；函数参数中的任务下标从0开始。
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .errors import ArtifactError, ContractError

UNDEFINED = '-'


@dataclass
class ScoreMatrix:
    """
    得分矩阵

    Attributes:
        task_names: N 个任务名
        rows: N×N 数组，未填写的位置为 NaN
        zero_shot_row: 训练前（t=0）的得分
    """
    task_names: List[str]
    rows: np.ndarray = None
    zero_shot_row: np.ndarray = None

    def __post_init__(self):
        n = len(self.task_names)
        if self.rows is None:
            self.rows = np.full((n, n), np.nan)
        if self.zero_shot_row is None:
            self.zero_shot_row = np.full(n, np.nan)
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.zero_shot_row = np.asarray(self.zero_shot_row, dtype=np.float64)

    @property
    def n(self) -> int:
        return len(self.task_names)

    def set_row(self, t: int, scores: Sequence[float]) -> None:
        """t=0 写零样本行，t=1..N 写训练第 t 个任务后的行"""
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (self.n,):
            raise ContractError(f"得分行长度应为 {self.n}，收到 {scores.shape}")
        if t == 0:
            self.zero_shot_row = scores
        else:
            self.rows[t - 1] = scores

    def is_complete(self) -> bool:
        return not np.isnan(self.rows).any() and not np.isnan(self.zero_shot_row).any()

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(np.vstack([self.zero_shot_row, self.rows]), columns=self.task_names)
        frame.insert(0, 'after_task', list(range(self.n + 1)))
        return frame

    def save_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format='%.17g')
        return path

    @classmethod
    def load_csv(cls, path: Union[str, Path]) -> 'ScoreMatrix':
        try:
            frame = pd.read_csv(path)
            names = [c for c in frame.columns if c != 'after_task']
            values = frame[names].to_numpy(dtype=np.float64)
        except (OSError, ValueError, KeyError, pd.errors.ParserError) as exc:
            raise ArtifactError(f"得分矩阵无法解析（{exc}）", [path]) from exc
        if values.shape != (len(names) + 1, len(names)):
            raise ArtifactError(f"得分矩阵形状应为 {(len(names) + 1, len(names))}，实际 {values.shape}", [path])
        return cls(task_names=names, rows=values[1:], zero_shot_row=values[0])


def _matrix(A) -> np.ndarray:
    return A.rows if isinstance(A, ScoreMatrix) else np.asarray(A, dtype=np.float64)


def avg(A, i: int) -> float:
    """AVG_i = (1/N) Σ_t A[t][i]"""
    rows = _matrix(A)
    return float(np.mean(rows[:, i]))


def last(A, i: int) -> float:
    """Last_i = A[N][i]"""
    rows = _matrix(A)
    return float(rows[-1, i])


def bwt(A, i: int) -> Optional[float]:
    """
    BWT_i = (1/(N−i)) Σ_{t>i} (A[t][i] − A[i][i])（1-based 记号）

    最后一个任务没有定义，返回 None（展示为 "-"）
    """
    rows = _matrix(A)
    n = rows.shape[0]
    if i >= n - 1:
        return None
    return float(np.mean(rows[i + 1:, i] - rows[i, i]))


def format_metric(value: Optional[float], digits: int = 4) -> str:
    return UNDEFINED if value is None else f"{value:.{digits}f}"


def summarize(scores: ScoreMatrix) -> Dict:
    """
    生成汇总

    Returns:
        dict: per_task 列表（task_id, task_name, avg, last, bwt）与 average（BWT 平均时排除未定义项）
    """
    per_task = []
    for i, name in enumerate(scores.task_names):
        per_task.append({
            'task_id': i + 1,
            'task_name': name,
            'avg': avg(scores, i),
            'last': last(scores, i),
            'bwt': bwt(scores, i),
        })
    defined_bwt = [row['bwt'] for row in per_task if row['bwt'] is not None]
    average = {
        'avg': float(np.mean([row['avg'] for row in per_task])) if per_task else float('nan'),
        'last': float(np.mean([row['last'] for row in per_task])) if per_task else float('nan'),
        'bwt': float(np.mean(defined_bwt)) if defined_bwt else None,
    }
    return {'per_task': per_task, 'average': average,
            'zero_shot': [float(v) for v in scores.zero_shot_row]}


def write_summary_csv(scores: ScoreMatrix, path: Union[str, Path]) -> Path:
    """
    summary.csv: task_id, task_name, avg, last, bwt（未定义为空字符串），最后一行为 average
    """
    summary = summarize(scores)
    rows = []
    for row in summary['per_task']:
        rows.append({**row, 'bwt': '' if row['bwt'] is None else row['bwt']})
    average = summary['average']
    rows.append({'task_id': 'average', 'task_name': 'Average', 'avg': average['avg'],
                 'last': average['last'], 'bwt': '' if average['bwt'] is None else average['bwt']})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=['task_id', 'task_name', 'avg', 'last', 'bwt']).to_csv(
        path, index=False, float_format='%.6f')
    return path
