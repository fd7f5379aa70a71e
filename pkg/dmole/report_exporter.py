"""
报告导出模块 - 由运行目录中的产物生成热力图（CSV + SVG）、指标汇总表和 TXT 报告

同一运行目录重复渲染得到逐字节相同的输出（报告内不写入生成时间）。
"""
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Union

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import yaml  # noqa: E402

from .errors import ArtifactError  # noqa: E402
from .experts import MODULES  # noqa: E402
from .log_utils import get_logger  # noqa: E402
from .metrics import ScoreMatrix, format_metric, summarize, write_summary_csv  # noqa: E402

logger = get_logger(__name__)

REPORT_DIR = 'reports'
SVG_RC = {'svg.hashsalt': 'dmole-report', 'svg.fonttype': 'none'}


# ==================== 读取产物 ====================

class _ArtifactReader:
    """读取运行产物：缺失的文件记为警告，损坏的文件记为错误"""

    def __init__(self, run_dir: Path):
        self.run_dir = run_dir
        self.warnings: List[str] = []
        self.corrupt: List[Path] = []

    def _missing(self, name: str) -> bool:
        if (self.run_dir / name).is_file():
            return False
        self.warnings.append(f"缺少产物 {name}")
        return True

    def csv(self, name: str, columns: List[str]) -> Optional[pd.DataFrame]:
        if self._missing(name):
            return None
        path = self.run_dir / name
        try:
            frame = pd.read_csv(path)
        except (ValueError, pd.errors.ParserError, pd.errors.EmptyDataError):
            self.corrupt.append(path)
            return None
        if any(c not in frame.columns for c in columns):
            self.corrupt.append(path)
            return None
        return frame

    def yaml(self, name: str):
        if self._missing(name):
            return None
        path = self.run_dir / name
        try:
            return yaml.safe_load(path.read_text(encoding='utf-8'))
        except yaml.YAMLError:
            self.corrupt.append(path)
            return None

    def scores(self) -> Optional[ScoreMatrix]:
        if self._missing('score_matrix.csv'):
            return None
        try:
            return ScoreMatrix.load_csv(self.run_dir / 'score_matrix.csv')
        except ArtifactError:
            self.corrupt.append(self.run_dir / 'score_matrix.csv')
            return None


# ==================== 热力图 ====================

def save_heatmap(matrix: pd.DataFrame, title: str, path: Union[str, Path], cmap: str = 'viridis',
                 value_format: str = '{:.2f}') -> Path:
    """
    把矩阵画成简单的带标注网格 SVG；NaN 单元格画成灰色（表示不存在）
    """
    path = Path(path)
    values = matrix.to_numpy(dtype=np.float64)
    with plt.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(1.0 + 0.7 * max(1, values.shape[1]), 1.0 + 0.5 * max(1, values.shape[0])))
        colors = plt.get_cmap(cmap).copy()
        colors.set_bad('lightgray')
        image = ax.imshow(np.ma.masked_invalid(values), cmap=colors, aspect='auto')
        ax.set_xticks(range(values.shape[1]))
        ax.set_xticklabels([str(c) for c in matrix.columns], rotation=45, ha='right')
        ax.set_yticks(range(values.shape[0]))
        ax.set_yticklabels([str(i) for i in matrix.index])
        ax.set_xlabel(str(matrix.columns.name or ''))
        ax.set_ylabel(str(matrix.index.name or ''))
        ax.set_title(title)
        for (row, col), value in np.ndenumerate(values):
            if not np.isnan(value):
                ax.text(col, row, value_format.format(value), ha='center', va='center', fontsize=7, color='white')
        fig.colorbar(image, ax=ax)
        fig.tight_layout()
        fig.savefig(path, format='svg', metadata={'Date': None})
        plt.close(fig)
    return path


def _save_matrix(matrix: pd.DataFrame, out_dir: Path, stem: str, title: str, files: List[Path], **kwargs) -> None:
    csv_path = out_dir / f"{stem}.csv"
    matrix.to_csv(csv_path, float_format='%.6f')
    files.append(csv_path)
    files.append(save_heatmap(matrix, title, out_dir / f"{stem}.svg", **kwargs))


def sensitivity_matrix(sensitivity: pd.DataFrame, module: str) -> pd.DataFrame:
    """任务 × 层 的梯度范数"""
    frame = sensitivity[sensitivity['module'] == module]
    matrix = frame.pivot(index='task_id', columns='layer', values='grad_norm').sort_index()
    matrix.columns = [f"layer_{c}" for c in matrix.columns]
    matrix.index.name = 'task_id'
    matrix.columns.name = 'layer'
    return matrix


def allocation_matrix(plans: List[Dict], module: str) -> pd.DataFrame:
    """任务 × 层 的分配指示；每行之和等于该模块预算"""
    rows = {plan['task_id']: plan['indicators'][module] for plan in plans}
    n_layers = max((len(v) for v in rows.values()), default=0)
    matrix = pd.DataFrame.from_dict(rows, orient='index', columns=[f"layer_{i}" for i in range(n_layers)])
    matrix = matrix.sort_index().astype(float)
    matrix.index.name = 'task_id'
    matrix.columns.name = 'layer'
    return matrix


def activation_matrix(activation: pd.DataFrame, n_tasks: int) -> pd.DataFrame:
    """
    评估任务 × 专家 的激活频率

    第 i 行取训练完任务 i 之后对任务 i 的评估；那时还不存在的专家为 NaN。
    """
    frame = activation[(activation['eval_task'].astype(str) == activation['after_task'].astype(str))]
    matrix = pd.DataFrame(np.nan, index=range(1, n_tasks + 1), columns=range(1, n_tasks + 1))
    for _, row in frame.iterrows():
        eval_task, expert = int(row['eval_task']), int(row['expert_task'])
        if eval_task in matrix.index and expert in matrix.columns:
            matrix.loc[eval_task, expert] = float(row['frequency'])
    matrix.columns = [f"expert_{c}" for c in matrix.columns]
    matrix.index.name = 'eval_task'
    matrix.columns.name = 'expert'
    return matrix


# ==================== TXT 报告 ====================

def generate_txt_report(summary: Dict, scores: ScoreMatrix, config: Optional[Dict] = None,
                        plans: Optional[List[Dict]] = None, routing: Optional[pd.DataFrame] = None,
                        dynamics: Optional[pd.DataFrame] = None, status: Optional[str] = None) -> str:
    """
    生成 TXT 格式的运行报告

    Args:
        summary: metrics.summarize 的结果
        scores: 得分矩阵
        config: 配置快照（字典）
        plans: 每个任务的分配方案
        routing: routing.csv 内容
        dynamics: dynamics.csv 内容
        status: manifest 中的运行状态

    Returns:
        报告文本
    """
    config = config or {}
    lines = []
    lines.append("=" * 80)
    lines.append("D-MoLE 持续学习运行报告")
    lines.append("=" * 80)
    lines.append("")
    lines.append(f"策略: {config.get('strategy', '未知')}")
    lines.append(f"随机种子: {config.get('seed', '未知')}")
    lines.append(f"任务流: {config.get('stream', {}).get('preset', '未知')}")
    lines.append(f"任务数: {scores.n}")
    lines.append(f"运行状态: {status or '未知'}")
    lines.append("")

    lines.append("=" * 80)
    lines.append("指标汇总")
    lines.append("=" * 80)
    lines.append("")
    lines.append(f"{'任务':<20} {'零样本':<10} {'AVG':<10} {'Last':<10} {'BWT':<10}")
    lines.append("-" * 80)
    for row, zero_shot in zip(summary['per_task'], summary['zero_shot']):
        lines.append(f"{row['task_name']:<20} {zero_shot:<10.4f} {format_metric(row['avg']):<10} "
                     f"{format_metric(row['last']):<10} {format_metric(row['bwt']):<10}")
    average = summary['average']
    lines.append("-" * 80)
    zero_mean = float(np.mean(summary['zero_shot'])) if summary['zero_shot'] else float('nan')
    lines.append(f"{'Average':<20} {zero_mean:<10.4f} {format_metric(average['avg']):<10} "
                 f"{format_metric(average['last']):<10} {format_metric(average['bwt']):<10}")
    lines.append("")

    lines.append("=" * 80)
    lines.append("得分矩阵（行: 训练完第 t 个任务后；t=0 为零样本）")
    lines.append("=" * 80)
    lines.append("")
    lines.append(f"{'t':<6}" + ''.join(f"{name[:12]:<14}" for name in scores.task_names))
    for t, row in enumerate(np.vstack([scores.zero_shot_row, scores.rows])):
        lines.append(f"{t:<6}" + ''.join(f"{value:<14.4f}" for value in row))
    lines.append("")

    for plan in plans or []:
        task_id = plan['task_id']
        name = scores.task_names[task_id - 1] if task_id - 1 < scores.n else str(task_id)
        lines.append("=" * 80)
        lines.append(f"任务 {task_id} - {name}")
        lines.append("=" * 80)
        lines.append("")
        lines.append(f"预算: B_vision={plan['b_vision']} B_llm={plan['b_llm']}"
                     f"（r_vision={plan['r_vision']:.3f}, r_llm={plan['r_llm']:.3f}）")
        for module in MODULES:
            selected = [i for i, flag in enumerate(plan['indicators'][module]) if flag]
            lines.append(f"  {module} 分配层: {selected}")
        ranks = plan.get('ranks') or {}
        for module in MODULES:
            lines.append(f"  {module} 逐层秩: {list(ranks.get(module, []))}")
        lines.append(f"新增可训练参数: {plan['trainable_params']}（参数预算 {plan.get('param_budget', 0)}）")
        lines.append(f"迁移专家: {plan.get('transfer_expert') if plan.get('transfer_expert') is not None else '无'}")
        if plan.get('degenerate'):
            lines.append("  ⚠️ 两个模块分数均为0，按 50/50 划分")
        train_loss = plan.get('train_loss') or []
        if train_loss:
            lines.append(f"训练损失: {train_loss[0]:.4f} → {train_loss[-1]:.4f}")
        if dynamics is not None:
            part = dynamics[dynamics['task_id'] == task_id]
            values = ', '.join(f"{r.module}={r.relative_change:.4f}" for r in part.itertuples())
            lines.append(f"相对权重变化: {values or '无'}")
        if routing is not None:
            own = routing[(routing['after_task'].astype(str) == str(task_id))
                          & (routing['eval_task'].astype(str) == str(task_id))]
            for r in own.itertuples():
                lines.append(f"本任务路由: 回退率 {r.fallback_rate:.3f}，top-1 命中率 {r.top1_accuracy:.3f}")
            unseen = routing[(routing['after_task'].astype(str) == str(task_id))
                             & (routing['eval_task'].astype(str) == 'holdout')]
            for r in unseen.itertuples():
                lines.append(f"未知任务拒绝率: {r.fallback_rate:.3f}")
        lines.append("")

    lines.append("=" * 80)
    lines.append("说明:")
    lines.append("  - AVG: 该任务在所有阶段得分的平均")
    lines.append("  - Last: 训练完最后一个任务后的得分")
    lines.append("  - BWT: 后续阶段相对于刚学完时的得分变化，最后一个任务没有定义（显示为 -）")
    lines.append("  - Average 行的 BWT 只对有定义的任务求平均")
    lines.append("=" * 80)
    lines.append("")
    return '\n'.join(lines)


def get_download_filename(run_name: str = "未命名运行") -> str:
    timestamp = datetime.now().strftime('%Y%m%d_%H%M%S')
    clean_name = run_name.replace(' ', '_').replace('/', '_')
    return f"运行报告_{clean_name}_{timestamp}.txt"


# ==================== 入口 ====================

def render_reports(run_dir: Union[str, Path], status: Optional[str] = None) -> Dict:
    """
    重新生成 reports/ 下的全部报告

    Args:
        run_dir: 运行目录
        status: 写入报告的运行状态，默认取 manifest 中的记录

    Returns:
        dict: files（写出的文件）、warnings（缺失产物的警告）

    Raises:
        ArtifactError: 有产物损坏（列出全部损坏文件）
    """
    run_dir = Path(run_dir)
    out_dir = run_dir / REPORT_DIR
    out_dir.mkdir(parents=True, exist_ok=True)
    reader = _ArtifactReader(run_dir)
    files: List[Path] = []

    scores = reader.scores()
    plans = reader.yaml('plans.yaml')
    config = reader.yaml('config.yaml')
    manifest = reader.yaml('run_manifest.yaml')
    sensitivity = reader.csv('sensitivity.csv', ['task_id', 'module', 'layer', 'grad_norm'])
    activation = reader.csv('activation.csv', ['after_task', 'eval_task', 'expert_task', 'frequency'])
    routing = reader.csv('routing.csv', ['after_task', 'eval_task', 'fallback_rate', 'top1_accuracy'])
    dynamics = reader.csv('dynamics.csv', ['task_id', 'module', 'relative_change'])
    if reader.corrupt:
        raise ArtifactError("运行产物损坏", reader.corrupt)

    if sensitivity is not None and len(sensitivity):
        for module in MODULES:
            _save_matrix(sensitivity_matrix(sensitivity, module), out_dir, f"sensitivity_{module}",
                         f"{module} layer gradient norm", files, cmap='magma')
    if plans:
        for module in MODULES:
            _save_matrix(allocation_matrix(plans, module), out_dir, f"allocation_{module}",
                         f"{module} expert allocation", files, cmap='Blues', value_format='{:.0f}')
    if activation is not None and scores is not None:
        _save_matrix(activation_matrix(activation, scores.n), out_dir, 'activation',
                     'expert activation frequency', files, cmap='Greens')
    if dynamics is not None and len(dynamics):
        matrix = dynamics.pivot(index='task_id', columns='module', values='relative_change').sort_index()
        matrix.index.name = 'task_id'
        matrix.columns.name = 'module'
        _save_matrix(matrix, out_dir, 'dynamics', 'relative weight change', files, value_format='{:.3f}')

    if scores is not None:
        if not scores.is_complete():
            reader.warnings.append("得分矩阵不完整（运行可能中途失败）")
        files.append(write_summary_csv(scores, out_dir / 'summary.csv'))
        text = generate_txt_report(summarize(scores), scores, config, plans, routing, dynamics,
                                   status=status or (manifest or {}).get('status'))
        report_path = out_dir / 'report.txt'
        report_path.write_text(text, encoding='utf-8')
        files.append(report_path)

    for warning in reader.warnings:
        logger.warning(f"{run_dir}: {warning}")
    return {'files': files, 'warnings': reader.warnings}
