"""
命令行模块 - run / sweep-thresholds / report / generate-data / verify-gradients

退出码: 0 成功，1 用法错误，2 运行时错误（包括未预料的异常，记录完整堆栈），3 配置校验失败，4 部分完成（报告有警告或运行失败）
"""
import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .config import RunConfig, apply_overrides, load_config, parse_set_overrides
from .continual_trainer import run_stream, stream_specs, sweep_thresholds
from .errors import EXIT_OK, EXIT_PARTIAL, EXIT_RUNTIME, DmoleError, UsageError
from .gradcheck import get_verification_summary, verify_gradients
from .log_utils import configure_logging, get_logger
from .metrics import format_metric
from .report_exporter import render_reports
from .run_store import STATUS_FAILED, list_artifacts, read_manifest, write_manifest
from .task_gen import generate, save_dataset

logger = get_logger(__name__)

DEFAULT_SCALES = (0.1, 0.5, 1.0, 2.0, 10.0)
SWEEP_FILE = 'threshold_sweep.csv'


class _Parser(argparse.ArgumentParser):
    """参数错误时抛出 UsageError（退出码1），而不是 argparse 默认的退出码2"""

    def error(self, message):
        raise UsageError(message)


def build_config(config_path: Optional[str], flags: Dict, set_items: Optional[Sequence[str]] = None) -> RunConfig:
    """
    合并配置：文件 < 专用命令行参数 < --set
    """
    config = load_config(config_path) if config_path else RunConfig()
    if flags.get('stream.preset') is not None:
        flags = {**flags, 'stream.tasks': []}
    config = apply_overrides(config, flags)
    config = apply_overrides(config, parse_set_overrides(set_items))
    return config.validate()


def _run_flags(args) -> Dict:
    return {
        'strategy': args.strategy,
        'seed': args.seed,
        'stream.preset': args.preset,
        'output_dir': args.output_dir,
        'router.threshold_scale': args.threshold_scale,
        'router.top_k': args.top_k,
    }


# ==================== 命令 ====================

def cmd_run(config_path: Optional[str], flags: Dict, set_items: Optional[Sequence[str]] = None) -> int:
    config = build_config(config_path, flags, set_items)
    result = run_stream(config)
    average = result.summary['average']
    print(f"运行完成: {result.run_dir}")
    print(f"  Average AVG={format_metric(average['avg'])} Last={format_metric(average['last'])} "
          f"BWT={format_metric(average['bwt'])}")
    return EXIT_OK


def cmd_sweep_thresholds(run_dir: str, scales: Sequence[float] = DEFAULT_SCALES) -> int:
    frame = sweep_thresholds(run_dir, scales)
    path = Path(run_dir) / SWEEP_FILE
    frame.to_csv(path, index=False, float_format='%.6f')
    print(frame.to_string(index=False))
    print(f"已写出 {path}")
    return EXIT_OK


def cmd_report(run_dir: str) -> int:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise UsageError(f"运行目录不存在: {run_dir}")
    result = render_reports(run_dir)
    status = None
    if (run_dir / 'run_manifest.yaml').is_file():
        manifest = read_manifest(run_dir)
        status = manifest.status
        manifest.files = list_artifacts(run_dir)
        write_manifest(run_dir, manifest)
    for path in result['files']:
        print(f"  {path}")
    for warning in result['warnings']:
        print(f"⚠️ {warning}", file=sys.stderr)
    if result['warnings'] or status == STATUS_FAILED:
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_generate_data(config_path: Optional[str], flags: Dict, out_dir: str, export_csv: bool = True) -> int:
    config = build_config(config_path, flags)
    preset = stream_specs(config)
    out = Path(out_dir)
    specs = list(preset.tasks) + [s for s in (preset.holdout, preset.pretrain) if s is not None]
    for spec in specs:
        written = save_dataset(generate(spec), out / f"{spec.task_id:02d}_{spec.name}", export_csv)
        print(f"{spec.name}: {len(written)} 个文件")
    return EXIT_OK


def cmd_verify_gradients(trials: int = 100, seed: int = 0, include_model: bool = True) -> int:
    report = verify_gradients(trials=trials, seed=seed, include_model=include_model)
    print(f"梯度校验: {get_verification_summary(report)}")
    print(report['recommendation'])
    print(f"  用例数: {len(report['results'])}，最大相对误差: {report['max_rel_error']:.3e}")
    return EXIT_OK if report['status'] == 'pass' else EXIT_RUNTIME


# ==================== 入口 ====================

def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', help='YAML 配置文件')
    parser.add_argument('--strategy', help='dmole / seq_ft / dense_mole / sparse_mole / mola 或消融变体')
    parser.add_argument('--seed', type=int, help='根随机种子')
    parser.add_argument('--preset', help='任务流预设（会替换配置中显式列出的任务）')
    parser.add_argument('--output-dir', dest='output_dir', help='运行输出目录')
    parser.add_argument('--threshold-scale', dest='threshold_scale', type=float, help='路由阈值系数')
    parser.add_argument('--top-k', dest='top_k', type=int, help='评估时激活的专家数 K')


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='dmole', description='D-MoLE 持续多模态指令微调桌面实验')
    parser.add_argument('--log-level', default='INFO', help='日志级别')
    sub = parser.add_subparsers(dest='command', parser_class=_Parser)

    run = sub.add_parser('run', help='执行一条任务流')
    _add_config_flags(run)
    run.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                     help='点号分隔的任意配置覆盖，可重复')

    sweep = sub.add_parser('sweep-thresholds', help='在最终检查点上扫描阈值系数')
    sweep.add_argument('run_dir')
    sweep.add_argument('--scales', type=float, nargs='+', default=list(DEFAULT_SCALES))

    report = sub.add_parser('report', help='重新生成报告')
    report.add_argument('run_dir')

    data = sub.add_parser('generate-data', help='导出任务流数据集')
    _add_config_flags(data)
    data.add_argument('--no-csv', dest='export_csv', action='store_false', help='不导出 CSV')

    grad = sub.add_parser('verify-gradients', help='自动微分与中心差分对比')
    grad.add_argument('--trials', type=int, default=100)
    grad.add_argument('--seed', type=int, default=0)
    grad.add_argument('--no-model', dest='include_model', action='store_false', help='跳过完整模型损失')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.log_level.upper())
        if args.command == 'run':
            return cmd_run(args.config, _run_flags(args), args.set)
        if args.command == 'sweep-thresholds':
            return cmd_sweep_thresholds(args.run_dir, args.scales)
        if args.command == 'report':
            return cmd_report(args.run_dir)
        if args.command == 'generate-data':
            if not args.output_dir:
                raise UsageError("generate-data 需要 --output-dir")
            return cmd_generate_data(args.config, {**_run_flags(args), 'output_dir': None},
                                     args.output_dir, args.export_csv)
        if args.command == 'verify-gradients':
            return cmd_verify_gradients(args.trials, args.seed, args.include_model)
        raise UsageError("需要指定命令: run / sweep-thresholds / report / generate-data / verify-gradients")
    except DmoleError as exc:
        logger.error(f"[{exc.category}] {exc}")
        print(f"错误: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:
        logger.exception(f"未预料的错误: {exc}")
        print(f"错误: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
