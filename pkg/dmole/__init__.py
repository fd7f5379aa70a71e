"""
D-MoLE 桌面实验工具模块
"""
from .config import RunConfig, apply_overrides, load_config, save_config
from .continual_trainer import evaluate_all, prepare_stream, run_stream, run_task, sweep_thresholds
from .gradcheck import get_verification_summary, verify_gradients
from .metrics import ScoreMatrix, avg, bwt, last, summarize
from .proxy_allocator import allocate_layers, compute_sensitivities, split_budget
from .report_exporter import generate_txt_report, get_download_filename, render_reports
from .router import calibrate_threshold, route, train_autoencoder
from .run_store import CODE_VERSION
from .task_gen import build_preset, generate, subset

__version__ = CODE_VERSION

__all__ = [
    'RunConfig',
    'load_config',
    'save_config',
    'apply_overrides',
    'run_stream',
    'run_task',
    'evaluate_all',
    'prepare_stream',
    'sweep_thresholds',
    'verify_gradients',
    'get_verification_summary',
    'ScoreMatrix',
    'avg',
    'last',
    'bwt',
    'summarize',
    'compute_sensitivities',
    'split_budget',
    'allocate_layers',
    'train_autoencoder',
    'calibrate_threshold',
    'route',
    'generate_txt_report',
    'get_download_filename',
    'render_reports',
    'build_preset',
    'generate',
    'subset',
]
