"""
持续学习训练模块 - 按任务流依次执行: 子集采样 → 零成本代理 → 预算划分 → 专家分配 → 自编码器路由 → 带迁移的专家训练 → 全任务评估

任何时刻只持有当前任务的训练划分；任务结束后立即丢弃引用（没有任何回放缓存）。
"""
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml

from .autograd import ComputationTape, backward
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, resolve_output_dir, save_config
from .errors import ArtifactError, ContractError, FreezeViolationError
from .experts import ExpertBank, bank_checksums
from .log_utils import configure_logging, detach_file_logging, get_logger
from .metrics import ScoreMatrix, summarize
from .optim import Optimizer
from .proxy_allocator import (AllocationPlan, compute_sensitivities, dump_sensitivities, relative_dynamics,
                              sensitivity_records)
from .report_exporter import render_reports
from .router import (RoutingDecision, TaskAutoencoder, calibrate_threshold, export_router_embeddings,
                     route_batch, select_transfer_expert, train_autoencoder)
from .run_store import (CONFIG_NAME, STATUS_COMPLETED, STATUS_FAILED, RunManifest, finish_manifest,
                        load_run_config, write_manifest)
from .seeding import derive_seed
from .strategies import StrategyProfile, get_strategy, plan_for_strategy
from .task_gen import (Split, StreamPreset, TaskDataset, TaskSpec, build_preset, generate, minibatches,
                       pretrain_spec, subset)
from .toy_model import (ToyMLLM, backbone_checksum, batch_loss, count_trainable, effective_weights,
                        init_toy_model, pooled_features, predict, pretrain_backbone, set_trainable)

logger = get_logger(__name__)

CHECKPOINT_DIR = 'checkpoints'
EVAL_DATA_DIR = 'eval_data'


@dataclass
class StreamData:
    """一条任务流的全部数据；train 被丢弃后置为 None"""
    tasks: List[TaskDataset]
    holdout: Optional[TaskDataset] = None
    pretrain: Optional[TaskDataset] = None

    @property
    def task_names(self) -> List[str]:
        return [ds.spec.name for ds in self.tasks]

    def test_splits(self) -> Dict[int, Split]:
        return {ds.spec.task_id: ds.test for ds in self.tasks}


@dataclass
class StreamState:
    """
    任务流执行状态

    t: 已完成的任务数（0 表示只完成了预训练）
    transfers: 每个任务训练时激活的迁移专家（没有时为 None）
    """
    config: RunConfig
    profile: StrategyProfile
    model: ToyMLLM
    bank: ExpertBank
    scores: ScoreMatrix
    t: int = 0
    routers: Dict[int, TaskAutoencoder] = field(default_factory=dict)
    plans: List[AllocationPlan] = field(default_factory=list)
    transfers: Dict[int, Optional[int]] = field(default_factory=dict)
    train_history: Dict[int, List[float]] = field(default_factory=dict)
    sensitivity_rows: List[Dict] = field(default_factory=list)
    dynamics_rows: List[Dict] = field(default_factory=list)
    activation_rows: List[Dict] = field(default_factory=list)
    routing_rows: List[Dict] = field(default_factory=list)
    admission_rows: List[Dict] = field(default_factory=list)
    timing_rows: List[Dict] = field(default_factory=list)
    freeze_audit: List[Dict] = field(default_factory=list)

    def router_list(self) -> List[TaskAutoencoder]:
        return [self.routers[t] for t in sorted(self.routers)]


@dataclass
class StreamResult:
    scores: ScoreMatrix
    summary: Dict
    run_dir: Path
    state: StreamState
    files: List[str] = field(default_factory=list)


class _StepTimer:
    """记录一个任务内各步骤的耗时"""

    def __init__(self, state: StreamState, task_id: int):
        self.state = state
        self.task_id = task_id

    def __call__(self, step: str):
        return _TimedStep(self, step)


class _TimedStep:
    def __init__(self, timer: _StepTimer, step: str):
        self.timer = timer
        self.step = step

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        seconds = time.perf_counter() - self.start
        self.timer.state.timing_rows.append({'task_id': self.timer.task_id, 'step': self.step, 'seconds': seconds})
        if exc_type is None:
            logger.info(f"任务 {self.timer.task_id} [{self.step}] 用时 {seconds:.3f}s")


# ==================== 数据准备 ====================

def stream_specs(config: RunConfig) -> StreamPreset:
    """按配置得到任务流（预设或显式列出的任务）"""
    dims = {'d_v': config.model.d_v, 'd_t': config.model.d_t, 'n_vision_tokens': config.model.n_vision_tokens,
            'n_text_tokens': config.model.n_text_tokens, 'n_classes': config.model.n_classes}
    stream = config.stream
    if not stream.tasks:
        return build_preset(stream.preset, config.seed, stream.n_train, stream.n_test, dims,
                            pretrain_n=config.pretrain.n_train)

    def custom(task_id, entry, key):
        extra = {k: entry[k] for k in ('class_sep', 'noise', 'shift_scale', 'n_train', 'n_test') if k in entry}
        extra.setdefault('n_train', stream.n_train or 600)
        extra.setdefault('n_test', stream.n_test or 200)
        return TaskSpec(task_id=task_id, name=str(entry['name']), alpha=float(entry['alpha']),
                        seed=derive_seed(config.seed, 'task-gen', 'custom', 'sample', task_id),
                        geometry_seed=derive_seed(config.seed, 'task-gen', 'custom', 'geometry', key),
                        shift_seed=derive_seed(config.seed, 'task-gen', 'custom', 'shift', key),
                        **dims, **extra)

    tasks = [custom(i + 1, entry, i + 1) for i, entry in enumerate(stream.tasks)]
    holdout = custom(len(tasks) + 1, {'name': 'unseen', 'alpha': 0.5}, 'holdout')
    return StreamPreset(name='custom', tasks=tasks, holdout=holdout,
                        pretrain=pretrain_spec(config.seed, config.pretrain.n_train, dims))


def prepare_stream(config: RunConfig) -> StreamData:
    preset = stream_specs(config)
    logger.info(f"生成任务流 {preset.name}: {', '.join(s.name for s in preset.tasks)}")
    return StreamData(
        tasks=[generate(spec) for spec in preset.tasks],
        holdout=generate(preset.holdout) if preset.holdout else None,
        pretrain=generate(preset.pretrain) if preset.pretrain else None,
    )


def init_state(config: RunConfig, task_names: Sequence[str], pretrain: Optional[TaskDataset]) -> StreamState:
    """初始化模型并在通用任务上预训练，随后冻结主干"""
    profile = get_strategy(config.strategy)
    model = init_toy_model(config.model, derive_seed(config.seed, 'init'))
    if pretrain is not None:
        cfg = config.pretrain
        history = pretrain_backbone(model, pretrain.train.vision, pretrain.train.text, pretrain.train.labels,
                                    cfg.epochs, cfg.lr, cfg.batch_size, derive_seed(config.seed, 'pretrain'))
        logger.info(f"预训练完成: 最终 loss {history[-1]:.4f}")
    else:
        set_trainable(model, ExpertBank(), [])
    return StreamState(config=config, profile=profile, model=model, bank=ExpertBank(),
                       scores=ScoreMatrix(list(task_names)))


# ==================== 单个任务 ====================

def _training_active(state: StreamState, task_id: int, transfer: Optional[int]) -> Tuple[int, ...]:
    gate = state.profile.gate
    if gate == 'shared':
        return (1,)
    if gate == 'all':
        return tuple(state.bank.task_ids())
    return tuple(sorted({task_id} | ({transfer} if transfer is not None else set())))


def run_task(state: StreamState, dataset: TaskDataset) -> StreamState:
    """
    在一个新任务上训练

    Args:
        state: 当前状态（会被原地更新）
        dataset: 新任务的数据（只读取其训练划分）

    Returns:
        更新后的状态

    Raises:
        ContractError: 训练数据为空或任务编号不连续
        FreezeViolationError: 冻结参数在训练中被改动
    """
    config, profile, model, bank = state.config, state.profile, state.model, state.bank
    task_id = state.t + 1
    if dataset.spec.task_id != task_id:
        raise ContractError(f"期望第 {task_id} 个任务，收到 task_id={dataset.spec.task_id}")
    train = dataset.train
    if train is None or len(train) == 0:
        raise ContractError(f"任务 {task_id} 的训练数据为空")

    timer = _StepTimer(state, task_id)
    logger.info(f"==== 任务 {task_id}: {dataset.spec.name}（策略 {profile.name}）====")

    with timer('subset'):
        alloc = config.allocation
        sub = subset(train, alloc.subset_fraction, alloc.subset_min, derive_seed(config.seed, 'subset', task_id))

    with timer('proxy'):
        sensitivities, scores = compute_sensitivities(model, sub)
        state.sensitivity_rows.extend(sensitivity_records(task_id, sensitivities))
        logger.info(f"任务 {task_id} 模块分数: vision={scores['vision'].score:.4f} llm={scores['llm'].score:.4f}")

    with timer('allocation'):
        mcfg = config.model
        n_layers = {'vision': mcfg.n_vision_layers, 'llm': mcfg.n_llm_layers}
        plan = plan_for_strategy(profile, task_id, sensitivities, scores, config.b_total, n_layers,
                                 mcfg.lora_rank, mcfg.widths())
        expert_task = 1 if profile.shared_expert else task_id
        if not bank.has_task(expert_task):
            rng = np.random.default_rng(derive_seed(config.seed, 'lora', task_id))
            bank.allocate(expert_task, plan.indicators, mcfg.widths(), plan.ranks, rng)
        plan.trainable_params = bank.n_params(expert_task)
        state.plans.append(plan)
        logger.info(f"任务 {task_id} 分配: B_vision={plan.b_vision} B_llm={plan.b_llm} "
                    f"vision 层 {plan.selected_layers('vision')} llm 层 {plan.selected_layers('llm')}")

    transfer = None
    if profile.uses_router:
        with timer('router'):
            source = sub if config.router.features == 'subset' else train
            feats = pooled_features(model, source.vision, source.text, config.training.eval_batch_size)
            if profile.transfer:
                transfer = select_transfer_expert(state.router_list(), feats)
            rcfg = config.router
            ae = train_autoencoder(feats, task_id, hidden=rcfg.hidden, epochs=rcfg.epochs, learning_rate=rcfg.lr,
                                   batch_size=rcfg.batch_size, seed=derive_seed(config.seed, 'router', task_id))
            calibrate_threshold(ae, feats, rcfg.threshold_scale)
            state.routers[task_id] = ae
            logger.info(f"任务 {task_id} 路由阈值 τ={ae.threshold:.4f}，迁移专家: {transfer}")
    state.transfers[task_id] = transfer

    with timer('training'):
        active = _training_active(state, task_id, transfer)
        trainable = set_trainable(model, bank, [expert_task])
        if count_trainable(model, bank) != plan.trainable_params:
            raise ContractError(f"可训练参数 {count_trainable(model, bank)} 与方案 {plan.trainable_params} 不一致")
        frozen_tasks = [k for k in bank.task_ids() if k != expert_task]
        before_backbone = backbone_checksum(model)
        before_experts = bank_checksums(bank, frozen_tasks)
        before_weights = effective_weights(model, bank, active)

        tcfg = config.training
        opt = Optimizer(trainable, tcfg.lr, variant='adam')
        rng = np.random.default_rng(derive_seed(config.seed, 'train-order', task_id))
        history = []
        for epoch in range(tcfg.epochs):
            losses = []
            for idx in minibatches(len(train), tcfg.batch_size, rng):
                opt.zero_grad()
                with ComputationTape():
                    loss = batch_loss(model, bank, active, train.vision[idx], train.text[idx], train.labels[idx])
                backward(loss)
                opt.step()
                losses.append(loss.item())
            history.append(float(np.mean(losses)))
            logger.info(f"任务 {task_id} epoch {epoch + 1}/{tcfg.epochs}: loss={history[-1]:.4f}")
        opt.zero_grad()
        set_trainable(model, bank, [])
        state.train_history[task_id] = history

        after_backbone = backbone_checksum(model)
        after_experts = bank_checksums(bank, frozen_tasks)
        changed = [k for k in frozen_tasks if before_experts[k] != after_experts[k]]
        state.freeze_audit.append({'task_id': task_id, 'backbone_unchanged': before_backbone == after_backbone,
                                   'frozen_tasks': frozen_tasks, 'changed_tasks': changed})
        if before_backbone != after_backbone:
            raise FreezeViolationError(f"任务 {task_id} 训练后主干校验和发生变化")
        if changed:
            raise FreezeViolationError(f"任务 {task_id} 训练后旧任务专家 {changed} 校验和发生变化")

        dynamics = relative_dynamics(before_weights, effective_weights(model, bank, active))
        for module, value in dynamics.items():
            state.dynamics_rows.append({'task_id': task_id, 'module': module, 'relative_change': value})

    state.t = task_id
    return state


# ==================== 评估 ====================

def _route_split(state: StreamState, split: Split,
                 threshold_factor: float) -> Tuple[List[Tuple[int, ...]], Optional[List[RoutingDecision]]]:
    gate = state.profile.gate
    if gate == 'router':
        feats = pooled_features(state.model, split.vision, split.text, state.config.training.eval_batch_size)
        decisions = route_batch(state.router_list(), feats, state.config.router.top_k, threshold_factor)
        return [d.active for d in decisions], decisions
    if gate == 'all':
        active = tuple(state.bank.task_ids())
    else:
        active = (1,) if state.bank.has_task(1) else ()
    return [active] * len(split), None


def _predict_grouped(state: StreamState, split: Split, actives: Sequence[Tuple[int, ...]]) -> np.ndarray:
    # 同一激活集合的样本一起前向
    groups: Dict[Tuple[int, ...], List[int]] = {}
    for i, active in enumerate(actives):
        groups.setdefault(active, []).append(i)
    preds = np.zeros(len(split), dtype=np.int64)
    for active, idx in sorted(groups.items()):
        idx = np.asarray(idx, dtype=np.int64)
        preds[idx] = predict(state.model, state.bank, active, split.vision[idx], split.text[idx],
                             state.config.training.eval_batch_size)
    return preds


def _routing_stats(task_id: int, actives, decisions, trained: Sequence[int]) -> Dict:
    n = len(actives)
    activation = {k: 0 for k in trained}
    for active in actives:
        for k in active:
            activation[k] = activation.get(k, 0) + 1
    stats = {'n': n, 'activation': activation, 'fallback_rate': float('nan'),
             'top1_accuracy': float('nan'), 'admissions': {}}
    if decisions is None:
        stats['fallback_rate'] = float(np.mean([not a for a in actives])) if n else float('nan')
        return stats
    stats['fallback_rate'] = float(np.mean([d.fallback for d in decisions])) if n else float('nan')
    stats['admissions'] = {k: int(sum(k in d.relevant for d in decisions)) for k in trained}
    if task_id in trained and n:
        stats['top1_accuracy'] = float(np.mean([bool(d.ranking) and d.ranking[0] == task_id for d in decisions]))
    return stats


def evaluate_all(state: StreamState, splits: Dict[int, Split], holdout: Optional[Split] = None,
                 threshold_factor: float = 1.0) -> Dict:
    """
    在全部 N 个任务（包括尚未训练的任务）的测试集上评估

    逐样本路由选出激活专家（没有相关任务时回退到只用主干），得分为分类准确率。

    Returns:
        dict: scores（按任务编号排序的准确率列表）、tasks（每个任务的路由统计）、holdout（未知任务的拒绝率）
    """
    trained = state.bank.task_ids() if state.profile.gate != 'router' else sorted(state.routers)
    result = {'after_task': state.t, 'scores': [], 'tasks': {}, 'holdout': None}
    for task_id in sorted(splits):
        split = splits[task_id]
        actives, decisions = _route_split(state, split, threshold_factor)
        preds = _predict_grouped(state, split, actives)
        accuracy = float(np.mean(preds == split.labels)) if len(split) else float('nan')
        stats = _routing_stats(task_id, actives, decisions, trained)
        stats['accuracy'] = accuracy
        result['tasks'][task_id] = stats
        result['scores'].append(accuracy)

    if holdout is not None and len(holdout):
        actives, decisions = _route_split(state, holdout, threshold_factor)
        stats = _routing_stats(-1, actives, decisions, trained)
        stats['rejection_rate'] = stats['fallback_rate'] if decisions is not None else float('nan')
        result['holdout'] = stats
    return result


def _record_evaluation(state: StreamState, evaluation: Dict) -> None:
    after = evaluation['after_task']
    entries = list(evaluation['tasks'].items())
    if evaluation['holdout'] is not None:
        entries.append(('holdout', evaluation['holdout']))
    for eval_task, stats in entries:
        state.routing_rows.append({
            'after_task': after, 'eval_task': eval_task, 'n_samples': stats['n'],
            'accuracy': stats.get('accuracy', float('nan')), 'fallback_rate': stats['fallback_rate'],
            'top1_accuracy': stats['top1_accuracy'],
        })
        for expert_task, count in sorted(stats['activation'].items()):
            state.activation_rows.append({
                'after_task': after, 'eval_task': eval_task, 'expert_task': expert_task, 'count': count,
                'frequency': count / stats['n'] if stats['n'] else float('nan'),
            })
        for router_task, count in sorted(stats['admissions'].items()):
            state.admission_rows.append({'after_task': after, 'eval_task': eval_task,
                                         'router_task': router_task, 'admitted': count})


# ==================== 任务流 ====================

def _save_eval_data(run_dir: Path, data: StreamData) -> None:
    out = run_dir / EVAL_DATA_DIR
    out.mkdir(parents=True, exist_ok=True)
    for ds in data.tasks:
        np.savez(out / f"task_{ds.spec.task_id}.npz", vision=ds.test.vision, text=ds.test.text, labels=ds.test.labels)
    if data.holdout is not None:
        np.savez(out / 'holdout.npz', vision=data.holdout.test.vision, text=data.holdout.test.text,
                 labels=data.holdout.test.labels)
    specs = {'tasks': [ds.spec.to_dict() for ds in data.tasks],
             'holdout': data.holdout.spec.to_dict() if data.holdout is not None else None}
    (run_dir / 'tasks.yaml').write_text(yaml.safe_dump(specs, sort_keys=False, allow_unicode=True), encoding='utf-8')


def load_eval_data(run_dir: Union[str, Path]) -> Tuple[Dict[int, Split], Optional[Split]]:
    """读取运行时保存的测试划分（不含任何训练数据）"""
    out = Path(run_dir) / EVAL_DATA_DIR
    files = sorted(out.glob('task_*.npz'))
    if not files:
        raise ArtifactError("运行目录缺少评估数据", [out])
    splits = {}
    for path in files:
        with np.load(path) as arrays:
            splits[int(path.stem.split('_')[1])] = Split(arrays['vision'], arrays['text'], arrays['labels'])
    holdout = None
    if (out / 'holdout.npz').is_file():
        with np.load(out / 'holdout.npz') as arrays:
            holdout = Split(arrays['vision'], arrays['text'], arrays['labels'])
    return splits, holdout


def _write_frame(rows: List[Dict], columns: List[str], path: Path) -> None:
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False)


def write_artifacts(state: StreamState, run_dir: Union[str, Path], data: StreamData) -> None:
    """写出结构化产物: 方案、得分矩阵以及各类明细 CSV"""
    run_dir = Path(run_dir)
    plans = []
    for plan in state.plans:
        entry = plan.to_dict()
        entry['transfer_expert'] = state.transfers.get(plan.task_id)
        entry['train_loss'] = state.train_history.get(plan.task_id, [])
        plans.append(entry)
    (run_dir / 'plans.yaml').write_text(yaml.safe_dump(plans, sort_keys=False), encoding='utf-8')
    state.scores.save_csv(run_dir / 'score_matrix.csv')
    dump_sensitivities(state.sensitivity_rows, run_dir / 'sensitivity.csv')
    _write_frame(state.dynamics_rows, ['task_id', 'module', 'relative_change'], run_dir / 'dynamics.csv')
    _write_frame(state.activation_rows, ['after_task', 'eval_task', 'expert_task', 'count', 'frequency'],
                 run_dir / 'activation.csv')
    _write_frame(state.routing_rows, ['after_task', 'eval_task', 'n_samples', 'accuracy', 'fallback_rate',
                                      'top1_accuracy'], run_dir / 'routing.csv')
    _write_frame(state.admission_rows, ['after_task', 'eval_task', 'router_task', 'admitted'],
                 run_dir / 'admissions.csv')
    _write_frame(state.timing_rows, ['task_id', 'step', 'seconds'], run_dir / 'timings.csv')
    (run_dir / 'freeze_audit.yaml').write_text(yaml.safe_dump(state.freeze_audit, sort_keys=False),
                                               encoding='utf-8')

    if state.routers:
        features = {ds.spec.task_id: pooled_features(state.model, ds.test.vision, ds.test.text)
                    for ds in data.tasks}
        if data.holdout is not None:
            features[data.holdout.spec.task_id] = pooled_features(state.model, data.holdout.test.vision,
                                                                  data.holdout.test.text)
        export_router_embeddings(state.router_list(), features, run_dir / 'router_embeddings.csv')


def run_stream(config: RunConfig, run_dir: Optional[Union[str, Path]] = None,
               data: Optional[StreamData] = None,
               on_task_end: Optional[Callable[[StreamState, int], None]] = None) -> StreamResult:
    """
    完整执行一条任务流并写出运行目录

    Args:
        config: 运行配置（会先做校验）
        run_dir: 输出目录，默认由配置与 DMOLE_OUTPUT_ROOT 决定
        data: 已生成的任务流数据，默认按配置生成
        on_task_end: 每个任务评估完成后的回调 (state, task_id)

    Returns:
        StreamResult
    """
    config.validate()
    run_dir = Path(run_dir) if run_dir is not None else resolve_output_dir(config)
    run_dir.mkdir(parents=True, exist_ok=True)
    configure_logging(log_file=run_dir / 'run.log')
    save_config(config, run_dir / CONFIG_NAME)
    manifest = RunManifest(config_hash=config_hash(config))
    write_manifest(run_dir, manifest)
    logger.info(f"运行目录: {run_dir}（策略 {config.strategy}，种子 {config.seed}，B_total={config.b_total}）")

    try:
        data = data if data is not None else prepare_stream(config)
        if not data.tasks:
            raise ContractError("任务流为空")
        _save_eval_data(run_dir, data)
        tests = data.test_splits()
        holdout = data.holdout.test if data.holdout is not None else None

        state = init_state(config, data.task_names, data.pretrain)
        data.pretrain = None

        evaluation = evaluate_all(state, tests, holdout)
        state.scores.set_row(0, evaluation['scores'])
        _record_evaluation(state, evaluation)

        for position, dataset in enumerate(data.tasks):
            run_task(state, dataset)
            # 训练划分用完即丢弃
            data.tasks[position] = TaskDataset(dataset.spec, None, dataset.test)
            del dataset

            evaluation = evaluate_all(state, tests, holdout)
            state.scores.set_row(state.t, evaluation['scores'])
            _record_evaluation(state, evaluation)
            row = ', '.join(f"{s:.3f}" for s in evaluation['scores'])
            logger.info(f"任务 {state.t} 之后的得分: [{row}]")
            save_checkpoint(run_dir / CHECKPOINT_DIR / f"task_{state.t}", state.model, state.bank, state.routers)
            if on_task_end is not None:
                on_task_end(state, state.t)

        write_artifacts(state, run_dir, data)
        render_reports(run_dir, status=STATUS_COMPLETED)
        summary = summarize(state.scores)
        manifest = finish_manifest(run_dir, manifest, STATUS_COMPLETED)
        logger.info(f"完成: 平均 AVG={summary['average']['avg']:.4f} Last={summary['average']['last']:.4f}")
        return StreamResult(scores=state.scores, summary=summary, run_dir=run_dir, state=state,
                            files=manifest.files)
    except Exception as exc:
        logger.error(f"运行失败: {exc}")
        finish_manifest(run_dir, manifest, STATUS_FAILED, error=f"{type(exc).__name__}: {exc}")
        raise
    finally:
        detach_file_logging()


# ==================== 阈值扫描 ====================

def final_checkpoint_dir(run_dir: Union[str, Path]) -> Path:
    root = Path(run_dir) / CHECKPOINT_DIR
    candidates = sorted(root.glob('task_*'), key=lambda p: int(p.name.split('_')[1])) if root.is_dir() else []
    if not candidates:
        raise ArtifactError("运行目录没有检查点", [root])
    return candidates[-1]


def load_final_state(run_dir: Union[str, Path]) -> StreamState:
    """从运行目录恢复最终检查点（配置哈希必须与 manifest 一致）"""
    config = load_run_config(run_dir)
    ckpt = final_checkpoint_dir(run_dir)
    model, bank, routers = load_checkpoint(ckpt)
    scores = ScoreMatrix.load_csv(Path(run_dir) / 'score_matrix.csv')
    state = StreamState(config=config, profile=get_strategy(config.strategy), model=model, bank=bank,
                        scores=scores, routers=routers)
    state.t = int(ckpt.name.split('_')[1])
    return state


def sweep_thresholds(run_dir: Union[str, Path], scales: Sequence[float]) -> pd.DataFrame:
    """
    在最终检查点上用不同的阈值缩放系数重新评估（不重新训练）

    Returns:
        每个系数一行: scale, 各任务 Last, average, 以及每个路由器在全部测试样本上的接纳次数
    """
    state = load_final_state(run_dir)
    splits, holdout = load_eval_data(run_dir)
    names = state.scores.task_names
    rows = []
    for scale in scales:
        if scale <= 0:
            raise ContractError(f"缩放系数必须为正数，收到 {scale}")
        evaluation = evaluate_all(state, splits, holdout, threshold_factor=scale)
        row = {'scale': float(scale)}
        for name, value in zip(names, evaluation['scores']):
            row[f"last_{name}"] = value
        row['average'] = float(np.mean(evaluation['scores']))
        for k in sorted(state.routers):
            row[f"admitted_t{k}"] = sum(stats['admissions'].get(k, 0) for stats in evaluation['tasks'].values())
        if evaluation['holdout'] is not None:
            row['holdout_rejection'] = evaluation['holdout']['rejection_rate']
        rows.append(row)
        logger.info(f"阈值 ×{scale}: average Last={row['average']:.4f}")
    return pd.DataFrame(rows)
