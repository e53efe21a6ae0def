"""
训练模块

交叉熵损失、优化器（Adam / 动量 SGD）、小批量训练循环、并行评估
以及有限差分梯度检查。
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import PatchDataset
from .errors import DataError, DimensionError, DivergenceError, NonFiniteError
from .layers import (
    ModelConfig,
    ModelParams,
    Variant,
    init_params,
    model_backward,
    model_forward,
    model_forward_cached,
    predict_labels,
)
from .metrics import ConfusionMatrix, overall_accuracy
from src.utils.rng import STREAM_GRADCHECK, STREAM_SHUFFLE, make_rng

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
GRADCHECK_TOLERANCE = 1e-4


# ---------------------------------------------------------------------------
# 损失
# ---------------------------------------------------------------------------

def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """
    平均交叉熵

    Args:
        probs: [batch, C] 概率
        labels: [batch] 0 起始类别

    Returns:
        mean(−log(max(probs[i, label_i], 1e-12)))
    """
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = probs.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"标签超出范围 [0, {num_classes}): {labels.min()}..{labels.max()}")
    picked = probs[np.arange(labels.shape[0]), labels]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())


# ---------------------------------------------------------------------------
# 优化器
# ---------------------------------------------------------------------------

@dataclass
class TrainHyper:
    """训练超参数（论文未给出，采用常规默认值）"""

    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 100
    dtype: str = "float32"
    workers: int = 1


@dataclass
class OptimState:
    """优化器状态，moments 与参数同名同形"""

    kind: str
    hyper: Dict[str, float]
    moments: Dict[str, List[np.ndarray]] = field(default_factory=dict)
    step: int = 0


def create_optim_state(kind: str, params: Dict[str, np.ndarray], hyper: TrainHyper) -> OptimState:
    if kind not in OPTIMIZERS:
        raise DataError(f"未知优化器: {kind}，可选: {', '.join(OPTIMIZERS)}")
    if kind == "adam":
        settings = {"lr": hyper.lr, "beta1": hyper.beta1, "beta2": hyper.beta2, "eps": hyper.eps}
        moments = {name: [np.zeros_like(p), np.zeros_like(p)] for name, p in params.items()}
    else:
        settings = {"lr": hyper.lr, "momentum": hyper.momentum}
        moments = {name: [np.zeros_like(p)] for name, p in params.items()}
    return OptimState(kind=kind, hyper=settings, moments=moments)


def _check_aligned(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimState) -> None:
    for name, p in params.items():
        if name not in grads or grads[name].shape != p.shape:
            got = grads[name].shape if name in grads else None
            raise DimensionError(f"梯度 {name} 形状 {got} 与参数 {p.shape} 不符")
        if state.moments[name][0].shape != p.shape:
            raise DimensionError(f"优化器矩 {name} 形状与参数 {p.shape} 不符")


def adam_step(
    params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimState
) -> Tuple[Dict[str, np.ndarray], OptimState]:
    """带偏差校正的 Adam 更新（返回新参数与新状态，不修改输入）"""
    _check_aligned(params, grads, state)
    h = state.hyper
    step = state.step + 1
    correction1 = 1.0 - h["beta1"] ** step
    correction2 = 1.0 - h["beta2"] ** step
    new_params, moments = {}, {}
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        m, v = state.moments[name]
        m = h["beta1"] * m + (1.0 - h["beta1"]) * g
        v = h["beta2"] * v + (1.0 - h["beta2"]) * g * g
        update = (m / correction1) / (np.sqrt(v / correction2) + h["eps"])
        new_params[name] = (p - h["lr"] * update).astype(p.dtype, copy=False)
        moments[name] = [m, v]
    return new_params, OptimState(state.kind, dict(h), moments, step)


def sgd_momentum_step(
    params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimState
) -> Tuple[Dict[str, np.ndarray], OptimState]:
    """动量 SGD：v ← μv + g，p ← p − lr·v"""
    _check_aligned(params, grads, state)
    h = state.hyper
    new_params, moments = {}, {}
    for name, p in params.items():
        velocity = h["momentum"] * state.moments[name][0] + grads[name].astype(p.dtype, copy=False)
        new_params[name] = (p - h["lr"] * velocity).astype(p.dtype, copy=False)
        moments[name] = [velocity]
    return new_params, OptimState(state.kind, dict(h), moments, state.step + 1)


OPTIMIZERS: Dict[str, Callable] = {
    "adam": adam_step,
    "sgd_momentum": sgd_momentum_step,
}


# ---------------------------------------------------------------------------
# 训练与评估
# ---------------------------------------------------------------------------

@dataclass
class TrainRun:
    """一次训练的记录"""

    config: ModelConfig
    seed: int
    epochs: int
    batch_size: int
    params: ModelParams
    loss_curve: List[float] = field(default_factory=list)
    final_metrics: Dict[str, float] = field(default_factory=dict)
    checkpoint_path: Optional[Path] = None


def train(
    dataset: PatchDataset,
    config: ModelConfig,
    hyper: TrainHyper,
    seed: int,
    checkpoint_path=None,
) -> TrainRun:
    """
    小批量训练

    每个 epoch 用种子化的 Philox 流重新打乱样本；每个批次依次做前向、损失、
    反向和优化器更新，并记录损失。参数更新只在调用线程中进行。

    Raises:
        DivergenceError: 损失或中间结果出现非有限值
    """
    if len(dataset) == 0:
        raise DataError("训练集为空")
    dtype = np.dtype(hyper.dtype)
    params = init_params(config, seed, dtype)
    named = params.named_tensors()
    state = create_optim_state(hyper.optimizer, named, hyper)
    step_fn = OPTIMIZERS[hyper.optimizer]
    patches = dataset.patches.astype(dtype, copy=False)
    targets = dataset.labels.astype(np.int64) - 1
    rng = make_rng(seed, STREAM_SHUFFLE)
    n = len(dataset)
    run = TrainRun(config=config, seed=seed, epochs=hyper.epochs, batch_size=hyper.batch_size, params=params)

    logger.info("开始训练: variant=%s, 样本数=%d, epochs=%d, batch=%d, optimizer=%s, lr=%g",
                config.variant.value, n, hyper.epochs, hyper.batch_size, hyper.optimizer, hyper.lr)
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(n)
        epoch_losses = []
        for batch, start in enumerate(range(0, n, hyper.batch_size)):
            idx = order[start:start + hyper.batch_size]
            try:
                probs, cache = model_forward_cached(patches[idx], params, config)
                loss = cross_entropy(probs, targets[idx])
                if not np.isfinite(loss):
                    raise DivergenceError(epoch, batch, loss)
                grads = model_backward(params, cache, T.softmax_cross_entropy_backward(probs, targets[idx]))
            except NonFiniteError:
                raise DivergenceError(epoch, batch, float("nan")) from None
            named, state = step_fn(named, grads.named_tensors(), state)
            params = ModelParams.from_named(config, named)
            run.loss_curve.append(loss)
            epoch_losses.append(loss)
        logger.info("epoch %d/%d: loss=%.6f", epoch, hyper.epochs, float(np.mean(epoch_losses)))

    run.params = params
    train_cm = evaluate(params, config, dataset, hyper.batch_size, hyper.workers)
    run.final_metrics = {"train_oa": overall_accuracy(train_cm), "final_loss": run.loss_curve[-1]}
    if checkpoint_path is not None:
        run.checkpoint_path = save_checkpoint(params, checkpoint_path)
    return run


def evaluate(
    params: ModelParams,
    config: ModelConfig,
    dataset: PatchDataset,
    batch_size: int = 256,
    workers: int = 1,
) -> ConfusionMatrix:
    """
    在数据集上评估，返回混淆矩阵

    按批次分片，可用线程池并行；各分片的部分混淆矩阵按整数求和合并，
    与完成顺序无关。
    """
    dtype = next(iter(params.named_tensors().values())).dtype
    patches = dataset.patches.astype(dtype, copy=False)
    starts = list(range(0, len(dataset), batch_size))

    def shard(start: int) -> ConfusionMatrix:
        pred = predict_labels(params, config, patches[start:start + batch_size], batch_size)
        return ConfusionMatrix.from_labels(dataset.labels[start:start + batch_size], pred, config.num_classes)

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(shard, starts))
    else:
        partials = [shard(s) for s in starts]
    return reduce(ConfusionMatrix.merge, partials, ConfusionMatrix.empty(config.num_classes))


# ---------------------------------------------------------------------------
# 梯度检查
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """逐参数张量的最大相对误差"""

    variant: Variant
    errors: Dict[str, float]
    tolerance: float = GRADCHECK_TOLERANCE

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.errors.values())

    def worst(self) -> Tuple[str, float]:
        return max(self.errors.items(), key=lambda item: item[1])

    def format(self) -> str:
        lines = [f"[{self.variant.value}] {'PASS' if self.passed else 'FAIL'}"]
        for name, err in self.errors.items():
            mark = "" if err < self.tolerance else "  <-- 超出容差"
            lines.append(f"  {name:<40} {err:.3e}{mark}")
        return "\n".join(lines)


def toy_config(variant: Variant, num_blocks: int = 1) -> ModelConfig:
    """梯度检查用的小配置：9×9×3 输入，P=16 使 E=16，C=8，4 类"""
    return ModelConfig(
        bands=3,
        num_classes=4,
        patch_window=9,
        token_segment=16,
        hidden_dim=8,
        mixer_ffn_dim=8,
        num_blocks=num_blocks,
        variant=variant,
    )


def grad_check(
    config: ModelConfig,
    seed: int,
    backward: Callable = model_backward,
    batch: int = 2,
    tolerance: float = GRADCHECK_TOLERANCE,
) -> GradCheckReport:
    """
    双精度中心差分梯度检查

    参数先加小扰动使其处于一般位置；步长 h = 1e-5·max(1, |θ|)。
    相对误差 = max|解析 − 数值| / max(max|解析|, max|数值|, 1e-12)。

    Args:
        config: 小规模配置
        seed: 随机种子
        backward: 反向函数（测试中可替换为故意出错的版本）
    """
    rng = make_rng(seed, STREAM_GRADCHECK)
    base = init_params(config, seed, np.float64)
    named = {name: t + rng.normal(0.0, 0.1, size=t.shape) for name, t in base.named_tensors().items()}
    params = ModelParams.from_named(config, named)
    pw = config.patch_window
    x = rng.normal(0.0, 1.0, size=(batch, pw, pw, config.bands))
    labels = rng.integers(0, config.num_classes, size=batch)

    probs, cache = model_forward_cached(x, params, config)
    analytic = backward(params, cache, T.softmax_cross_entropy_backward(probs, labels)).named_tensors()

    def loss() -> float:
        return cross_entropy(model_forward(x, params, config), labels)

    errors: Dict[str, float] = {}
    for name, value in named.items():
        numeric = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            original = value[idx]
            h = 1e-5 * max(1.0, abs(original))
            value[idx] = original + h
            plus = loss()
            value[idx] = original - h
            minus = loss()
            value[idx] = original
            numeric[idx] = (plus - minus) / (2 * h)
        a = analytic[name]
        scale_ = max(np.abs(a).max(), np.abs(numeric).max(), 1e-12)
        errors[name] = float(np.abs(a - numeric).max() / scale_)
    report = GradCheckReport(config.variant, errors, tolerance)
    worst_name, worst_err = report.worst()
    logger.info("梯度检查 %s: %s，最差 %s=%.3e",
                config.variant.value, "通过" if report.passed else "失败", worst_name, worst_err)
    return report
