"""
广义标签平滑模块

平滑目标构造、平滑交叉熵、解析梯度、梯度饱和阈值以及按轮次变化的平滑因子调度。
平滑因子 alpha 允许取 (-inf, 1]，负值即负标签平滑。
所有函数均为纯函数，可并发调用。
"""

from dataclasses import dataclass
from typing import Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from utils.error_handler import InvalidArgumentError, NumericInputError


# log 内部的概率下限
PROB_FLOOR = 1e-12

ArrayLike = Union[np.ndarray, list, tuple]


@dataclass(frozen=True)
class SoftTarget:
    """平滑后的目标向量"""
    values: np.ndarray
    alpha: float

    @property
    def num_classes(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class SaturationThresholds:
    """梯度符号翻转的两个边界"""
    target_threshold: float
    other_threshold: float


class SmoothingSchedule(BaseModel):
    """平滑因子调度：预热阶段保持 0，线性爬升到目标值，此后保持不变"""

    model_config = ConfigDict(frozen=True)

    target_alpha: float = Field(0.0, le=1.0)
    warmup_epochs: int = Field(0, ge=0)
    ramp_epochs: int = Field(0, ge=0)

    @classmethod
    def constant(cls, alpha: float) -> "SmoothingSchedule":
        return cls(target_alpha=alpha)

    @classmethod
    def for_training(cls, alpha: float, epochs: int) -> "SmoothingSchedule":
        """默认调度：负平滑预热 10% 轮次、爬升 20% 轮次；非负平滑直接生效"""
        if alpha >= 0:
            return cls(target_alpha=alpha)
        return cls(
            target_alpha=alpha,
            warmup_epochs=int(round(0.1 * epochs)),
            ramp_epochs=int(round(0.2 * epochs)),
        )


def _check_alpha(alpha: float, num_classes: int) -> None:
    if not np.isfinite(alpha) or alpha > 1.0:
        raise InvalidArgumentError(f"平滑因子必须满足 alpha <= 1，当前为 {alpha}")
    if num_classes < 2:
        raise InvalidArgumentError(f"类别数必须 >= 2，当前为 {num_classes}")


def smooth_labels(hard_label: int, alpha: float, num_classes: int) -> SoftTarget:
    """构造平滑目标 y_LS = (1 - alpha) * y + alpha / C"""
    _check_alpha(alpha, num_classes)
    if not 0 <= int(hard_label) < num_classes:
        raise InvalidArgumentError(f"类别下标 {hard_label} 超出范围 [0, {num_classes})")

    values = np.full(num_classes, alpha / num_classes, dtype=np.float64)
    values[int(hard_label)] = 1.0 - alpha + alpha / num_classes
    return SoftTarget(values=values, alpha=float(alpha))


def smooth_label_matrix(labels: ArrayLike, alpha: float, num_classes: int) -> np.ndarray:
    """批量版本：每行一个平滑目标（同一批次共用一个 alpha）"""
    _check_alpha(alpha, num_classes)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InvalidArgumentError(f"标签超出范围 [0, {num_classes})")

    targets = np.full((labels.shape[0], num_classes), alpha / num_classes, dtype=np.float64)
    targets[np.arange(labels.shape[0]), labels] = 1.0 - alpha + alpha / num_classes
    return targets


def softmax(logits: ArrayLike) -> np.ndarray:
    """数值稳定的 softmax，沿最后一维归一化"""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericInputError("softmax 输入包含非有限值")
    shifted = z - np.max(z, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


def log_softmax(logits: ArrayLike) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericInputError("log_softmax 输入包含非有限值")
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax_jacobian(logits: ArrayLike) -> np.ndarray:
    """softmax 的雅可比矩阵：对角 p_j(1 - p_j)，非对角 -p_i p_j"""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise InvalidArgumentError("softmax_jacobian 只接受一维 logits")
    p = softmax(z)
    return np.diag(p) - np.outer(p, p)


def _target_values(target: Union[SoftTarget, np.ndarray]) -> np.ndarray:
    if isinstance(target, SoftTarget):
        return target.values
    return np.asarray(target, dtype=np.float64)


def smoothed_ce_loss(probabilities: ArrayLike, target: Union[SoftTarget, np.ndarray]) -> float:
    """平滑交叉熵 -sum_k y_k log p_k"""
    p = np.asarray(probabilities, dtype=np.float64)
    y = _target_values(target)
    if p.shape != y.shape:
        raise InvalidArgumentError(f"维度不匹配: 概率 {p.shape} vs 目标 {y.shape}")
    return float(-np.sum(y * np.log(np.maximum(p, PROB_FLOOR))))


def decomposed_ce_loss(probabilities: ArrayLike, hard_label: int, alpha: float) -> float:
    """分解形式 (1 - alpha) * L_CE(y, p) + (alpha / C) * L_CE(1, p)"""
    p = np.asarray(probabilities, dtype=np.float64)
    num_classes = p.shape[-1]
    _check_alpha(alpha, num_classes)
    log_p = np.log(np.maximum(p, PROB_FLOOR))
    hard_term = -log_p[int(hard_label)]
    uniform_term = -np.sum(log_p)
    return float((1.0 - alpha) * hard_term + (alpha / num_classes) * uniform_term)


def logit_gradient(probabilities: ArrayLike, target: Union[SoftTarget, np.ndarray]) -> np.ndarray:
    """平滑交叉熵对 logits 的梯度 p - y_LS"""
    p = np.asarray(probabilities, dtype=np.float64)
    y = _target_values(target)
    if p.shape != y.shape:
        raise InvalidArgumentError(f"维度不匹配: 概率 {p.shape} vs 目标 {y.shape}")
    return p - y


def saturation_thresholds(alpha: float, num_classes: int) -> SaturationThresholds:
    """梯度符号翻转点：目标类 1 - alpha + alpha/C，其余类 alpha/C"""
    _check_alpha(alpha, num_classes)
    return SaturationThresholds(
        target_threshold=1.0 - alpha + alpha / num_classes,
        other_threshold=alpha / num_classes,
    )


def schedule_alpha(schedule: SmoothingSchedule, epoch: int) -> float:
    """第 epoch 轮（从 0 开始）的平滑因子"""
    if epoch < 0:
        raise InvalidArgumentError(f"轮次必须 >= 0，当前为 {epoch}")
    if epoch < schedule.warmup_epochs:
        return 0.0
    if schedule.ramp_epochs == 0 or epoch >= schedule.warmup_epochs + schedule.ramp_epochs:
        return float(schedule.target_alpha)
    progress = (epoch - schedule.warmup_epochs) / schedule.ramp_epochs
    return float(schedule.target_alpha * progress)
