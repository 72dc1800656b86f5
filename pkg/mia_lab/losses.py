"""
攻击损失（logits 空间）

- 平滑交叉熵 / 身份交叉熵：-log softmax(o)_c（alpha = 0 时二者相同）
- Poincaré 损失：L1 归一化 logits 与近似 one-hot 目标（目标位 0.9999）之间的双曲距离
- 身份 logit 损失：-o_c

每个损失同时给出数值和对 logits 的解析梯度，输入梯度由分类器反向传播得到
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple, Union

import numpy as np
from loguru import logger

from mia_lab.smoothing import log_softmax, smooth_labels, softmax
from utils.error_handler import DegenerateInputError, InvalidArgumentError, NumericInputError


# Poincaré 目标向量中目标类的取值
POINCARE_TARGET_VALUE = 0.9999
# 归一化向量需落在开单位球内
POINCARE_BALL_MARGIN = 1e-6


class LossKind(str, Enum):
    """损失类型"""
    SMOOTHED_CE = "smoothed_ce"
    CE_IDENTITY = "ce_identity"
    POINCARE = "poincare"
    IDENTITY_LOGIT = "identity_logit"


@dataclass(frozen=True)
class LossEvaluation:
    """一次损失计算的结果"""
    value: float
    logit_grad: np.ndarray
    clamped: bool = False


def _as_logits(logits) -> np.ndarray:
    o = np.asarray(logits, dtype=np.float64)
    if o.ndim != 1:
        raise InvalidArgumentError("攻击损失只接受一维 logits")
    if not np.all(np.isfinite(o)):
        raise NumericInputError("logits 包含非有限值")
    return o


def _check_class(target_class: int, num_classes: int) -> int:
    if not 0 <= int(target_class) < num_classes:
        raise InvalidArgumentError(f"目标类别 {target_class} 超出范围 [0, {num_classes})")
    return int(target_class)


def ce_identity_loss(logits, target_class: int) -> float:
    """身份损失：针对硬目标的交叉熵"""
    o = _as_logits(logits)
    c = _check_class(target_class, o.shape[0])
    return float(-log_softmax(o)[c])


def poincare_target(target_class: int, num_classes: int) -> np.ndarray:
    v = np.zeros(num_classes, dtype=np.float64)
    v[_check_class(target_class, num_classes)] = POINCARE_TARGET_VALUE
    return v


def poincare_distance(u, v) -> float:
    """Poincaré 球内两点的双曲距离 arcosh(1 + 2|u-v|^2 / ((1-|u|^2)(1-|v|^2)))"""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise InvalidArgumentError(f"维度不匹配: {u.shape} vs {v.shape}")
    denom = (1.0 - np.dot(u, u)) * (1.0 - np.dot(v, v))
    if denom <= 0.0:
        raise InvalidArgumentError("输入必须位于开单位球内")
    delta = 2.0 * np.dot(u - v, u - v) / denom
    return float(np.arccosh(1.0 + delta))


def _normalize_for_poincare(o: np.ndarray) -> Tuple[np.ndarray, float, float, bool]:
    """u = o / |o|_1，必要时缩放回开单位球；返回 (u, |o|_1, |u|_2, 是否缩放)"""
    l1 = float(np.sum(np.abs(o)))
    if l1 == 0.0:
        raise DegenerateInputError("logits 全为零，Poincaré 损失无定义")
    u = o / l1
    norm = float(np.linalg.norm(u))
    return u, l1, norm, norm >= 1.0


def poincare_loss(logits, target_class: int, num_classes: Optional[int] = None) -> float:
    """Poincaré 损失的数值"""
    return _poincare(logits, target_class, num_classes).value


def _poincare(logits, target_class: int, num_classes: Optional[int] = None) -> LossEvaluation:
    o = _as_logits(logits)
    if num_classes is not None and num_classes != o.shape[0]:
        raise InvalidArgumentError(f"类别数 {num_classes} 与 logits 长度 {o.shape[0]} 不一致")
    v = poincare_target(target_class, o.shape[0])
    u, l1, norm, clamped = _normalize_for_poincare(o)
    scale = (1.0 - POINCARE_BALL_MARGIN) / norm if clamped else 1.0
    if clamped:
        logger.warning(f"⚠️ 归一化 logits 位于单位球边界 (|u|={norm:.6f})，已缩放回球内")
    w = u * scale

    a = 1.0 - np.dot(w, w)
    b = 1.0 - np.dot(v, v)
    diff = w - v
    sq = float(np.dot(diff, diff))
    delta = 2.0 * sq / (a * b)
    value = float(np.arccosh(1.0 + delta))

    if delta == 0.0:
        return LossEvaluation(value=value, logit_grad=np.zeros_like(o), clamped=clamped)

    # d arcosh(1 + delta) / d delta
    outer = 1.0 / np.sqrt(delta * (delta + 2.0))
    grad_w = outer * (4.0 / (a * b)) * (diff + sq * w / a)
    if clamped:
        grad_u = scale * (grad_w - u * np.dot(u, grad_w) / (norm * norm))
    else:
        grad_u = grad_w
    grad_o = grad_u / l1 - np.sign(o) * np.dot(grad_u, o) / (l1 * l1)
    return LossEvaluation(value=value, logit_grad=grad_o, clamped=clamped)


def parse_loss_kind(kind: Union[str, LossKind]) -> LossKind:
    try:
        return LossKind(kind)
    except ValueError as e:
        raise InvalidArgumentError(f"未知的损失类型: {kind}") from e


def evaluate_loss(kind: LossKind, logits, target_class: int, alpha: float = 0.0) -> LossEvaluation:
    """计算指定损失的数值和 logits 梯度"""
    kind = parse_loss_kind(kind)
    o = _as_logits(logits)
    c = _check_class(target_class, o.shape[0])

    if kind == LossKind.CE_IDENTITY or (kind == LossKind.SMOOTHED_CE and alpha == 0.0):
        grad = softmax(o)
        grad[c] -= 1.0
        return LossEvaluation(value=float(-log_softmax(o)[c]), logit_grad=grad)
    if kind == LossKind.SMOOTHED_CE:
        target = smooth_labels(c, alpha, o.shape[0]).values
        return LossEvaluation(
            value=float(-np.dot(target, log_softmax(o))),
            logit_grad=softmax(o) - target,
        )
    if kind == LossKind.POINCARE:
        return _poincare(o, c)
    if kind == LossKind.IDENTITY_LOGIT:
        grad = np.zeros_like(o)
        grad[c] = -1.0
        return LossEvaluation(value=float(-o[c]), logit_grad=grad)
    raise InvalidArgumentError(f"未知的损失类型: {kind}")
