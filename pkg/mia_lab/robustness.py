"""
对抗鲁棒性评估：FGSM、PGD 和 BIM（L_inf 约束）
"""

from typing import Any, Dict, List, Literal, Optional

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field, field_validator

from mia_lab.classifier import MlpClassifier, accuracy
from mia_lab.losses import LossKind
from utils.error_handler import InvalidArgumentError, NumericFailureError


class RobustnessConfig(BaseModel):
    """对抗攻击配置；默认值为 eps = 8/255、步长 2/255、10 步"""

    attack: Literal["fgsm", "pgd", "bim"] = "pgd"
    epsilon: float = Field(8.0 / 255.0, ge=0.0)
    step_size: float = Field(2.0 / 255.0, gt=0.0)
    steps: int = Field(10, ge=1)
    random_start: bool = True
    seed: int = Field(0, ge=0)
    # 额外评估的 eps 取值；步长按 step_size / epsilon 等比缩放
    sweep: List[float] = Field(default_factory=list)

    @field_validator("sweep")
    @classmethod
    def _non_negative(cls, values: List[float]) -> List[float]:
        if any(v < 0 for v in values):
            raise ValueError(f"sweep 中的 eps 必须 >= 0: {values}")
        return values


def _as_batch(x):
    arr = np.asarray(x, dtype=np.float64)
    return (arr[None, :], True) if arr.ndim == 1 else (arr, False)


def _ce_gradient(model: MlpClassifier, batch: np.ndarray, classes: np.ndarray) -> np.ndarray:
    _, _, grads = model.batch_input_gradient(batch, LossKind.CE_IDENTITY, classes)
    if not np.all(np.isfinite(grads)):
        raise NumericFailureError("对抗攻击的输入梯度出现非有限值", layer="input")
    return grads


def _direction(label, targeted: Optional[Any], n: int):
    """无目标攻击沿真实标签损失上升，有目标攻击沿目标类损失下降"""
    if targeted is None:
        return np.broadcast_to(np.asarray(label, dtype=np.int64), (n,)), 1.0
    return np.broadcast_to(np.asarray(targeted, dtype=np.int64), (n,)), -1.0


def fgsm(model: MlpClassifier, x, label, epsilon: float, targeted=None) -> np.ndarray:
    """x' = x ± eps * sign(grad)"""
    if epsilon < 0:
        raise InvalidArgumentError(f"epsilon 必须 >= 0，当前为 {epsilon}")
    batch, single = _as_batch(x)
    classes, sign = _direction(label, targeted, batch.shape[0])
    grads = _ce_gradient(model, batch, classes)
    adversarial = batch + sign * epsilon * np.sign(grads)
    return adversarial[0] if single else adversarial


def pgd(
    model: MlpClassifier,
    x,
    label,
    epsilon: float,
    step_size: float,
    steps: int,
    random_start: bool = True,
    targeted=None,
    seed: int = 0,
) -> np.ndarray:
    """迭代符号梯度步，每步后投影回以 x 为中心、半径 eps 的 L_inf 球"""
    if epsilon < 0:
        raise InvalidArgumentError(f"epsilon 必须 >= 0，当前为 {epsilon}")
    if step_size <= 0:
        raise InvalidArgumentError(f"步长必须 > 0，当前为 {step_size}")
    if steps < 1:
        raise InvalidArgumentError(f"步数必须 >= 1，当前为 {steps}")

    batch, single = _as_batch(x)
    classes, sign = _direction(label, targeted, batch.shape[0])
    lower, upper = batch - epsilon, batch + epsilon
    adversarial = batch.copy()
    if random_start:
        rng = np.random.default_rng(seed)
        adversarial = adversarial + rng.uniform(-epsilon, epsilon, size=batch.shape)

    for _ in range(steps):
        grads = _ce_gradient(model, adversarial, classes)
        adversarial = np.clip(adversarial + sign * step_size * np.sign(grads), lower, upper)
    return adversarial[0] if single else adversarial


def bim(model: MlpClassifier, x, label, epsilon: float, step_size: float, steps: int, targeted=None) -> np.ndarray:
    return pgd(model, x, label, epsilon, step_size, steps, random_start=False, targeted=targeted)


def run_attack(model: MlpClassifier, features, labels, config: RobustnessConfig, targeted=None) -> np.ndarray:
    if config.attack == "fgsm":
        return fgsm(model, features, labels, config.epsilon, targeted=targeted)
    if config.attack == "bim":
        return bim(model, features, labels, config.epsilon, config.step_size, config.steps, targeted=targeted)
    return pgd(
        model, features, labels, config.epsilon, config.step_size, config.steps,
        random_start=config.random_start, targeted=targeted, seed=config.seed,
    )


def linf_margin(features, labels) -> float:
    """每个样本到最近异类样本的 L_inf 距离之半，取中位数"""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    distances = np.max(np.abs(features[:, None, :] - features[None, :, :]), axis=-1)
    other = labels[:, None] != labels[None, :]
    if not other.any():
        return float("nan")
    nearest = np.where(other, distances, np.inf).min(axis=1)
    return float(np.median(nearest[np.isfinite(nearest)]) / 2.0)


def at_epsilon(config: RobustnessConfig, epsilon: float) -> RobustnessConfig:
    """换一个预算，步长按 step_size / epsilon 的比例随之缩放"""
    step_size = config.step_size
    if config.epsilon > 0 and epsilon > 0:
        step_size = config.step_size * (epsilon / config.epsilon)
    return config.model_copy(update={"epsilon": float(epsilon), "step_size": float(step_size), "sweep": []})


def _success_rates(model: MlpClassifier, features, labels, targets, config: RobustnessConfig) -> Dict[str, Any]:
    untargeted = run_attack(model, features, labels, config)
    targeted = run_attack(model, features, labels, config, targeted=targets)
    return {
        "untargeted_success_rate": float(np.mean(model.predict(untargeted) != labels)),
        "targeted_success_rate": float(np.mean(model.predict(targeted) == targets)),
        "max_linf_untargeted": float(np.max(np.abs(untargeted - features))),
        "max_linf_targeted": float(np.max(np.abs(targeted - features))),
    }


def robustness_report(model: MlpClassifier, dataset, config: RobustnessConfig) -> Dict[str, Any]:
    """在数据集上运行对抗攻击，报告无目标与有目标（目标类为 (label + 1) mod C）的攻击成功率

    ``config.sweep`` 非空时，另外在每个预算上重跑一次，给出成功率随 eps 变化的曲线。
    """
    features = np.asarray(dataset.features, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if features.shape[0] == 0:
        raise InvalidArgumentError("鲁棒性评估的数据集为空")
    num_classes = model.config.num_classes
    targets = (labels + 1) % num_classes

    report = {
        "attack": config.attack,
        "epsilon": config.epsilon,
        "step_size": config.step_size,
        "steps": config.steps,
        "random_start": config.random_start if config.attack == "pgd" else False,
        "num_samples": int(features.shape[0]),
        "clean_accuracy": accuracy(model, dataset),
        "data_margin_linf": linf_margin(features, labels),
        **_success_rates(model, features, labels, targets, config),
    }
    curve = []
    for epsilon in config.sweep:
        point = at_epsilon(config, epsilon)
        rates = _success_rates(model, features, labels, targets, point)
        curve.append({
            "epsilon": point.epsilon,
            "step_size": point.step_size,
            "untargeted_success_rate": rates["untargeted_success_rate"],
            "targeted_success_rate": rates["targeted_success_rate"],
        })
    report["sweep"] = curve

    logger.info(
        f"🛡️ {config.attack.upper()} 攻击: 无目标成功率 {report['untargeted_success_rate']:.3f}, "
        f"有目标成功率 {report['targeted_success_rate']:.3f}（数据间隔 {report['data_margin_linf']:.3f}）"
    )
    return report
