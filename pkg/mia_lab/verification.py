"""
梯度推导校验

对 softmax 导数、平滑交叉熵的 logit 梯度、损失分解恒等式、梯度饱和阈值、
网络反向传播以及先验拉回梯度，逐项比较解析结果与有限差分，
记录最大偏差并在超出容差时报错。
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
from loguru import logger
from rich.console import Console
from rich.table import Table

from mia_lab.classifier import MlpClassifier, MlpConfig, Mode
from mia_lab.inversion import Prior, PriorKind
from mia_lab.losses import LossKind, evaluate_loss
from mia_lab.smoothing import (
    decomposed_ce_loss,
    log_softmax,
    logit_gradient,
    saturation_thresholds,
    smooth_label_matrix,
    smooth_labels,
    smoothed_ce_loss,
    softmax,
    softmax_jacobian,
)
from utils.error_handler import VerificationError


FD_STEP = 1e-5


@dataclass
class CheckResult:
    """单项校验结果"""
    name: str
    max_deviation: float
    tolerance: float
    instances: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_deviation) and self.max_deviation <= self.tolerance)

    def to_dict(self) -> Dict[str, object]:
        return {
            "name": self.name,
            "max_deviation": self.max_deviation,
            "tolerance": self.tolerance,
            "instances": self.instances,
            "passed": self.passed,
        }


@dataclass
class VerificationReport:
    seed: int
    checks: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> List[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def assert_passed(self) -> None:
        failures = self.failures()
        if failures:
            first = failures[0]
            raise VerificationError(
                f"校验 {first.name} 超出容差: 最大偏差 {first.max_deviation:.3e} > {first.tolerance:.1e}",
                check=first.name,
            )

    def to_dict(self) -> Dict[str, object]:
        return {"seed": self.seed, "passed": self.passed, "checks": [c.to_dict() for c in self.checks]}


def central_difference(func: Callable[[np.ndarray], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """标量函数的中心差分梯度"""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = func(x)
        flat[i] = original - step
        minus = func(x)
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * step)
    return grad


def _relative(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """|a - n| / max(1, |a|, |n|) 的最大值"""
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def _random_instance(rng: np.random.Generator):
    num_classes = int(rng.integers(2, 21))
    logits = rng.normal(0.0, 2.0, size=num_classes)
    alpha = float(rng.uniform(-0.5, 1.0))
    label = int(rng.integers(num_classes))
    return num_classes, logits, alpha, label


# ----------------------------------------------------------------------
# 各项校验
# ----------------------------------------------------------------------
def check_logit_gradients(rng: np.random.Generator, instances: int) -> CheckResult:
    worst = 0.0
    for _ in range(instances):
        num_classes, logits, alpha, label = _random_instance(rng)
        target = smooth_labels(label, alpha, num_classes)
        analytic = logit_gradient(softmax(logits), target)
        numeric = central_difference(lambda o: -float(np.dot(target.values, log_softmax(o))), logits)
        worst = max(worst, float(np.max(np.abs(analytic - numeric))))
    return CheckResult("logit_gradient_vs_finite_difference", worst, 1e-6, instances)


def check_jacobian_rows(rng: np.random.Generator, instances: int) -> CheckResult:
    worst = 0.0
    for _ in range(instances):
        _, logits, _, _ = _random_instance(rng)
        worst = max(worst, float(np.max(np.abs(softmax_jacobian(logits).sum(axis=1)))))
    return CheckResult("softmax_jacobian_row_sums", worst, 1e-10, instances)


def check_jacobian_finite_difference(rng: np.random.Generator, instances: int) -> CheckResult:
    worst = 0.0
    for _ in range(instances):
        num_classes, logits, _, _ = _random_instance(rng)
        jacobian = softmax_jacobian(logits)
        for i in range(num_classes):
            numeric = central_difference(lambda o: float(softmax(o)[i]), logits)
            worst = max(worst, float(np.max(np.abs(jacobian[i] - numeric))))
    return CheckResult("softmax_jacobian_vs_finite_difference", worst, 1e-6, instances)


def check_jacobian_chain(rng: np.random.Generator, instances: int) -> CheckResult:
    """J^T (dL/dp) 与 p - y 一致"""
    worst = 0.0
    for _ in range(instances):
        num_classes, logits, alpha, label = _random_instance(rng)
        target = smooth_labels(label, alpha, num_classes)
        p = softmax(logits)
        chained = softmax_jacobian(logits).T @ (-target.values / p)
        worst = max(worst, float(np.max(np.abs(chained - logit_gradient(p, target)))))
    return CheckResult("logit_gradient_vs_jacobian_chain", worst, 1e-8, instances)


def check_decomposition(rng: np.random.Generator, instances: int) -> CheckResult:
    worst = 0.0
    for _ in range(instances):
        num_classes, logits, alpha, label = _random_instance(rng)
        p = softmax(logits)
        direct = smoothed_ce_loss(p, smooth_labels(label, alpha, num_classes))
        worst = max(worst, abs(direct - decomposed_ce_loss(p, label, alpha)))
    return CheckResult("loss_decomposition_identity", worst, 1e-9, instances)


def _target_component(p_target: float, num_classes: int, alpha: float) -> float:
    """目标类概率为 p_target、其余类均分剩余概率时，目标 logit 梯度分量"""
    p = np.full(num_classes, (1.0 - p_target) / (num_classes - 1))
    p[0] = p_target
    return float(logit_gradient(p, smooth_labels(0, alpha, num_classes))[0])


def locate_sign_flip(num_classes: int, alpha: float, tol: float = 1e-12) -> Optional[float]:
    """二分查找目标 logit 梯度分量在 [0, 1] 上的变号点；不变号时返回 None"""
    lo, hi = 0.0, 1.0
    if _target_component(hi, num_classes, alpha) < 0.0:
        return None
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _target_component(mid, num_classes, alpha) < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def check_saturation(rng: np.random.Generator, instances: int) -> CheckResult:
    worst = 0.0
    for _ in range(instances):
        num_classes = int(rng.integers(2, 21))
        alpha = float(rng.uniform(1e-3, 1.0))
        flip = locate_sign_flip(num_classes, alpha)
        expected = saturation_thresholds(alpha, num_classes).target_threshold
        worst = max(worst, abs(flip - expected) if flip is not None else np.inf)

        negative = float(-rng.uniform(1e-3, 0.5))
        if locate_sign_flip(num_classes, negative) is not None:
            worst = np.inf
        grid = np.linspace(0.0, 1.0, 11)
        if any(_target_component(q, num_classes, negative) >= 0.0 for q in grid):
            worst = np.inf
    return CheckResult("saturation_sign_flip", worst, 1e-9, instances)


def _random_model(rng: np.random.Generator) -> MlpClassifier:
    depth = int(rng.integers(1, 3))
    config = MlpConfig(
        input_dim=int(rng.integers(2, 6)),
        hidden_dims=[int(rng.integers(2, 11)) for _ in range(depth)],
        num_classes=int(rng.integers(2, 6)),
    )
    model = MlpClassifier(config, seed=int(rng.integers(2**31)))
    for name in model.params:
        if name.startswith(("gamma", "beta", "b")):
            model.params[name] = model.params[name] + rng.normal(0.0, 0.1, size=model.params[name].shape)
    for name in model.buffers:
        if name.startswith("running_mean"):
            model.buffers[name] = rng.normal(0.0, 0.1, size=model.buffers[name].shape)
        else:
            model.buffers[name] = rng.uniform(0.5, 1.5, size=model.buffers[name].shape)
    model.mark_updated()
    return model


def check_backprop(rng: np.random.Generator, instances: int) -> CheckResult:
    """训练模式下每个参数梯度及输入梯度与有限差分一致"""
    worst = 0.0
    for _ in range(instances):
        model = _random_model(rng)
        batch = rng.normal(size=(4, model.config.input_dim))
        labels = rng.integers(model.config.num_classes, size=4)
        alpha = float(rng.uniform(-0.2, 0.3))
        targets = smooth_label_matrix(labels, alpha, model.config.num_classes)

        def loss_of(x: np.ndarray) -> float:
            logits, _ = model.forward(x, Mode.TRAIN, track_stats=False)
            return float(-np.sum(targets * log_softmax(logits)))

        logits, cache = model.forward(batch, Mode.TRAIN, track_stats=False)
        grads, dx = model.backward(cache, softmax(logits) - targets)

        for name, param in model.params.items():
            def loss_param(value: np.ndarray, name=name) -> float:
                saved = model.params[name]
                model.params[name] = value
                try:
                    return loss_of(batch)
                finally:
                    model.params[name] = saved

            worst = max(worst, _relative(grads[name], central_difference(loss_param, param)))
        worst = max(worst, _relative(dx, central_difference(loss_of, batch)))
    return CheckResult("backprop_vs_finite_difference", worst, 1e-4, instances)


def check_input_gradients(rng: np.random.Generator, instances: int) -> CheckResult:
    """eval 模式下各攻击损失的输入梯度"""
    worst = 0.0
    for _ in range(instances):
        model = _random_model(rng).eval_mode()
        x = rng.normal(size=model.config.input_dim)
        c = int(rng.integers(model.config.num_classes))
        for kind in LossKind:
            analytic = model.input_gradient(x, kind, c, alpha=0.1)
            numeric = central_difference(
                lambda v: evaluate_loss(kind, model.logits(v)[0], c, 0.1).value, x
            )
            worst = max(worst, _relative(analytic, numeric))
    return CheckResult("input_gradient_vs_finite_difference", worst, 1e-4, instances)


def check_latent_pullback(rng: np.random.Generator, instances: int) -> CheckResult:
    """经 PCA 先验解码后的潜向量梯度"""
    worst = 0.0
    for _ in range(instances):
        model = _random_model(rng).eval_mode()
        d = model.config.input_dim
        k = int(rng.integers(1, d + 1))
        basis, _ = np.linalg.qr(rng.normal(size=(d, d)))
        prior = Prior(kind=PriorKind.PCA, mean=rng.normal(size=d), components=basis[:, :k])
        z = rng.normal(size=k)
        c = int(rng.integers(model.config.num_classes))
        analytic = prior.pullback(model.input_gradient(prior.decode(z), LossKind.CE_IDENTITY, c))
        numeric = central_difference(
            lambda v: evaluate_loss(LossKind.CE_IDENTITY, model.logits(prior.decode(v))[0], c).value, z
        )
        worst = max(worst, _relative(analytic, numeric))
    return CheckResult("latent_gradient_vs_finite_difference", worst, 1e-4, instances)


def run_verification(seed: int = 0, instances: int = 1000, network_instances: int = 20) -> VerificationReport:
    """运行全部校验；每项使用由 seed 派生的独立随机流"""
    suite = [
        (check_logit_gradients, instances),
        (check_jacobian_rows, instances),
        (check_jacobian_finite_difference, max(1, instances // 10)),
        (check_jacobian_chain, instances),
        (check_decomposition, instances),
        (check_saturation, max(1, instances // 10)),
        (check_backprop, network_instances),
        (check_input_gradients, network_instances),
        (check_latent_pullback, network_instances),
    ]
    report = VerificationReport(seed=seed)
    for index, (check, count) in enumerate(suite):
        result = check(np.random.default_rng([seed, index]), count)
        report.checks.append(result)
        status = "✅" if result.passed else "❌"
        logger.info(f"{status} {result.name}: 最大偏差 {result.max_deviation:.3e} (容差 {result.tolerance:.0e})")
    return report


def render_report(report: VerificationReport, console: Optional[Console] = None) -> None:
    table = Table(title=f"梯度校验 (seed={report.seed})")
    table.add_column("校验项")
    table.add_column("样本数", justify="right")
    table.add_column("最大偏差", justify="right")
    table.add_column("容差", justify="right")
    table.add_column("结果", justify="center")
    for check in report.checks:
        table.add_row(
            check.name,
            str(check.instances),
            f"{check.max_deviation:.3e}",
            f"{check.tolerance:.0e}",
            "[green]通过[/green]" if check.passed else "[red]失败[/red]",
        )
    (console or Console()).print(table)
