"""
模型反演攻击

- 简单梯度攻击：直接在输入空间优化单个样本
- 线性生成先验：恒等先验或在辅助数据上拟合的 PCA 仿射流形
- 三阶段流水线：候选采样 → 潜向量优化 → 鲁棒置信度筛选

攻击只接收模型与先验，从不读取目标模型的训练数据。
"""

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, Field, model_validator

from mia_lab.classifier import MlpClassifier, Mode
from mia_lab.data import JitterTransform, jitter_copies
from mia_lab.losses import (  # noqa: F401  攻击损失在此统一导出
    LossEvaluation,
    LossKind,
    ce_identity_loss,
    evaluate_loss,
    parse_loss_kind,
    poincare_distance,
    poincare_loss,
    poincare_target,
)
from mia_lab.optim import OptimizerConfig, build_optimizer
from utils.artifacts import derive_seed, ensure_dir, read_json, write_frame, write_payload
from utils.error_handler import (
    ArtifactIOError,
    DegenerateInputError,
    InvalidArgumentError,
    InvalidStateError,
    NumericFailureError,
    NumericInputError,
    StageError,
)
from utils.resource_optimizer import IndexedTaskPool
from utils.workflow_manager import AttackStage, AttackWorkflow


STOP_CONFIDENCE = "confidence"
STOP_MAX_STEPS = "max_steps"

SAMPLING_SALT = "stage1"
SELECTION_SALT = "stage3"


# ----------------------------------------------------------------------
# 生成先验
# ----------------------------------------------------------------------
class PriorKind(str, Enum):
    IDENTITY = "identity"
    PCA = "pca"


@dataclass(frozen=True, eq=False)
class Prior:
    """仿射先验 x = mean + components @ z"""
    kind: PriorKind
    mean: np.ndarray
    components: np.ndarray
    explained_variance: Optional[np.ndarray] = None

    @property
    def input_dim(self) -> int:
        return int(self.components.shape[0])

    @property
    def latent_dim(self) -> int:
        return int(self.components.shape[1])

    @classmethod
    def identity(cls, input_dim: int) -> "Prior":
        return cls(
            kind=PriorKind.IDENTITY,
            mean=np.zeros(input_dim),
            components=np.eye(input_dim),
        )

    def _check(self, vec, expected: int, what: str) -> np.ndarray:
        v = np.asarray(vec, dtype=np.float64)
        if v.shape[-1] != expected:
            raise InvalidArgumentError(f"{what}维度应为 {expected}，得到 {v.shape[-1]}")
        return v

    def decode(self, z) -> np.ndarray:
        z = self._check(z, self.latent_dim, "潜向量")
        if not np.all(np.isfinite(z)):
            raise NumericInputError("潜向量包含非有限值")
        if self.kind == PriorKind.IDENTITY:
            return z.copy()
        return self.mean + z @ self.components.T

    def encode(self, x) -> np.ndarray:
        x = self._check(x, self.input_dim, "输入")
        if self.kind == PriorKind.IDENTITY:
            return x.copy()
        return (x - self.mean) @ self.components

    def pullback(self, input_gradient) -> np.ndarray:
        """把输入空间梯度拉回潜空间：W^T g"""
        g = self._check(input_gradient, self.input_dim, "梯度")
        if self.kind == PriorKind.IDENTITY:
            return g.copy()
        return g @ self.components

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "mean": self.mean,
            "components": self.components,
            "explained_variance": self.explained_variance,
        }


def fit_pca_prior(aux_data, latent_dim: int) -> Prior:
    """在辅助数据上拟合 PCA 先验

    协方差矩阵做特征分解，取前 k 个主方向；每个方向的符号固定为绝对值最大分量取正。
    """
    x = np.asarray(aux_data, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidArgumentError("辅助数据必须是二维矩阵")
    n, d = x.shape
    if not 1 <= latent_dim <= min(n - 1, d):
        raise InvalidArgumentError(
            f"潜空间维度 {latent_dim} 必须在 [1, min(N-1, d)] = [1, {min(n - 1, d)}] 内"
        )

    mean = x.mean(axis=0)
    centered = x - mean
    covariance = centered.T @ centered / (n - 1)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    order = np.argsort(eigenvalues)[::-1][:latent_dim]
    components = eigenvectors[:, order]
    pivots = np.argmax(np.abs(components), axis=0)
    signs = np.sign(components[pivots, np.arange(latent_dim)])
    components = components * np.where(signs == 0, 1.0, signs)

    logger.info(f"📐 PCA 先验: d={d}, k={latent_dim}, 解释方差={eigenvalues[order].sum():.4f}")
    return Prior(
        kind=PriorKind.PCA,
        mean=mean,
        components=components,
        explained_variance=eigenvalues[order].copy(),
    )


def prior_decode(prior: Prior, z) -> np.ndarray:
    return prior.decode(z)


# ----------------------------------------------------------------------
# 配置与轨迹
# ----------------------------------------------------------------------
class AttackConfig(BaseModel):
    """攻击配置；默认值对应玩具实验的简单攻击（SGD 学习率 0.1、无动量、置信度 0.95 停止、最多 5000 步）"""

    loss: LossKind = LossKind.CE_IDENTITY
    optimizer: OptimizerConfig = Field(default_factory=lambda: OptimizerConfig(kind="sgd", lr=0.1))
    max_steps: int = Field(5000, ge=1)
    stop_confidence: Optional[float] = 0.95
    pool_size: int = Field(1, ge=1)
    candidates_per_class: int = Field(1, ge=1)
    final_per_class: int = Field(1, ge=1)
    transform: JitterTransform = Field(default_factory=JitterTransform)
    transform_count: int = Field(1, ge=1)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_sizes(self) -> "AttackConfig":
        if not self.final_per_class <= self.candidates_per_class <= self.pool_size:
            raise ValueError("必须满足 final_per_class <= candidates_per_class <= pool_size")
        if self.stop_confidence is not None and not 0.0 < self.stop_confidence <= 1.0:
            raise ValueError("stop_confidence 必须在 (0, 1] 内或为空")
        return self


@dataclass
class Trajectory:
    """一次优化的逐步记录；共 steps + 1 条，最后一条是终止状态"""
    target_class: int
    points: np.ndarray
    losses: np.ndarray
    confidences: np.ndarray
    gradients: np.ndarray
    steps: int
    stop_reason: str
    latents: Optional[np.ndarray] = None
    candidate_index: int = 0
    clamp_events: int = 0

    @property
    def final_point(self) -> np.ndarray:
        return self.points[-1]

    @property
    def initial_confidence(self) -> float:
        return float(self.confidences[0])

    @property
    def final_confidence(self) -> float:
        return float(self.confidences[-1])

    @property
    def update_gradients(self) -> np.ndarray:
        """驱动每次更新的输入梯度"""
        return self.gradients[: self.steps]

    def to_frame(self) -> pd.DataFrame:
        columns: Dict[str, Any] = {"step": np.arange(self.points.shape[0])}
        for j in range(self.points.shape[1]):
            columns[f"x_{j}"] = self.points[:, j]
        if self.latents is not None:
            for j in range(self.latents.shape[1]):
                columns[f"z_{j}"] = self.latents[:, j]
        columns["loss"] = self.losses
        columns["confidence"] = self.confidences
        for j in range(self.gradients.shape[1]):
            columns[f"grad_{j}"] = self.gradients[:, j]
        return pd.DataFrame(columns)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, summary: Dict[str, Any]) -> "Trajectory":
        def block(prefix: str) -> Optional[np.ndarray]:
            cols = [c for c in frame.columns if c.startswith(prefix)]
            if not cols:
                return None
            cols.sort(key=lambda c: int(c[len(prefix):]))
            return frame[cols].to_numpy(dtype=np.float64)

        return cls(
            target_class=int(summary["target_class"]),
            points=block("x_"),
            latents=block("z_"),
            losses=frame["loss"].to_numpy(dtype=np.float64),
            confidences=frame["confidence"].to_numpy(dtype=np.float64),
            gradients=block("grad_"),
            steps=int(summary["steps"]),
            stop_reason=str(summary["stop_reason"]),
            candidate_index=int(summary["candidate_index"]),
            clamp_events=int(summary.get("clamp_events", 0)),
        )

    def summary(self) -> Dict[str, Any]:
        return {
            "target_class": self.target_class,
            "candidate_index": self.candidate_index,
            "steps": self.steps,
            "stop_reason": self.stop_reason,
            "initial_confidence": self.initial_confidence,
            "final_confidence": self.final_confidence,
            "final_loss": float(self.losses[-1]),
            "clamp_events": self.clamp_events,
        }


def _require_eval(model: MlpClassifier) -> None:
    if model.mode != Mode.EVAL:
        raise InvalidStateError("攻击只能针对 eval 模式的冻结模型")


def _run_optimization(
    model: MlpClassifier,
    prior: Prior,
    start_latent,
    target_class: int,
    config: AttackConfig,
    candidate_index: int = 0,
) -> Trajectory:
    """潜向量优化主循环：z <- optimizer(z, W^T grad_x L(model(decode(z)), c))"""
    optimizer = build_optimizer(config.optimizer)
    params = {"z": np.array(start_latent, dtype=np.float64)}
    record_latents = prior.kind != PriorKind.IDENTITY

    points, latents, losses, confidences, gradients = [], [], [], [], []
    clamp_events = 0
    stop_reason = STOP_MAX_STEPS
    for step in range(config.max_steps + 1):
        x = prior.decode(params["z"])
        evaluation, probs, grad_x = model.loss_and_input_gradient(x, config.loss, target_class)
        if not np.all(np.isfinite(grad_x)):
            raise NumericFailureError(f"第 {step} 步输入梯度出现非有限值", layer="input", step=step)
        clamp_events += int(evaluation.clamped)

        points.append(x)
        latents.append(params["z"].copy())
        losses.append(evaluation.value)
        confidences.append(float(probs[target_class]))
        gradients.append(grad_x)

        if config.stop_confidence is not None and probs[target_class] >= config.stop_confidence:
            stop_reason = STOP_CONFIDENCE
            break
        if step == config.max_steps:
            break
        optimizer.step(params, {"z": prior.pullback(grad_x)})

    return Trajectory(
        target_class=int(target_class),
        points=np.asarray(points),
        latents=np.asarray(latents) if record_latents else None,
        losses=np.asarray(losses),
        confidences=np.asarray(confidences),
        gradients=np.asarray(gradients),
        steps=len(points) - 1,
        stop_reason=stop_reason,
        candidate_index=candidate_index,
        clamp_events=clamp_events,
    )


def simple_invert(
    model: MlpClassifier, target_class: int, start, config: AttackConfig, candidate_index: int = 0
) -> Trajectory:
    """在输入空间直接做梯度下降，直到置信度达到阈值或步数用尽"""
    _require_eval(model)
    start = np.asarray(start, dtype=np.float64)
    trajectory = _run_optimization(
        model, Prior.identity(start.shape[0]), start, target_class, config, candidate_index
    )
    logger.info(
        f"🎯 简单反演完成: 类别 {target_class}, 步数 {trajectory.steps}, "
        f"停止原因 {trajectory.stop_reason}, 置信度 {trajectory.final_confidence:.4f}"
    )
    return trajectory


# ----------------------------------------------------------------------
# 三阶段流水线
# ----------------------------------------------------------------------
@dataclass
class CandidateSelection:
    """第一阶段为某个类别保留的候选"""
    target_class: int
    indices: np.ndarray
    latents: np.ndarray
    scores: np.ndarray


@dataclass
class OptimizationResult:
    """第二阶段某个类别的优化结果"""
    target_class: int
    trajectories: List[Trajectory] = field(default_factory=list)
    failures: List[Dict[str, Any]] = field(default_factory=list)


@dataclass
class SelectionResult:
    """第三阶段某个类别的最终重建"""
    target_class: int
    candidate_indices: np.ndarray
    points: np.ndarray
    robust_scores: np.ndarray
    shortfall: Optional[str] = None


def _pool_latents(config: AttackConfig, latent_dim: int) -> np.ndarray:
    """每个候选一条独立的随机流，由 (运行种子, 候选下标) 决定"""
    pool_seed = derive_seed(config.seed, "latent_pool")
    return np.stack(
        [np.random.default_rng([pool_seed, i]).standard_normal(latent_dim) for i in range(config.pool_size)]
    )


def robust_confidence(
    model: MlpClassifier,
    points,
    candidate_indices: Sequence[int],
    transform: JitterTransform,
    transform_count: int,
) -> np.ndarray:
    """每个点在 transform_count 个抖动副本上的平均类别概率，形状 (n, C)

    第 i 个点的第 t 个副本使用抽样序号 candidate_indices[i] * transform_count + t。
    """
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] == 0:
        return np.zeros((0, model.config.num_classes))
    copies = np.concatenate([
        jitter_copies(points[i], transform, first_draw=int(idx) * transform_count, count=transform_count)
        for i, idx in enumerate(candidate_indices)
    ])
    probs = model.predict_proba(copies)
    return probs.reshape(points.shape[0], transform_count, -1).mean(axis=1)


def _rank(scores: np.ndarray, indices: np.ndarray, keep: int) -> np.ndarray:
    """按分数降序、候选下标升序排序，返回前 keep 个位置"""
    order = np.lexsort((indices, -scores))
    return order[:keep]


def sample_candidates(
    model: MlpClassifier,
    prior: Prior,
    target_classes: Sequence[int],
    config: AttackConfig,
) -> Dict[int, CandidateSelection]:
    """第一阶段：从标准正态抽取潜向量池，按鲁棒置信度为每个类别保留候选"""
    _require_eval(model)
    latents = _pool_latents(config, prior.latent_dim)
    points = np.stack([prior.decode(z) for z in latents])
    indices = np.arange(config.pool_size)
    transform = config.transform.reseeded(derive_seed(config.transform.seed, SAMPLING_SALT))
    scores = robust_confidence(model, points, indices, transform, config.transform_count)

    selections: Dict[int, CandidateSelection] = {}
    for c in target_classes:
        _check_target(model, c)
        keep = _rank(scores[:, c], indices, config.candidates_per_class)
        selections[int(c)] = CandidateSelection(
            target_class=int(c),
            indices=indices[keep],
            latents=latents[keep],
            scores=scores[keep, c],
        )
        logger.debug(f"类别 {c}: 保留 {len(keep)} 个候选，最高分 {scores[keep[0], c]:.4f}")
    return selections


def _check_target(model: MlpClassifier, target_class: int) -> None:
    if not 0 <= int(target_class) < model.config.num_classes:
        raise InvalidArgumentError(f"目标类别 {target_class} 超出范围 [0, {model.config.num_classes})")


def optimize_latents(
    model: MlpClassifier,
    prior: Prior,
    latents,
    target_class: int,
    config: AttackConfig,
    candidate_indices: Optional[Sequence[int]] = None,
    jobs: int = 1,
) -> OptimizationResult:
    """第二阶段：逐个候选独立优化；出现数值失败的候选被记录并跳过"""
    _require_eval(model)
    _check_target(model, target_class)
    parse_loss_kind(config.loss)
    latents = np.asarray(latents, dtype=np.float64)
    if candidate_indices is None:
        candidate_indices = list(range(latents.shape[0]))

    def optimize_one(i: int, z: np.ndarray):
        try:
            return _run_optimization(model, prior, z, target_class, config, int(candidate_indices[i]))
        except (NumericFailureError, NumericInputError, DegenerateInputError) as e:
            return {"candidate_index": int(candidate_indices[i]), "error_type": e.error_type, "message": str(e)}

    outcomes = IndexedTaskPool(jobs).map_indexed(optimize_one, list(latents))
    result = OptimizationResult(target_class=int(target_class))
    for outcome in outcomes:
        if isinstance(outcome, Trajectory):
            result.trajectories.append(outcome)
        else:
            logger.warning(f"⚠️ 候选 {outcome['candidate_index']} 优化失败，已跳过: {outcome['message']}")
            result.failures.append(outcome)
    return result


def select_results(
    model: MlpClassifier,
    prior: Prior,
    optimized: Dict[int, OptimizationResult],
    config: AttackConfig,
) -> Dict[int, SelectionResult]:
    """第三阶段：用新的抖动抽样计算鲁棒置信度，每类保留 final_per_class 个结果"""
    _require_eval(model)
    transform = config.transform.reseeded(derive_seed(config.transform.seed, SELECTION_SALT))
    selections: Dict[int, SelectionResult] = {}
    for c, result in optimized.items():
        if not result.trajectories:
            raise InvalidArgumentError(f"类别 {c} 没有可供筛选的优化结果")
        points = np.stack([t.final_point for t in result.trajectories])
        indices = np.array([t.candidate_index for t in result.trajectories], dtype=np.int64)
        scores = robust_confidence(model, points, indices, transform, config.transform_count)[:, c]
        keep = _rank(scores, indices, config.final_per_class)

        shortfall = None
        if len(keep) < config.final_per_class:
            shortfall = f"只有 {len(keep)} 个候选，少于要求的 {config.final_per_class} 个"
            logger.warning(f"⚠️ 类别 {c}: {shortfall}")
        selections[int(c)] = SelectionResult(
            target_class=int(c),
            candidate_indices=indices[keep],
            points=points[keep],
            robust_scores=scores[keep],
            shortfall=shortfall,
        )
    return selections


@dataclass
class AttackRun:
    """一次攻击的完整记录"""
    mode: str
    config: AttackConfig
    target_classes: List[int]
    prior: Prior
    candidates: Dict[int, CandidateSelection] = field(default_factory=dict)
    optimized: Dict[int, OptimizationResult] = field(default_factory=dict)
    selected: Dict[int, SelectionResult] = field(default_factory=dict)
    stages: List[Dict[str, Any]] = field(default_factory=list)
    stage_models: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_simple(
        cls, trajectories: Union[Trajectory, Sequence[Trajectory]], config: AttackConfig
    ) -> "AttackRun":
        """包装简单攻击的轨迹；多个起点时 candidate_index 为起点序号"""
        if isinstance(trajectories, Trajectory):
            trajectories = [trajectories]
        trajectories = list(trajectories)
        if not trajectories:
            raise InvalidArgumentError("简单攻击至少需要一条轨迹")
        c = trajectories[0].target_class
        if any(t.target_class != c for t in trajectories):
            raise InvalidArgumentError("简单攻击的所有轨迹必须针对同一个目标类别")
        return cls(
            mode="simple",
            config=config,
            target_classes=[c],
            prior=Prior.identity(trajectories[0].points.shape[1]),
            optimized={c: OptimizationResult(target_class=c, trajectories=trajectories)},
            selected={
                c: SelectionResult(
                    target_class=c,
                    candidate_indices=np.array([t.candidate_index for t in trajectories]),
                    points=np.stack([t.final_point for t in trajectories]),
                    robust_scores=np.array([t.final_confidence for t in trajectories]),
                )
            },
        )

    def trajectories(self) -> List[Trajectory]:
        return [t for c in sorted(self.optimized) for t in self.optimized[c].trajectories]

    def reconstructions(self) -> Dict[int, np.ndarray]:
        return {c: s.points for c, s in sorted(self.selected.items())}

    @staticmethod
    def trajectory_name(trajectory: Trajectory) -> str:
        return f"class{trajectory.target_class}_cand{trajectory.candidate_index:04d}.csv"

    def to_payload(self) -> Dict[str, Any]:
        classes = {}
        for c in self.target_classes:
            entry: Dict[str, Any] = {}
            if c in self.candidates:
                cand = self.candidates[c]
                entry["candidates"] = {"indices": cand.indices, "scores": cand.scores}
            if c in self.optimized:
                opt = self.optimized[c]
                entry["trajectories"] = [
                    {**t.summary(), "file": self.trajectory_name(t)} for t in opt.trajectories
                ]
                entry["failures"] = opt.failures
            if c in self.selected:
                sel = self.selected[c]
                entry["selected"] = {
                    "candidate_indices": sel.candidate_indices,
                    "points": sel.points,
                    "robust_scores": sel.robust_scores,
                    "shortfall": sel.shortfall,
                }
            classes[str(c)] = entry
        return {
            "mode": self.mode,
            "config": self.config.model_dump(mode="json"),
            "target_classes": self.target_classes,
            "prior": {"kind": self.prior.kind.value, "latent_dim": self.prior.latent_dim},
            "stages": self.stages,
            "stage_models": self.stage_models,
            "classes": classes,
        }

    def save(self, directory: Union[str, Path], provenance: Dict[str, Any]) -> Path:
        """写出 attack_run.json 与每条轨迹的 CSV"""
        directory = ensure_dir(directory)
        trajectory_dir = ensure_dir(directory / "trajectories")
        for t in self.trajectories():
            write_frame(trajectory_dir / self.trajectory_name(t), t.to_frame())
        path = write_payload(directory / "attack_run.json", self.to_payload(), provenance)
        logger.info(f"💾 攻击结果已保存: {path}")
        return path


@dataclass
class AttackArtifacts:
    """从磁盘读回的攻击结果"""
    payload: Dict[str, Any]
    reconstructions: Dict[int, np.ndarray]
    trajectories: List[Trajectory]


def read_attack_run(path: Union[str, Path]) -> AttackArtifacts:
    path = Path(path)
    document = read_json(path)
    payload = document.get("payload")
    if payload is None:
        raise ArtifactIOError(f"不是有效的攻击结果文件: {path}")

    reconstructions: Dict[int, np.ndarray] = {}
    trajectories: List[Trajectory] = []
    for key, entry in payload["classes"].items():
        if "selected" in entry:
            reconstructions[int(key)] = np.asarray(entry["selected"]["points"], dtype=np.float64)
        for summary in entry.get("trajectories", []):
            csv_path = path.parent / "trajectories" / summary["file"]
            if not csv_path.is_file():
                raise ArtifactIOError(f"找不到轨迹文件: {csv_path}")
            trajectories.append(Trajectory.from_frame(pd.read_csv(csv_path, float_precision="round_trip"), summary))
    return AttackArtifacts(payload=payload, reconstructions=reconstructions, trajectories=trajectories)


def run_ppa(
    model: MlpClassifier,
    prior: Prior,
    target_classes: Sequence[int],
    config: AttackConfig,
    jobs: int = 1,
    sampling_model: Optional[MlpClassifier] = None,
    selection_model: Optional[MlpClassifier] = None,
) -> AttackRun:
    """依次执行三个阶段

    ``sampling_model`` / ``selection_model`` 可把第一/第三阶段交给其他模型执行，
    用于分析各阶段对攻击效果的影响。阶段失败时抛出 ``StageError``，
    已完成阶段的结果挂在异常的 ``partial_run`` 属性上。
    """
    target_classes = [int(c) for c in target_classes]
    sampler = sampling_model or model
    selector = selection_model or model
    workflow = AttackWorkflow()
    run = AttackRun(
        mode="ppa",
        config=config,
        target_classes=target_classes,
        prior=prior,
        stage_models={
            AttackStage.SAMPLING.value: "sampling_model" if sampling_model is not None else "target",
            AttackStage.OPTIMIZATION.value: "target",
            AttackStage.SELECTION.value: "selection_model" if selection_model is not None else "target",
        },
    )
    logger.info(
        f"🚀 开始三阶段攻击: 类别 {target_classes}, 候选池 {config.pool_size}, "
        f"损失 {config.loss.value}"
    )

    try:
        run.candidates = workflow.run_stage(
            AttackStage.SAMPLING,
            lambda: sample_candidates(sampler, prior, target_classes, config),
        )
        run.optimized = workflow.run_stage(
            AttackStage.OPTIMIZATION,
            lambda: {
                c: optimize_latents(
                    model, prior, run.candidates[c].latents, c, config,
                    candidate_indices=run.candidates[c].indices, jobs=jobs,
                )
                for c in target_classes
            },
        )
        run.selected = workflow.run_stage(
            AttackStage.SELECTION,
            lambda: select_results(selector, prior, run.optimized, config),
        )
    except StageError as e:
        run.stages = workflow.to_dict()
        e.partial_run = run
        raise

    run.stages = workflow.to_dict()
    logger.info(f"✅ 三阶段攻击完成: {workflow.completed_stages()}")
    return run
