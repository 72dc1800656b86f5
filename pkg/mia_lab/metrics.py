"""
攻击与模型评估指标

- 攻击准确率（独立评估模型的 top-1 / top-k）
- 特征距离：评估模型倒数第二层空间与原始输入空间中到最近目标类训练样本的距离
- 知识提取分数：仅用重建结果训练的替代模型在原始数据上的准确率
- 相邻攻击步输入梯度的余弦相似度（攻击轨迹或随机起点、随机目标的诊断轨迹）
- 嵌入空间与 logit 空间的类内/类间距离统计
"""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, Field

from mia_lab.classifier import MlpClassifier, MlpConfig, TrainConfig, accuracy, train
from mia_lab.data import LabeledDataset
from mia_lab.inversion import AttackConfig, Prior, Trajectory, optimize_latents
from mia_lab.optim import OptimizerConfig
from mia_lab.robustness import (  # noqa: F401  鲁棒性评估在此统一导出
    RobustnessConfig,
    bim,
    fgsm,
    pgd,
    robustness_report,
)
from mia_lab.smoothing import SmoothingSchedule
from utils.error_handler import InvalidArgumentError


def default_top_k(num_classes: int) -> int:
    """top-k 的默认 k：min(5, C - 1)"""
    return max(1, min(5, num_classes - 1))


# ----------------------------------------------------------------------
# 攻击准确率与特征距离
# ----------------------------------------------------------------------
def attack_accuracy(
    eval_model: MlpClassifier, reconstructions: Dict[int, np.ndarray], k: int
) -> Tuple[float, float]:
    """评估模型把重建结果判为目标类的比例 (acc@1, acc@k)"""
    num_classes = eval_model.config.num_classes
    if not 1 <= k < num_classes:
        raise InvalidArgumentError(f"k 必须满足 1 <= k < C={num_classes}，当前为 {k}")

    hits_1 = hits_k = total = 0
    for c, points in sorted(reconstructions.items()):
        points = np.asarray(points, dtype=np.float64)
        if points.shape[0] == 0:
            continue
        logits = eval_model.logits(points)
        # 稳定排序，同分时下标小的类别在前
        ranking = np.argsort(-logits, axis=1, kind="stable")
        hits_1 += int(np.sum(ranking[:, 0] == c))
        hits_k += int(np.sum(np.any(ranking[:, :k] == c, axis=1)))
        total += points.shape[0]
    if total == 0:
        raise InvalidArgumentError("没有可评估的重建结果")
    return hits_1 / total, hits_k / total


def pairwise_distances(a, b) -> np.ndarray:
    """两组向量之间的 L2 距离矩阵"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def nearest_distances(queries, references) -> np.ndarray:
    return pairwise_distances(queries, references).min(axis=1)


def _class_members(train_data: LabeledDataset, target_class: int) -> np.ndarray:
    members = train_data.of_class(target_class)
    if members.shape[0] == 0:
        raise InvalidArgumentError(f"训练集中没有类别 {target_class} 的样本")
    return members


def feature_distance(
    eval_model: MlpClassifier, reconstructions, train_data: LabeledDataset, target_class: int
) -> float:
    """评估模型倒数第二层空间中，到最近目标类训练样本距离的平均值"""
    members = _class_members(train_data, target_class)
    recon = np.asarray(reconstructions, dtype=np.float64)
    return float(np.mean(nearest_distances(
        eval_model.penultimate_embedding(recon), eval_model.penultimate_embedding(members)
    )))


def input_distance(reconstructions, train_data: LabeledDataset, target_class: int) -> float:
    """原始输入空间中到最近目标类训练样本距离的平均值"""
    members = _class_members(train_data, target_class)
    return float(np.mean(nearest_distances(np.asarray(reconstructions, dtype=np.float64), members)))


# ----------------------------------------------------------------------
# 知识提取
# ----------------------------------------------------------------------
class SurrogateConfig(BaseModel):
    """替代模型：与目标同族的 MLP，Adam 学习率 1e-3 训练 50 轮"""

    hidden_dims: List[int] = Field(default_factory=lambda: [20, 20])
    epochs: int = Field(50, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    batch_size: int = Field(8, ge=1)
    seed: int = Field(0, ge=0)


def knowledge_extraction(
    reconstructions: Dict[int, np.ndarray],
    original_train: LabeledDataset,
    original_test: LabeledDataset,
    config: SurrogateConfig,
) -> Tuple[float, float]:
    """用重建结果（标签为目标类）训练替代模型，返回其在原始训练/测试集上的准确率"""
    num_classes = original_train.class_count
    missing = [c for c in range(num_classes) if len(reconstructions.get(c, [])) == 0]
    if missing:
        raise InvalidArgumentError(f"以下类别没有重建结果: {missing}")

    features = np.vstack([np.asarray(reconstructions[c]) for c in range(num_classes)])
    labels = np.concatenate([np.full(len(reconstructions[c]), c) for c in range(num_classes)])
    synthetic = LabeledDataset(features, labels, num_classes, {"source": "reconstructions"})

    surrogate = MlpClassifier(
        MlpConfig(input_dim=synthetic.input_dim, hidden_dims=config.hidden_dims, num_classes=num_classes),
        seed=config.seed,
    )
    train_config = TrainConfig(
        optimizer=OptimizerConfig(kind="adam", lr=config.lr),
        epochs=config.epochs,
        batch_size=config.batch_size,
        seed=config.seed,
        smoothing=SmoothingSchedule(),
    )
    surrogate, _ = train(surrogate, synthetic, train_config)

    xi_train, xi_test = accuracy(surrogate, original_train), accuracy(surrogate, original_test)
    logger.info(f"🧠 知识提取: xi_train={xi_train:.3f}, xi_test={xi_test:.3f}")
    return xi_train, xi_test


# ----------------------------------------------------------------------
# 梯度方向稳定性
# ----------------------------------------------------------------------
def cosine_similarity(a, b) -> float:
    """两向量夹角余弦；任一为零向量时返回 NaN"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0.0:
        return float("nan")
    return float(np.clip(np.dot(a, b) / denom, -1.0, 1.0))


@dataclass
class GradientSimilarity:
    """相邻步梯度余弦相似度的汇总"""
    # 列: step, mean, std, count；step t 比较第 t 与第 t-1 次更新的梯度
    series: pd.DataFrame
    per_trajectory_mean: List[float]
    excluded_trajectories: int = 0

    @property
    def mean_similarity(self) -> float:
        values = [v for v in self.per_trajectory_mean if np.isfinite(v)]
        return float(np.mean(values)) if values else float("nan")


def gradient_cosine_series(trajectories: Sequence) -> GradientSimilarity:
    rows: List[np.ndarray] = []
    excluded = 0
    for trajectory in trajectories:
        gradients = np.asarray(trajectory.update_gradients)
        if gradients.shape[0] < 2:
            excluded += 1
            continue
        rows.append(np.array([
            cosine_similarity(gradients[t], gradients[t - 1]) for t in range(1, gradients.shape[0])
        ]))
    if not rows:
        raise InvalidArgumentError("没有至少包含两次更新的轨迹，无法计算梯度相似度")
    if excluded:
        logger.warning(f"⚠️ {excluded} 条轨迹更新次数不足 2，未参与梯度相似度统计")

    width = max(len(r) for r in rows)
    matrix = np.full((len(rows), width), np.nan)
    for i, r in enumerate(rows):
        matrix[i, : len(r)] = r
    counts = np.sum(np.isfinite(matrix), axis=0)

    means = np.full(width, np.nan)
    stds = np.full(width, np.nan)
    for t in range(width):
        column = matrix[:, t][np.isfinite(matrix[:, t])]
        if column.size:
            means[t] = column.mean()
            stds[t] = column.std()

    per_trajectory = []
    for r in rows:
        finite = r[np.isfinite(r)]
        per_trajectory.append(float(finite.mean()) if finite.size else float("nan"))

    series = pd.DataFrame({"step": np.arange(1, width + 1), "mean": means, "std": stds, "count": counts})
    return GradientSimilarity(series=series, per_trajectory_mean=per_trajectory, excluded_trajectories=excluded)


class StabilityConfig(BaseModel):
    """梯度方向稳定性诊断：标准正态潜向量起点、均匀抽取的目标类、不设置信度停止"""

    trajectories: int = Field(120, ge=1)
    attack: AttackConfig = Field(default_factory=lambda: AttackConfig(stop_confidence=None, max_steps=200))
    seed: int = Field(0, ge=0)


def random_target_trajectories(
    model: MlpClassifier, prior: Prior, config: StabilityConfig, jobs: int = 1
) -> List[Trajectory]:
    """起点与目标类一次性由 seed 抽出；candidate_index 即抽样序号，结果按序号排列"""
    rng = np.random.default_rng(config.seed)
    latents = rng.standard_normal((config.trajectories, prior.latent_dim))
    targets = rng.integers(0, model.config.num_classes, size=config.trajectories)

    trajectories: List[Trajectory] = []
    for c in np.unique(targets):
        members = np.flatnonzero(targets == c)
        result = optimize_latents(
            model, prior, latents[members], int(c), config.attack, candidate_indices=members, jobs=jobs
        )
        trajectories.extend(result.trajectories)
    return sorted(trajectories, key=lambda t: t.candidate_index)


def gradient_stability(
    model: MlpClassifier, prior: Prior, config: StabilityConfig, jobs: int = 1
) -> GradientSimilarity:
    similarity = gradient_cosine_series(random_target_trajectories(model, prior, config, jobs))
    logger.info(
        f"🧭 梯度稳定性: {len(similarity.per_trajectory_mean)} 条轨迹, 平均 S_C={similarity.mean_similarity:.3f}"
    )
    return similarity


# ----------------------------------------------------------------------
# 嵌入空间统计
# ----------------------------------------------------------------------
def _summarize(values: np.ndarray) -> Dict[str, Optional[float]]:
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        return {"mean": None, "std": None, "q25": None, "median": None, "q75": None}
    q25, median, q75 = np.percentile(finite, [25, 50, 75])
    return {
        "mean": float(finite.mean()),
        "std": float(finite.std()),
        "q25": float(q25),
        "median": float(median),
        "q75": float(q75),
    }


@dataclass
class EmbeddingStats:
    """倒数第二层嵌入的逐样本距离（已按全局最大两两距离缩放）"""
    per_sample: pd.DataFrame
    max_distance: float
    excluded_classes: List[int] = field(default_factory=list)

    STATISTICS = ("intra_mean", "inter_mean", "nn_intra", "nn_inter")

    def summaries(self) -> Dict[str, Dict[str, Optional[float]]]:
        return {name: _summarize(self.per_sample[name].to_numpy()) for name in self.STATISTICS}

    @property
    def intra_inter_ratio(self) -> float:
        intra = self.per_sample["intra_mean"].to_numpy()
        inter = self.per_sample["inter_mean"].to_numpy()
        intra, inter = intra[np.isfinite(intra)], inter[np.isfinite(inter)]
        if intra.size == 0 or inter.size == 0 or inter.mean() == 0.0:
            return float("nan")
        return float(intra.mean() / inter.mean())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "max_distance": self.max_distance,
            "excluded_classes": self.excluded_classes,
            "intra_inter_ratio": self.intra_inter_ratio,
            "summaries": self.summaries(),
        }


def embedding_distance_stats(embeddings, labels) -> EmbeddingStats:
    """对给定嵌入计算类内/类间平均距离与最近邻距离"""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = embeddings.shape[0]
    distances = pairwise_distances(embeddings, embeddings)
    off_diagonal = ~np.eye(n, dtype=bool)
    max_distance = float(distances[off_diagonal].max()) if n > 1 else 0.0
    scaled = distances / max_distance if max_distance > 0.0 else distances

    classes, counts = np.unique(labels, return_counts=True)
    excluded = [int(c) for c, k in zip(classes, counts) if k < 2]
    if excluded:
        logger.warning(f"⚠️ 类别 {excluded} 样本数不足 2，不参与类内统计")

    same = labels[:, None] == labels[None, :]
    intra_mask = same & off_diagonal
    inter_mask = ~same

    def masked(reduce, mask):
        out = np.full(n, np.nan)
        has = mask.any(axis=1)
        for i in np.flatnonzero(has):
            out[i] = reduce(scaled[i, mask[i]])
        return out

    per_sample = pd.DataFrame({
        "label": labels,
        "intra_mean": masked(np.mean, intra_mask),
        "inter_mean": masked(np.mean, inter_mask),
        "nn_intra": masked(np.min, intra_mask),
        "nn_inter": masked(np.min, inter_mask),
    })
    return EmbeddingStats(per_sample=per_sample, max_distance=max_distance, excluded_classes=excluded)


def embedding_stats(model: MlpClassifier, dataset: LabeledDataset) -> EmbeddingStats:
    return embedding_distance_stats(model.penultimate_embedding(dataset.features), dataset.labels)


def logit_stats(model: MlpClassifier, dataset: LabeledDataset) -> EmbeddingStats:
    """同样的统计，换到 logit 空间"""
    return embedding_distance_stats(model.logits(dataset.features), dataset.labels)


# ----------------------------------------------------------------------
# 汇总报告
# ----------------------------------------------------------------------
@dataclass
class MetricsReport:
    """一次实验的全部评估指标"""
    acc_at_1: float
    acc_at_k: float
    k: int
    delta_eval: float
    delta_input: float
    xi_train: float
    xi_test: float
    ece: float
    embedding: Dict[str, Any]
    gradient_similarity: Dict[str, Any]
    logit_intra_inter_ratio: float = float("nan")
    attack_steps: List[int] = field(default_factory=list)
    stop_reasons: List[str] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    def __post_init__(self):
        for name in ("acc_at_1", "acc_at_k", "xi_train", "xi_test"):
            value = getattr(self, name)
            if np.isfinite(value) and not 0.0 <= value <= 1.0:
                raise InvalidArgumentError(f"{name} 超出 [0, 1]: {value}")
        for name in ("delta_eval", "delta_input", "ece"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} 不能为负: {getattr(self, name)}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)
