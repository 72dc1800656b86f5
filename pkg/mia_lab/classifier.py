"""
小型全连接分类器

结构：[Linear -> BatchNorm -> ReLU] x len(hidden_dims) -> Linear
手工推导的反向传播、带种子的训练循环、检查点读写以及 ECE 校准误差。

并发约定：模型实例不支持并发修改；eval 模式下的只读推理可以多线程共享。
"""

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, Field, field_validator, model_validator

from mia_lab.losses import LossEvaluation, LossKind, evaluate_loss, parse_loss_kind
from mia_lab.optim import OptimizerConfig, build_optimizer
from mia_lab.smoothing import (
    SmoothingSchedule,
    log_softmax,
    schedule_alpha,
    smooth_label_matrix,
    softmax,
)
from utils.artifacts import read_json, write_json
from utils.error_handler import (
    ArtifactIOError,
    InvalidArgumentError,
    InvalidStateError,
    NumericFailureError,
    NumericInputError,
    TrainingDivergedError,
)


CHECKPOINT_FORMAT = "mia-lab-checkpoint"
CHECKPOINT_VERSION = 1


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


class MlpConfig(BaseModel):
    """网络结构配置"""

    input_dim: int = Field(ge=1)
    hidden_dims: List[int] = Field(default_factory=lambda: [20, 20])
    num_classes: int = Field(ge=2)
    batch_norm: bool = True
    activation: Literal["relu"] = "relu"
    bn_eps: float = Field(1e-5, gt=0.0)
    bn_momentum: float = Field(0.1, gt=0.0, le=1.0)

    @field_validator("hidden_dims")
    @classmethod
    def _positive_dims(cls, dims: List[int]) -> List[int]:
        if any(d < 1 for d in dims):
            raise ValueError("隐藏层宽度必须 >= 1")
        return dims


class TrainConfig(BaseModel):
    """训练配置；默认值对应二维玩具实验（全批量 SGD，学习率 0.001，动量 0.9，5000 次迭代）"""

    optimizer: OptimizerConfig = Field(
        default_factory=lambda: OptimizerConfig(kind="sgd", lr=0.001, momentum=0.9)
    )
    lr_milestones: List[int] = Field(default_factory=list)
    lr_decay: float = Field(0.1, gt=0.0)
    epochs: int = Field(5000, ge=1)
    # None 表示全批量
    batch_size: Optional[int] = Field(None, ge=1)
    seed: int = Field(0, ge=0)
    smoothing: SmoothingSchedule = Field(default_factory=SmoothingSchedule)

    @model_validator(mode="after")
    def _positive_lr(self) -> "TrainConfig":
        if self.optimizer.lr <= 0.0:
            raise ValueError("训练学习率必须 > 0")
        return self

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for m in self.lr_milestones if epoch >= m)
        return self.optimizer.lr * (self.lr_decay ** passed)


@dataclass
class ForwardCache:
    """一次前向计算的激活记录"""
    mode: Mode
    model_id: int
    version: int
    inputs: np.ndarray
    # 第 i 个线性层的输入；最后一项即倒数第二层嵌入
    layer_inputs: List[np.ndarray] = field(default_factory=list)
    x_hat: List[np.ndarray] = field(default_factory=list)
    inv_std: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)
    logits: Optional[np.ndarray] = None

    @property
    def embedding(self) -> np.ndarray:
        return self.layer_inputs[-1]


@dataclass
class EpochRecord:
    epoch: int
    alpha: float
    lr: float
    loss: float
    train_accuracy: float
    test_accuracy: Optional[float] = None
    test_ece: Optional[float] = None


@dataclass
class TrainingHistory:
    records: List[EpochRecord] = field(default_factory=list)
    first_epoch_order: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.__dict__ for r in self.records])


class MlpClassifier:
    """带 BatchNorm 的多层感知机"""

    def __init__(self, config: MlpConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        self.mode = Mode.TRAIN
        self.params: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self._version = 0
        self._initialize(np.random.default_rng(self.seed))

    # ------------------------------------------------------------------
    # 结构与初始化
    # ------------------------------------------------------------------
    @property
    def num_hidden(self) -> int:
        return len(self.config.hidden_dims)

    @property
    def layer_dims(self) -> List[int]:
        return [self.config.input_dim] + list(self.config.hidden_dims) + [self.config.num_classes]

    def _initialize(self, rng: np.random.Generator) -> None:
        """He 风格均匀初始化（按 fan-in 缩放），偏置为 0"""
        dims = self.layer_dims
        for i in range(len(dims) - 1):
            limit = np.sqrt(6.0 / dims[i])
            self.params[f"W{i}"] = rng.uniform(-limit, limit, size=(dims[i], dims[i + 1]))
            self.params[f"b{i}"] = np.zeros(dims[i + 1])
            if i < self.num_hidden and self.config.batch_norm:
                self.params[f"gamma{i}"] = np.ones(dims[i + 1])
                self.params[f"beta{i}"] = np.zeros(dims[i + 1])
                self.buffers[f"running_mean{i}"] = np.zeros(dims[i + 1])
                self.buffers[f"running_var{i}"] = np.ones(dims[i + 1])

    def train_mode(self) -> "MlpClassifier":
        self.mode = Mode.TRAIN
        return self

    def eval_mode(self) -> "MlpClassifier":
        self.mode = Mode.EVAL
        return self

    def mark_updated(self) -> None:
        """参数被外部修改后调用，使旧的前向缓存失效"""
        self._version += 1

    # ------------------------------------------------------------------
    # 前向 / 反向
    # ------------------------------------------------------------------
    def _check_batch(self, batch) -> np.ndarray:
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise InvalidArgumentError(
                f"输入维度不匹配: 期望 (N, {self.config.input_dim})，得到 {x.shape}"
            )
        if not np.all(np.isfinite(x)):
            raise NumericInputError("输入包含非有限值")
        return x

    def forward(
        self,
        batch,
        mode: Optional[Union[Mode, str]] = None,
        track_stats: bool = True,
    ) -> Tuple[np.ndarray, ForwardCache]:
        """前向计算，返回 (logits, cache)

        train 模式使用批统计量，并在 ``track_stats`` 为真时更新滑动统计量；
        eval 模式只使用滑动统计量。
        """
        mode = Mode(mode) if mode is not None else self.mode
        x = self._check_batch(batch)
        cache = ForwardCache(mode=mode, model_id=id(self), version=self._version, inputs=x)
        eps = self.config.bn_eps
        momentum = self.config.bn_momentum

        h = x
        for i in range(self.num_hidden):
            cache.layer_inputs.append(h)
            a = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if self.config.batch_norm:
                if mode == Mode.TRAIN:
                    n = a.shape[0]
                    mean = a.mean(axis=0)
                    var = a.var(axis=0)
                    if track_stats:
                        unbiased = var * n / (n - 1) if n > 1 else var
                        self.buffers[f"running_mean{i}"] = (
                            (1.0 - momentum) * self.buffers[f"running_mean{i}"] + momentum * mean
                        )
                        self.buffers[f"running_var{i}"] = (
                            (1.0 - momentum) * self.buffers[f"running_var{i}"] + momentum * unbiased
                        )
                else:
                    mean = self.buffers[f"running_mean{i}"]
                    var = self.buffers[f"running_var{i}"]
                inv_std = 1.0 / np.sqrt(var + eps)
                x_hat = (a - mean) * inv_std
                a = self.params[f"gamma{i}"] * x_hat + self.params[f"beta{i}"]
                cache.x_hat.append(x_hat)
                cache.inv_std.append(inv_std)
            cache.pre_activations.append(a)
            h = np.maximum(a, 0.0)
            if not np.all(np.isfinite(h)):
                raise NumericFailureError(f"隐藏层 {i} 出现非有限激活", layer=f"hidden{i}")

        cache.layer_inputs.append(h)
        last = self.num_hidden
        logits = h @ self.params[f"W{last}"] + self.params[f"b{last}"]
        if not np.all(np.isfinite(logits)):
            raise NumericFailureError("输出层出现非有限 logits", layer="output")
        cache.logits = logits
        return logits, cache

    def backward(
        self, cache: ForwardCache, logit_gradients
    ) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
        """反向传播，返回 (参数梯度, 输入梯度)"""
        if cache.model_id != id(self) or cache.version != self._version:
            raise InvalidStateError("前向缓存已过期或不属于该模型")
        g = np.asarray(logit_gradients, dtype=np.float64)
        if cache.logits is None or g.shape != cache.logits.shape:
            raise InvalidArgumentError(
                f"logit 梯度形状 {g.shape} 与前向输出 {None if cache.logits is None else cache.logits.shape} 不一致"
            )

        grads: Dict[str, np.ndarray] = {}
        last = self.num_hidden
        h = cache.layer_inputs[last]
        grads[f"W{last}"] = h.T @ g
        grads[f"b{last}"] = g.sum(axis=0)
        dh = g @ self.params[f"W{last}"].T

        for i in reversed(range(self.num_hidden)):
            da = dh * (cache.pre_activations[i] > 0.0)
            if self.config.batch_norm:
                x_hat = cache.x_hat[i]
                inv_std = cache.inv_std[i]
                grads[f"gamma{i}"] = (da * x_hat).sum(axis=0)
                grads[f"beta{i}"] = da.sum(axis=0)
                dx_hat = da * self.params[f"gamma{i}"]
                if cache.mode == Mode.TRAIN:
                    n = dx_hat.shape[0]
                    da = (inv_std / n) * (
                        n * dx_hat
                        - dx_hat.sum(axis=0)
                        - x_hat * (dx_hat * x_hat).sum(axis=0)
                    )
                else:
                    da = dx_hat * inv_std
            h = cache.layer_inputs[i]
            grads[f"W{i}"] = h.T @ da
            grads[f"b{i}"] = da.sum(axis=0)
            dh = da @ self.params[f"W{i}"].T

        return grads, dh

    def apply_gradients(self, optimizer, grads: Dict[str, np.ndarray]) -> None:
        optimizer.step(self.params, grads)
        self.mark_updated()

    # ------------------------------------------------------------------
    # 推理
    # ------------------------------------------------------------------
    def logits(self, batch) -> np.ndarray:
        return self.forward(batch, Mode.EVAL)[0]

    def predict_proba(self, batch) -> np.ndarray:
        """eval 模式 logits 的 softmax"""
        return softmax(self.logits(batch))

    def predict(self, batch) -> np.ndarray:
        return np.argmax(self.logits(batch), axis=1)

    def penultimate_embedding(self, batch) -> np.ndarray:
        """最后一个隐藏层 ReLU 之后的激活（eval 模式）"""
        if self.num_hidden < 1:
            raise InvalidArgumentError("模型没有隐藏层，无法取倒数第二层嵌入")
        return self.forward(batch, Mode.EVAL)[1].embedding

    def batch_input_gradient(
        self,
        batch,
        loss: Union[LossKind, str],
        target_classes,
        alpha: float = 0.0,
    ) -> Tuple[List[LossEvaluation], np.ndarray, np.ndarray]:
        """逐样本损失对输入的梯度（eval 模式下样本之间互不影响）

        Returns:
            (每个样本的损失结果, 概率矩阵, 输入梯度矩阵)
        """
        kind = parse_loss_kind(loss)
        logits, cache = self.forward(batch, Mode.EVAL)
        targets = np.broadcast_to(np.asarray(target_classes, dtype=np.int64), (logits.shape[0],))
        evaluations = [
            evaluate_loss(kind, logits[j], int(targets[j]), alpha) for j in range(logits.shape[0])
        ]
        dlogits = np.stack([e.logit_grad for e in evaluations])
        _, dx = self.backward(cache, dlogits)
        return evaluations, softmax(logits), dx

    def loss_and_input_gradient(
        self, x, loss: Union[LossKind, str], target_class: int, alpha: float = 0.0
    ) -> Tuple[LossEvaluation, np.ndarray, np.ndarray]:
        evaluations, probs, dx = self.batch_input_gradient(
            np.asarray(x, dtype=np.float64)[None, :], loss, [target_class], alpha
        )
        return evaluations[0], probs[0], dx[0]

    def input_gradient(
        self,
        x,
        loss: Union[LossKind, str],
        target_class: int,
        alpha: float = 0.0,
        weight: float = 1.0,
    ) -> np.ndarray:
        """损失（乘以权重 ``weight``）对单个输入的梯度"""
        _, _, grad = self.loss_and_input_gradient(x, loss, target_class, alpha)
        grad = weight * grad
        if not np.all(np.isfinite(grad)):
            raise NumericFailureError("输入梯度包含非有限值", layer="input")
        return grad

    # ------------------------------------------------------------------
    # 状态与检查点
    # ------------------------------------------------------------------
    def copy(self) -> "MlpClassifier":
        clone = MlpClassifier.__new__(MlpClassifier)
        clone.config = self.config
        clone.seed = self.seed
        clone.mode = self.mode
        clone.params = {k: v.copy() for k, v in self.params.items()}
        clone.buffers = {k: v.copy() for k, v in self.buffers.items()}
        clone._version = 0
        return clone

    def to_checkpoint(self, provenance: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        def pack(arrays: Dict[str, np.ndarray]) -> Dict[str, Any]:
            return {
                name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
                for name, arr in sorted(arrays.items())
            }

        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config.model_dump(mode="json"),
            "init_seed": self.seed,
            "params": pack(self.params),
            "buffers": pack(self.buffers),
            "provenance": provenance or {},
        }

    @classmethod
    def from_checkpoint(cls, document: Dict[str, Any]) -> "MlpClassifier":
        if document.get("format") != CHECKPOINT_FORMAT:
            raise ArtifactIOError("不是有效的模型检查点")
        if document.get("version") != CHECKPOINT_VERSION:
            raise ArtifactIOError(f"不支持的检查点版本: {document.get('version')}")

        model = cls(MlpConfig(**document["config"]), seed=document["init_seed"])

        def unpack(packed: Dict[str, Any], target: Dict[str, np.ndarray]) -> None:
            if set(packed) != set(target):
                raise ArtifactIOError("检查点参数与网络结构不一致")
            for name, entry in packed.items():
                arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
                if arr.shape != target[name].shape:
                    raise ArtifactIOError(f"参数 {name} 形状不一致")
                target[name] = arr

        unpack(document["params"], model.params)
        unpack(document["buffers"], model.buffers)
        return model.eval_mode()

    def save(self, path: Union[str, Path], provenance: Optional[Dict[str, Any]] = None) -> Path:
        """保存检查点（JSON，浮点数以 repr 精度无损写出）"""
        written = write_json(path, self.to_checkpoint(provenance))
        logger.info(f"💾 保存模型检查点: {written}")
        return written

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MlpClassifier":
        return cls.from_checkpoint(read_json(path))


# ----------------------------------------------------------------------
# 训练
# ----------------------------------------------------------------------
def train(
    model: MlpClassifier,
    dataset,
    config: TrainConfig,
    eval_data=None,
) -> Tuple[MlpClassifier, TrainingHistory]:
    """按配置训练模型，返回 (模型, 每轮历史)

    每轮先由训练种子生成样本排列（与平滑因子无关），再按批次更新。
    """
    features = np.asarray(dataset.features, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    num_classes = model.config.num_classes
    n = features.shape[0]
    if n == 0:
        raise InvalidArgumentError("训练集为空")
    if labels.max() >= num_classes or labels.min() < 0:
        raise InvalidArgumentError(f"标签超出模型类别数 {num_classes}")

    rng = np.random.default_rng(config.seed)
    optimizer = build_optimizer(config.optimizer)
    batch_size = min(config.batch_size or n, n)
    history = TrainingHistory()
    model.train_mode()

    logger.info(
        f"🚀 开始训练: N={n}, 轮次={config.epochs}, 批大小={batch_size}, "
        f"目标 alpha={config.smoothing.target_alpha}"
    )
    for epoch in range(config.epochs):
        optimizer.lr = config.lr_at(epoch)
        alpha = schedule_alpha(config.smoothing, epoch)
        order = rng.permutation(n)
        if epoch == 0:
            history.first_epoch_order = order.copy()

        total_loss = 0.0
        correct = 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb, yb = features[idx], labels[idx]
            try:
                logits, cache = model.forward(xb, Mode.TRAIN)
            except (NumericFailureError, NumericInputError) as e:
                raise TrainingDivergedError(f"第 {epoch} 轮前向计算发散: {e}", epoch=epoch) from e
            log_p = log_softmax(logits)
            targets = smooth_label_matrix(yb, alpha, num_classes)
            loss = float(-np.sum(targets * log_p) / len(idx))
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"第 {epoch} 轮损失为非有限值", epoch=epoch)

            grads, _ = model.backward(cache, (np.exp(log_p) - targets) / len(idx))
            model.apply_gradients(optimizer, grads)
            total_loss += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == yb))

        record = EpochRecord(
            epoch=epoch,
            alpha=alpha,
            lr=optimizer.lr,
            loss=total_loss / n,
            train_accuracy=correct / n,
        )
        if eval_data is not None and len(eval_data.labels) > 0:
            probs = model.predict_proba(eval_data.features)
            record.test_accuracy = float(np.mean(np.argmax(probs, axis=1) == eval_data.labels))
            record.test_ece = ece(probs, eval_data.labels)
        history.records.append(record)

        if epoch % max(1, config.epochs // 10) == 0 or epoch == config.epochs - 1:
            logger.debug(
                f"轮次 {epoch}: loss={record.loss:.5f} acc={record.train_accuracy:.3f} alpha={alpha:.4f}"
            )

    model.eval_mode()
    final = history.records[-1]
    logger.info(f"✅ 训练完成: loss={final.loss:.5f}, 训练准确率={final.train_accuracy:.3f}")
    return model, history


def accuracy(model: MlpClassifier, dataset) -> float:
    if len(dataset.labels) == 0:
        return float("nan")
    return float(np.mean(model.predict(dataset.features) == dataset.labels))


# ----------------------------------------------------------------------
# 校准
# ----------------------------------------------------------------------
def ece(probabilities, labels, bins: int = 10) -> float:
    """L2 形式的期望校准误差

    按最大置信度落入 [0, 1] 上 ``bins`` 个等宽区间 (lo, hi]（置信度 0 归入第一个区间），
    ECE = sqrt(sum_b (n_b / N) * (acc_b - conf_b)^2)，空区间贡献 0。
    """
    if bins < 1:
        raise InvalidArgumentError(f"分箱数必须 >= 1，当前为 {bins}")
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise InvalidArgumentError("概率矩阵与标签数量不一致")
    n = probs.shape[0]
    if n == 0:
        return 0.0

    confidences = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    bin_ids = np.clip(np.ceil(confidences * bins).astype(np.int64) - 1, 0, bins - 1)

    total = 0.0
    for b in range(bins):
        in_bin = bin_ids == b
        count = int(in_bin.sum())
        if count == 0:
            continue
        gap = correct[in_bin].mean() - confidences[in_bin].mean()
        total += (count / n) * gap * gap
    return float(np.sqrt(total))
