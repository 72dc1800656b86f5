"""
合成数据集

高斯团簇生成、分层划分、CSV 持久化，以及鲁棒置信度打分所用的随机抖动变换。
生成、划分与抖动均是其种子的确定性函数。
"""

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from utils.artifacts import ensure_dir
from utils.error_handler import (
    ArtifactIOError,
    DataValidationError,
    InvalidArgumentError,
    ParseError,
)


HEADER_PATTERN = re.compile(r"^#\s*d=(\d+)\s+C=(\d+)\s*$")


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """特征矩阵 + 整数标签"""
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise DataValidationError(f"特征必须是二维矩阵，得到 {features.shape}")
        if labels.shape != (features.shape[0],):
            raise DataValidationError("标签数量与样本数量不一致")
        if self.class_count < 2:
            raise DataValidationError(f"类别数必须 >= 2，当前为 {self.class_count}")
        if not np.all(np.isfinite(features)):
            raise DataValidationError("特征包含非有限值")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise DataValidationError(f"标签超出范围 [0, {self.class_count})")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def of_class(self, label: int) -> np.ndarray:
        return self.features[self.labels == label]

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            features=self.features[indices],
            labels=self.labels[indices],
            class_count=self.class_count,
            provenance=dict(self.provenance),
        )

    def with_provenance(self, **extra: Any) -> "LabeledDataset":
        return LabeledDataset(self.features, self.labels, self.class_count, {**self.provenance, **extra})


class BlobSpec(BaseModel):
    """各向同性高斯团簇的生成规格"""

    model_config = ConfigDict(frozen=True)

    centers: List[List[float]]
    std: float = Field(gt=0.0)
    samples_per_class: int = Field(ge=1)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_centers(self) -> "BlobSpec":
        if len(self.centers) < 2:
            raise ValueError("至少需要两个类别中心")
        dims = {len(c) for c in self.centers}
        if len(dims) != 1 or 0 in dims:
            raise ValueError("所有类别中心的维度必须一致且 >= 1")
        return self

    @property
    def num_classes(self) -> int:
        return len(self.centers)

    @property
    def input_dim(self) -> int:
        return len(self.centers[0])

    @classmethod
    def toy_default(cls, seed: int = 0) -> "BlobSpec":
        """二维三类玩具数据：中心位于半径 2 的正三角形顶点，sigma = 0.4，每类 100 个样本"""
        angles = np.deg2rad([90.0, 210.0, 330.0])
        centers = [[float(2.0 * np.cos(a)), float(2.0 * np.sin(a))] for a in angles]
        return cls(centers=centers, std=0.4, samples_per_class=100, seed=seed)


class JitterTransform(BaseModel):
    """向量数据上的加性高斯抖动"""

    model_config = ConfigDict(frozen=True)

    sigma: float = Field(0.1, ge=0.0)
    seed: int = Field(0, ge=0)

    def reseeded(self, seed: int) -> "JitterTransform":
        return JitterTransform(sigma=self.sigma, seed=seed)


def gen_blobs(spec: BlobSpec) -> LabeledDataset:
    """按类别顺序依次采样各团簇"""
    rng = np.random.default_rng(spec.seed)
    centers = np.asarray(spec.centers, dtype=np.float64)
    n = spec.samples_per_class

    blocks = [c + spec.std * rng.standard_normal((n, centers.shape[1])) for c in centers]
    features = np.vstack(blocks)
    labels = np.repeat(np.arange(spec.num_classes), n)
    logger.debug(f"生成团簇数据: C={spec.num_classes}, d={spec.input_dim}, N={features.shape[0]}")
    return LabeledDataset(
        features=features,
        labels=labels,
        class_count=spec.num_classes,
        provenance={"generator": "blobs", "spec": spec.model_dump(mode="json")},
    )


def _stratified_quota(counts: np.ndarray, test_fraction: float) -> np.ndarray:
    """最大余数法分配每类测试样本数，总数为 round(f * N)"""
    total = int(np.floor(test_fraction * counts.sum() + 0.5))
    exact = test_fraction * counts
    quota = np.floor(exact).astype(np.int64)
    remainder = exact - quota
    # 余数相同时按类别下标升序
    order = np.lexsort((np.arange(len(counts)), -remainder))
    for c in order[: max(0, total - int(quota.sum()))]:
        quota[c] += 1
    return np.minimum(quota, counts)


def split(
    dataset: LabeledDataset, test_fraction: float, seed: int
) -> Tuple[LabeledDataset, LabeledDataset]:
    """按类别分层划分训练/测试集，两部分都保持原始样本顺序"""
    if not 0.0 <= test_fraction < 1.0:
        raise InvalidArgumentError(f"测试集比例必须在 [0, 1) 内，当前为 {test_fraction}")

    rng = np.random.default_rng(seed)
    quota = _stratified_quota(dataset.class_counts(), test_fraction)
    test_mask = np.zeros(len(dataset), dtype=bool)
    for c in range(dataset.class_count):
        members = np.flatnonzero(dataset.labels == c)
        chosen = rng.permutation(members)[: quota[c]]
        test_mask[chosen] = True

    train = dataset.subset(np.flatnonzero(~test_mask)).with_provenance(
        split="train", test_fraction=test_fraction, split_seed=seed
    )
    test = dataset.subset(np.flatnonzero(test_mask)).with_provenance(
        split="test", test_fraction=test_fraction, split_seed=seed
    )
    return train, test


def apply_jitter(x, transform: JitterTransform, draw_index: int) -> np.ndarray:
    """x + N(0, sigma^2 I)，噪声由 (seed, draw_index) 唯一确定"""
    x = np.asarray(x, dtype=np.float64)
    if transform.sigma == 0.0:
        return x.copy()
    if draw_index < 0:
        raise InvalidArgumentError(f"抽样序号必须 >= 0，当前为 {draw_index}")
    rng = np.random.default_rng([transform.seed, int(draw_index)])
    return x + transform.sigma * rng.standard_normal(x.shape)


def jitter_copies(x, transform: JitterTransform, first_draw: int, count: int) -> np.ndarray:
    """同一输入的 count 个抖动副本，抽样序号从 first_draw 起连续编号"""
    return np.stack([apply_jitter(x, transform, first_draw + t) for t in range(count)])


# ----------------------------------------------------------------------
# CSV 持久化
# ----------------------------------------------------------------------
def save_csv(dataset: LabeledDataset, path: Union[str, Path]) -> Path:
    """首行 ``# d=<int> C=<int>``，之后每行 d 个特征和一个整数标签"""
    path = Path(path)
    ensure_dir(path.parent)
    frame = pd.DataFrame(dataset.features)
    frame["label"] = dataset.labels
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(f"# d={dataset.input_dim} C={dataset.class_count}\n")
            frame.to_csv(f, header=False, index=False, float_format="%.17g", lineterminator="\n")
    except OSError as e:
        raise ArtifactIOError(f"写入失败 {path}: {e}") from e
    logger.debug(f"💾 保存数据集 {path} (N={len(dataset)})")
    return path


def _read_header(path: Path) -> Tuple[int, int]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            first = f.readline()
    except OSError as e:
        raise ArtifactIOError(f"读取失败 {path}: {e}") from e
    match = HEADER_PATTERN.match(first.strip())
    if match is None:
        raise ParseError(f"{path}: 第 1 行不是合法的表头: {first.strip()!r}", line=1)
    return int(match.group(1)), int(match.group(2))


def _parse_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        return np.nan


def load_csv(path: Union[str, Path], provenance: Optional[Dict[str, Any]] = None) -> LabeledDataset:
    """读取 ``save_csv`` 写出的文件；错误信息中的行号从表头（第 1 行）开始计"""
    path = Path(path)
    if not path.is_file():
        raise ArtifactIOError(f"找不到数据文件: {path}")
    d, num_classes = _read_header(path)
    if d < 1 or num_classes < 2:
        raise ParseError(f"{path}: 表头取值无效 d={d} C={num_classes}", line=1)

    try:
        raw = pd.read_csv(
            path,
            header=None,
            skiprows=1,
            dtype=str,
            keep_default_na=False,
            skip_blank_lines=False,
        )
    except pd.errors.EmptyDataError as e:
        raise ParseError(f"{path}: 文件没有数据行", line=2) from e
    except pd.errors.ParserError as e:
        found = re.search(r"line (\d+)", str(e))
        raise ParseError(f"{path}: 字段数量不一致: {e}", line=int(found.group(1)) if found else None) from e

    if raw.shape[0] == 0:
        raise ParseError(f"{path}: 文件没有数据行", line=2)
    if raw.shape[1] != d + 1:
        raise ParseError(f"{path}: 每行应有 {d + 1} 个字段，实际为 {raw.shape[1]}", line=2)

    numeric = raw.apply(lambda col: col.str.strip().map(_parse_float))
    bad_rows = np.flatnonzero(numeric.isna().any(axis=1).to_numpy())
    if bad_rows.size:
        row = int(bad_rows[0])
        raise ParseError(f"{path}: 第 {row + 2} 行包含非数值或缺失字段", line=row + 2)

    values = numeric.to_numpy(dtype=np.float64)
    features = values[:, :d]
    labels = values[:, d]
    not_integer = np.flatnonzero((labels != np.floor(labels)) | (labels < 0))
    if not_integer.size:
        row = int(not_integer[0])
        raise ParseError(f"{path}: 第 {row + 2} 行的标签不是非负整数", line=row + 2)
    too_large = np.flatnonzero(labels >= num_classes)
    if too_large.size:
        row = int(too_large[0])
        raise DataValidationError(
            f"{path}: 第 {row + 2} 行的标签 {int(labels[row])} 超出类别数 {num_classes}", line=row + 2
        )
    if not np.all(np.isfinite(features)):
        raise DataValidationError(f"{path}: 特征包含非有限值")

    return LabeledDataset(
        features=features,
        labels=labels.astype(np.int64),
        class_count=num_classes,
        provenance=provenance or {"source": path.as_posix()},
    )
