"""
实验配置

一份配置描述一次完整实验：数据、目标模型变体、评估模型、先验、攻击、指标与鲁棒性评估。
配置文件为 JSON（也接受 YAML），``preset:<name>`` 指向内置预设。
"""

import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import yaml
from loguru import logger
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from mia_lab.classifier import TrainConfig
from mia_lab.data import BlobSpec
from mia_lab.inversion import AttackConfig
from mia_lab.metrics import StabilityConfig, SurrogateConfig
from mia_lab.robustness import RobustnessConfig
from mia_lab.smoothing import SmoothingSchedule
from utils.artifacts import config_hash, write_json
from utils.error_handler import ConfigError


PRESET_PREFIX = "preset:"


class DataSection(BaseModel):
    """数据来源与划分；辅助集先从全集中划出，与训练集互不相交"""

    blobs: BlobSpec = Field(default_factory=BlobSpec.toy_default)
    path: Optional[str] = None
    aux_fraction: float = Field(0.2, ge=0.0, lt=1.0)
    test_fraction: float = Field(0.1, ge=0.0, lt=1.0)


class ModelVariant(BaseModel):
    """一个目标模型变体（按平滑因子区分）"""

    name: str
    alpha: float = Field(le=1.0)
    warmup_epochs: Optional[int] = Field(None, ge=0)
    ramp_epochs: Optional[int] = Field(None, ge=0)

    def schedule(self, epochs: int) -> SmoothingSchedule:
        if self.warmup_epochs is None and self.ramp_epochs is None:
            return SmoothingSchedule.for_training(self.alpha, epochs)
        return SmoothingSchedule(
            target_alpha=self.alpha,
            warmup_epochs=self.warmup_epochs or 0,
            ramp_epochs=self.ramp_epochs or 0,
        )


def _default_variants() -> List[ModelVariant]:
    return [
        ModelVariant(name="pos", alpha=0.05),
        ModelVariant(name="hard", alpha=0.0),
        ModelVariant(name="neg", alpha=-0.05),
    ]


class ModelSection(BaseModel):
    hidden_dims: List[int] = Field(default_factory=lambda: [20, 20])
    batch_norm: bool = True
    training: TrainConfig = Field(default_factory=TrainConfig)
    variants: List[ModelVariant] = Field(default_factory=_default_variants)

    @field_validator("variants")
    @classmethod
    def _unique_names(cls, variants: List[ModelVariant]) -> List[ModelVariant]:
        names = [v.name for v in variants]
        if not names:
            raise ValueError("至少需要一个模型变体")
        if len(set(names)) != len(names):
            raise ValueError(f"模型变体名称重复: {names}")
        if "eval_model" in names:
            raise ValueError("变体名称 eval_model 已被评估模型占用")
        return variants


class EvalModelSection(BaseModel):
    """评估模型：默认比目标网络多一层、宽度加倍"""

    hidden_dims: Optional[List[int]] = None
    training: Optional[TrainConfig] = None

    def resolve_hidden(self, target_hidden: List[int]) -> List[int]:
        if self.hidden_dims is not None:
            return list(self.hidden_dims)
        width = 2 * (target_hidden[-1] if target_hidden else 10)
        return [2 * h for h in target_hidden] + [width]


class PriorSection(BaseModel):
    kind: Literal["identity", "pca"] = "pca"
    # None 表示与输入维度相同
    latent_dim: Optional[int] = Field(None, ge=1)


def _uncapped_attack() -> AttackConfig:
    return AttackConfig(stop_confidence=None, max_steps=5000)


class AttackSection(BaseModel):
    simple: AttackConfig = Field(default_factory=AttackConfig)
    simple_uncapped: AttackConfig = Field(default_factory=_uncapped_attack)
    ppa: AttackConfig = Field(default_factory=AttackConfig)
    # 简单攻击从源类别的前 start_count 个辅助样本分别出发，优化目标类别的置信度；汇总取中位数
    source_class: int = Field(1, ge=0)
    target_class: int = Field(2, ge=0)
    start_count: int = Field(1, ge=1)
    # None 表示全部类别
    target_classes: Optional[List[int]] = None


class MetricsSection(BaseModel):
    # None 表示 min(5, C - 1)
    top_k: Optional[int] = Field(None, ge=1)
    ece_bins: int = Field(10, ge=1)
    surrogate: SurrogateConfig = Field(default_factory=SurrogateConfig)
    attack_mode: Literal["simple", "ppa"] = "ppa"
    # 为空时梯度相似度取自被评估的攻击轨迹
    stability: Optional[StabilityConfig] = None


class GridSection(BaseModel):
    bounds: Tuple[float, float, float, float] = (-4.0, 4.0, -4.0, 4.0)
    resolution: int = Field(100, ge=2)

    @model_validator(mode="after")
    def _ordered(self) -> "GridSection":
        x_min, x_max, y_min, y_max = self.bounds
        if not (x_min < x_max and y_min < y_max):
            raise ValueError("网格范围必须满足 x_min < x_max 且 y_min < y_max")
        return self


class ExperimentConfig(BaseModel):
    """一次实验的完整配置"""

    name: str = "experiment"
    master_seed: int = Field(0, ge=0, lt=2**64)
    output_dir: str = "outputs"
    data: DataSection = Field(default_factory=DataSection)
    model: ModelSection = Field(default_factory=ModelSection)
    eval_model: EvalModelSection = Field(default_factory=EvalModelSection)
    prior: PriorSection = Field(default_factory=PriorSection)
    attack: AttackSection = Field(default_factory=AttackSection)
    metrics: MetricsSection = Field(default_factory=MetricsSection)
    robustness: RobustnessConfig = Field(default_factory=RobustnessConfig)
    grid: GridSection = Field(default_factory=GridSection)

    def with_overrides(self, seed: Optional[int] = None, out: Optional[str] = None) -> "ExperimentConfig":
        update = {}
        if seed is not None:
            update["master_seed"] = seed
        if out is not None:
            update["output_dir"] = str(out)
        if not update:
            return self
        return ExperimentConfig.model_validate({**self.model_dump(mode="json"), **update})

    @property
    def fingerprint(self) -> str:
        """配置哈希；输出目录不参与计算"""
        return config_hash(self.model_dump(mode="json", exclude={"output_dir"}))

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)


def _read_document(path: Path) -> dict:
    if not path.is_file():
        raise ConfigError(f"找不到配置文件: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            if path.suffix.lower() in (".yaml", ".yml"):
                return yaml.safe_load(f) or {}
            return json.load(f)
    except (OSError, json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"配置文件解析失败 {path}: {e}") from e


def load_config(source: Optional[str]) -> ExperimentConfig:
    """加载配置：None 表示默认配置，``preset:<name>`` 表示内置预设，其余视为文件路径"""
    if source is None:
        return ExperimentConfig()
    if source.startswith(PRESET_PREFIX):
        from experiments.presets import ExperimentPresets

        return ExperimentPresets.get(source[len(PRESET_PREFIX):])

    document = _read_document(Path(source))
    try:
        config = ExperimentConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"配置校验失败 {source}: {e}") from e
    logger.info(f"📄 已加载配置: {source}")
    return config


def save_config(config: ExperimentConfig, path: Path) -> Path:
    return write_json(path, config.model_dump(mode="json"))
