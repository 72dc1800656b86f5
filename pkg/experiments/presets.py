"""
内置实验预设

- toy_comparison：二维三类团簇上正/零/负标签平滑三个模型的对比实验
- smoke：同样流程的秒级缩小版，用于测试
"""

from typing import Callable, Dict, List

from mia_lab.classifier import TrainConfig
from mia_lab.data import BlobSpec, JitterTransform
from mia_lab.inversion import AttackConfig
from mia_lab.losses import LossKind
from mia_lab.metrics import StabilityConfig, SurrogateConfig
from mia_lab.optim import OptimizerConfig
from mia_lab.robustness import RobustnessConfig
from utils.error_handler import ConfigError

from experiments.config import (
    AttackSection,
    DataSection,
    ExperimentConfig,
    GridSection,
    MetricsSection,
    ModelSection,
    ModelVariant,
    PriorSection,
)


class ExperimentPresets:
    """预设配置管理器"""

    @staticmethod
    def toy_comparison() -> ExperimentConfig:
        """三模型对比：SGD 学习率 0.001、动量 0.9、全批量 5000 次迭代

        负平滑取 -0.2；第二阶段用 CE 损失与 SGD（学习率 0.1），置信度 0.95 停止；
        鲁棒性 eps = 1.0，另报告 0.25 到 1.5 的成功率曲线。
        """
        training = TrainConfig(
            optimizer=OptimizerConfig(kind="sgd", lr=0.001, momentum=0.9),
            epochs=5000,
        )
        return ExperimentConfig(
            name="toy_comparison",
            data=DataSection(blobs=BlobSpec.toy_default()),
            model=ModelSection(
                hidden_dims=[20, 20],
                training=training,
                variants=[
                    ModelVariant(name="pos", alpha=0.05),
                    ModelVariant(name="hard", alpha=0.0),
                    ModelVariant(name="neg", alpha=-0.2),
                ],
            ),
            prior=PriorSection(kind="pca", latent_dim=2),
            attack=AttackSection(
                simple=AttackConfig(),
                simple_uncapped=AttackConfig(stop_confidence=None, max_steps=5000),
                start_count=5,
                ppa=AttackConfig(
                    loss=LossKind.CE_IDENTITY,
                    optimizer=OptimizerConfig(kind="sgd", lr=0.1),
                    max_steps=200,
                    stop_confidence=0.95,
                    pool_size=400,
                    candidates_per_class=40,
                    final_per_class=10,
                    transform=JitterTransform(sigma=0.1),
                    transform_count=4,
                ),
            ),
            metrics=MetricsSection(
                surrogate=SurrogateConfig(),
                stability=StabilityConfig(
                    trajectories=120,
                    attack=AttackConfig(stop_confidence=None, max_steps=200),
                ),
            ),
            robustness=RobustnessConfig(
                attack="pgd", epsilon=1.0, step_size=0.25, steps=10, sweep=[0.25, 0.5, 1.0, 1.5]
            ),
            grid=GridSection(bounds=(-4.0, 4.0, -4.0, 4.0), resolution=100),
        )

    @staticmethod
    def smoke() -> ExperimentConfig:
        """缩小版：少量样本、短训练、小候选池"""
        training = TrainConfig(
            optimizer=OptimizerConfig(kind="sgd", lr=0.01, momentum=0.9),
            epochs=150,
        )
        blobs = BlobSpec.toy_default().model_copy(update={"samples_per_class": 30})
        return ExperimentConfig(
            name="smoke",
            data=DataSection(blobs=blobs),
            model=ModelSection(hidden_dims=[8, 8], training=training),
            prior=PriorSection(kind="pca", latent_dim=2),
            attack=AttackSection(
                simple=AttackConfig(max_steps=100),
                simple_uncapped=AttackConfig(stop_confidence=None, max_steps=30),
                start_count=2,
                ppa=AttackConfig(
                    loss=LossKind.POINCARE,
                    optimizer=OptimizerConfig(kind="adam", lr=0.05, betas=(0.1, 0.1)),
                    max_steps=15,
                    stop_confidence=None,
                    pool_size=20,
                    candidates_per_class=4,
                    final_per_class=2,
                    transform=JitterTransform(sigma=0.1),
                    transform_count=2,
                ),
            ),
            metrics=MetricsSection(
                surrogate=SurrogateConfig(epochs=5),
                stability=StabilityConfig(trajectories=6, attack=AttackConfig(stop_confidence=None, max_steps=5)),
            ),
            robustness=RobustnessConfig(attack="pgd", epsilon=0.3, step_size=0.1, steps=3, sweep=[0.1, 0.6]),
            grid=GridSection(resolution=6),
        )

    @classmethod
    def registry(cls) -> Dict[str, Callable[[], ExperimentConfig]]:
        return {"toy_comparison": cls.toy_comparison, "smoke": cls.smoke}

    @classmethod
    def names(cls) -> List[str]:
        return sorted(cls.registry())

    @classmethod
    def get(cls, name: str) -> ExperimentConfig:
        factory = cls.registry().get(name)
        if factory is None:
            raise ConfigError(f"未知的预设: {name}（可选: {', '.join(cls.names())}）")
        return factory()
