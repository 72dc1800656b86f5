"""
测试公共夹具
"""

import numpy as np
import pytest

from experiments.presets import ExperimentPresets
from mia_lab.classifier import MlpClassifier, MlpConfig, TrainConfig, train
from mia_lab.data import BlobSpec, gen_blobs, split
from mia_lab.optim import OptimizerConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def blob_spec():
    """缩小版玩具团簇：每类 40 个样本"""
    return BlobSpec.toy_default(seed=7).model_copy(update={"samples_per_class": 40})


@pytest.fixture
def blob_dataset(blob_spec):
    return gen_blobs(blob_spec)


@pytest.fixture
def blob_splits(blob_dataset):
    """(训练集, 测试集)"""
    return split(blob_dataset, 0.25, seed=11)


@pytest.fixture
def small_model():
    """未训练的小网络（eval 模式）"""
    return MlpClassifier(MlpConfig(input_dim=2, hidden_dims=[6, 5], num_classes=3), seed=3).eval_mode()


@pytest.fixture(scope="session")
def trained_model():
    """在玩具团簇上训练好的小网络（eval 模式）"""
    dataset = gen_blobs(BlobSpec.toy_default(seed=21).model_copy(update={"samples_per_class": 40}))
    model = MlpClassifier(MlpConfig(input_dim=2, hidden_dims=[8, 8], num_classes=3), seed=5)
    config = TrainConfig(
        optimizer=OptimizerConfig(kind="sgd", lr=0.05, momentum=0.9),
        epochs=200,
        seed=9,
    )
    model, _ = train(model, dataset, config)
    return model


@pytest.fixture
def smoke_config(tmp_path):
    """输出到临时目录的 smoke 预设"""
    return ExperimentPresets.smoke().with_overrides(out=str(tmp_path / "out"))
