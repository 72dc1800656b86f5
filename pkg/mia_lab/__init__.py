"""
标签平滑与模型反演实验室

广义标签平滑下的小型分类器训练、模型反演攻击与评估指标
"""

from . import smoothing
from . import optim
from . import losses
from . import classifier
from . import data
from . import inversion
from . import robustness
from . import metrics
from . import verification

__all__ = [
    "smoothing",
    "optim",
    "losses",
    "classifier",
    "data",
    "inversion",
    "robustness",
    "metrics",
    "verification"
]
