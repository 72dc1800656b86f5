"""
优化器

模型训练与潜向量攻击共用的 SGD（带动量）和 Adam，
参数以 ``Dict[str, np.ndarray]`` 形式原地更新
"""

from typing import Dict, Literal, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from utils.error_handler import InvalidArgumentError


class OptimizerConfig(BaseModel):
    """优化器配置"""

    model_config = ConfigDict(frozen=True)

    kind: Literal["sgd", "adam"] = "sgd"
    lr: float = Field(0.1, ge=0.0)
    momentum: float = Field(0.0, ge=0.0, lt=1.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0.0)


class SgdOptimizer:
    """带动量的 SGD：v = mu * v + g；p -= lr * v"""

    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self._buffers: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        for name, grad in grads.items():
            if self.momentum > 0.0:
                buf = self._buffers.get(name)
                if buf is None:
                    buf = np.array(grad, dtype=np.float64, copy=True)
                else:
                    buf = self.momentum * buf + grad
                self._buffers[name] = buf
                params[name] -= self.lr * buf
            else:
                params[name] -= self.lr * grad


class AdamOptimizer:
    """Adam（带偏差校正）"""

    def __init__(self, lr: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self._t += 1
        bias1 = 1.0 - self.beta1 ** self._t
        bias2 = 1.0 - self.beta2 ** self._t
        for name, grad in grads.items():
            m = self._m.get(name, np.zeros_like(grad))
            v = self._v.get(name, np.zeros_like(grad))
            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            self._m[name] = m
            self._v[name] = v
            params[name] -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def build_optimizer(config: OptimizerConfig):
    """根据配置创建优化器"""
    if config.kind == "sgd":
        return SgdOptimizer(config.lr, config.momentum)
    if config.kind == "adam":
        return AdamOptimizer(config.lr, config.betas, config.eps)
    raise InvalidArgumentError(f"未知的优化器类型: {config.kind}")
