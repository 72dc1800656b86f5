"""
实验配置、内置预设与命令运行器
"""

from . import config
from . import presets
from . import runner

__all__ = ["config", "presets", "runner"]
