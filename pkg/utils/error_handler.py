#!/usr/bin/env python3
"""
实验室统一错误处理中心

定义全部领域异常（带稳定的 error_type、退出码和处理建议），
并提供命令级的错误包装器：计时、记录日志、把异常映射为进程退出码
"""

import time
import traceback
from functools import wraps
from typing import Any, Callable, Dict, Optional

from loguru import logger
from pydantic import ValidationError

from utils.performance import PerformanceMonitor, get_performance_monitor


# 进程退出码
EXIT_OK = 0
EXIT_UNKNOWN = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_VERIFICATION = 5


class LabError(Exception):
    """所有领域异常的基类"""

    error_type = "lab_error"
    exit_code = EXIT_UNKNOWN
    suggestion = "请查看日志中的详细信息"

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error_type": self.error_type,
            "message": self.message,
            "suggestion": self.suggestion,
            "details": {k: v for k, v in self.details.items() if v is not None},
        }


class InvalidArgumentError(LabError, ValueError):
    """参数不满足前置条件"""

    error_type = "invalid_argument"
    exit_code = EXIT_CONFIG
    suggestion = "请检查传入的参数取值范围"


class ConfigError(LabError):
    """实验配置无效或缺失"""

    error_type = "config_error"
    exit_code = EXIT_CONFIG
    suggestion = "请对照配置说明检查实验配置文件"


class NumericInputError(LabError, ValueError):
    """数值输入中含有 NaN/Inf"""

    error_type = "numeric_input"
    exit_code = EXIT_NUMERIC
    suggestion = "请确认输入向量全部为有限值"


class NumericFailureError(LabError, ArithmeticError):
    """计算过程中出现非有限值"""

    error_type = "numeric_failure"
    exit_code = EXIT_NUMERIC
    suggestion = "请降低学习率或检查模型参数是否已发散"

    def __init__(self, message: str, layer: Optional[str] = None, step: Optional[int] = None):
        super().__init__(message, layer=layer, step=step)
        self.layer = layer
        self.step = step


class DegenerateInputError(LabError, ValueError):
    """退化输入（例如全零 logits）"""

    error_type = "degenerate_input"
    exit_code = EXIT_NUMERIC
    suggestion = "输入退化，无法定义损失"


class TrainingDivergedError(LabError, ArithmeticError):
    """训练损失变为非有限值"""

    error_type = "training_diverged"
    exit_code = EXIT_NUMERIC
    suggestion = "请降低学习率或延长负平滑的预热阶段"

    def __init__(self, message: str, epoch: int):
        super().__init__(message, epoch=epoch)
        self.epoch = epoch


class InvalidStateError(LabError, RuntimeError):
    """前向缓存与模型状态不匹配"""

    error_type = "invalid_state"
    exit_code = EXIT_UNKNOWN
    suggestion = "请在参数更新后重新执行前向计算"


class ParseError(LabError, ValueError):
    """文件格式解析失败"""

    error_type = "parse_error"
    exit_code = EXIT_IO
    suggestion = "请检查 CSV 文件格式（首行 '# d=<int> C=<int>'）"

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message, line=line)
        self.line = line


class DataValidationError(LabError, ValueError):
    """数据语义校验失败"""

    error_type = "data_validation"
    exit_code = EXIT_IO
    suggestion = "请检查标签范围与特征取值"


class ArtifactIOError(LabError, OSError):
    """产物文件读写失败或缺失"""

    error_type = "artifact_io"
    exit_code = EXIT_IO
    suggestion = "请确认前置命令已执行且输出目录可写"


class StageError(LabError):
    """攻击流水线某一阶段失败"""

    error_type = "stage_error"
    suggestion = "请查看失败阶段的原始错误"

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"阶段 {stage} 失败: {cause}", stage=stage)
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", EXIT_UNKNOWN)


class VerificationError(LabError):
    """梯度校验超出容差"""

    error_type = "verification_failure"
    exit_code = EXIT_VERIFICATION
    suggestion = "解析梯度与有限差分不一致，请检查对应推导"

    def __init__(self, message: str, check: str):
        super().__init__(message, check=check)
        self.check = check


class ErrorHandler:
    """命令级错误处理器"""

    def __init__(self, performance_monitor: Optional[PerformanceMonitor] = None):
        self.performance_monitor = performance_monitor or get_performance_monitor()

    @staticmethod
    def exit_code_for(error: BaseException) -> int:
        """把异常映射为退出码"""
        if isinstance(error, LabError):
            return error.exit_code
        if isinstance(error, ValidationError):
            return EXIT_CONFIG
        if isinstance(error, OSError):
            return EXIT_IO
        return EXIT_UNKNOWN

    def create_error_response(self, error: BaseException, component: str = "unknown") -> Dict[str, Any]:
        """创建标准的错误响应

        Args:
            error: 异常对象
            component: 出错的命令或组件名称

        Returns:
            错误响应字典
        """
        if isinstance(error, LabError):
            info = error.to_dict()
        else:
            logger.error(f"错误详情: {traceback.format_exc()}")
            info = {
                "error_type": "system_error",
                "message": str(error),
                "suggestion": "请联系维护者并附上日志",
                "details": {},
            }

        return {
            "error": True,
            "component": component,
            "exit_code": self.exit_code_for(error),
            **info,
        }

    def wrap_command(self, name: str) -> Callable:
        """为命令执行包装错误处理装饰器

        被包装函数的返回值原样返回；异常被记录后转换为 ``SystemExit``，
        退出码由异常类型决定。
        """

        def decorator(func: Callable) -> Callable:
            @wraps(func)
            def wrapper(*args, **kwargs):
                start_time = time.time()
                try:
                    result = func(*args, **kwargs)
                except SystemExit:
                    raise
                except Exception as e:
                    elapsed = time.time() - start_time
                    self.performance_monitor.record_request(name, elapsed, success=False)
                    response = self.create_error_response(e, name)
                    logger.error(
                        f"❌ 命令 {name} 执行失败，耗时 {elapsed:.2f}s: "
                        f"[{response['error_type']}] {response['message']}"
                    )
                    if response["suggestion"]:
                        logger.info(f"💡 建议: {response['suggestion']}")
                    raise SystemExit(response["exit_code"]) from e

                elapsed = time.time() - start_time
                self.performance_monitor.record_request(name, elapsed, success=True)
                logger.info(f"✅ 命令 {name} 执行成功，耗时 {elapsed:.2f}s")
                return result

            return wrapper

        return decorator


# 全局错误处理器实例
error_handler_instance = ErrorHandler()


def get_error_handler() -> ErrorHandler:
    """获取全局错误处理器实例"""
    return error_handler_instance
