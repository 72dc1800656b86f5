"""
性能监控模块

记录命令与攻击阶段的耗时，并附带进程资源快照
"""

import time
from contextlib import contextmanager
from typing import Any, Dict, Iterator

import psutil
from loguru import logger


class PerformanceMonitor:
    """性能监控器"""

    def __init__(self):
        self.metrics: Dict[str, Dict[str, Any]] = {}

    def record_request(self, name: str, processing_time: float, success: bool = True) -> None:
        """记录一次执行的耗时"""
        entry = self.metrics.setdefault(
            name,
            {
                "requests_count": 0,
                "total_processing_time": 0.0,
                "average_processing_time": 0.0,
                "error_count": 0,
                "success_count": 0,
            },
        )
        entry["requests_count"] += 1
        entry["total_processing_time"] += processing_time
        if success:
            entry["success_count"] += 1
        else:
            entry["error_count"] += 1
        entry["average_processing_time"] = entry["total_processing_time"] / entry["requests_count"]

    @contextmanager
    def track(self, name: str) -> Iterator[None]:
        """计时上下文，异常时记为失败"""
        start_time = time.time()
        success = True
        try:
            yield
        except Exception:
            success = False
            raise
        finally:
            elapsed = time.time() - start_time
            self.record_request(name, elapsed, success)
            logger.debug(f"⏱️ {name} 耗时 {elapsed:.3f}s")

    @staticmethod
    def get_system_metrics() -> Dict[str, Any]:
        """获取当前进程的资源占用"""
        process = psutil.Process()
        return {
            "cpu_percent": psutil.cpu_percent(),
            "rss_mb": process.memory_info().rss / (1024 * 1024),
            "num_threads": process.num_threads(),
        }

    def get_performance_report(self) -> Dict[str, Any]:
        """获取性能报告（不写入任何产物，仅用于日志）"""
        return {
            "application_metrics": self.metrics,
            "system_metrics": self.get_system_metrics(),
            "timestamp": time.time(),
        }


performance_monitor_instance = PerformanceMonitor()


def get_performance_monitor() -> PerformanceMonitor:
    """获取全局性能监控器实例"""
    return performance_monitor_instance
