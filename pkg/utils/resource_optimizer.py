#!/usr/bin/env python3
"""
并行任务池

候选向量、随机种子等相互独立的任务可以并行执行，
结果按任务下标归并，保证与串行执行逐位一致
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, TypeVar

from loguru import logger


T = TypeVar("T")
R = TypeVar("R")


class IndexedTaskPool:
    """按下标归并结果的线程任务池"""

    def __init__(self, max_workers: int = 1):
        self.max_workers = max(1, int(max_workers))

    def map_indexed(self, func: Callable[[int, T], R], items: Sequence[T]) -> List[R]:
        """对每个 (下标, 元素) 执行 ``func``，结果按下标排列

        任务之间不得共享可变状态；异常按下标最小的失败任务抛出。
        """
        if self.max_workers == 1 or len(items) <= 1:
            return [func(i, item) for i, item in enumerate(items)]

        logger.debug(f"🔄 并行执行 {len(items)} 个任务，工作线程数: {self.max_workers}")
        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            futures = [executor.submit(func, i, item) for i, item in enumerate(items)]
            # 按提交顺序取结果，与完成顺序无关
            return [future.result() for future in futures]
