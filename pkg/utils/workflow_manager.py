#!/usr/bin/env python3
"""
攻击流水线阶段管理器

三阶段流程：候选采样 → 潜向量优化 → 结果筛选
记录每个阶段的状态与耗时；阶段失败时以带阶段标签的错误抛出，
已完成阶段的结果保留为部分结果
"""

import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional

from loguru import logger

from utils.error_handler import StageError


class AttackStage(Enum):
    """攻击流水线阶段"""
    SAMPLING = "sampling"
    OPTIMIZATION = "optimization"
    SELECTION = "selection"


class StageStatus(Enum):
    """阶段状态"""
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass
class StageRecord:
    """单个阶段的执行记录"""
    stage: AttackStage
    status: StageStatus = StageStatus.PENDING
    duration: Optional[float] = None
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        # 耗时不进入产物，保证负载确定性
        return {"stage": self.stage.value, "status": self.status.value, "error": self.error}


@dataclass
class AttackWorkflow:
    """按固定顺序执行攻击阶段"""
    records: Dict[AttackStage, StageRecord] = field(
        default_factory=lambda: {stage: StageRecord(stage) for stage in AttackStage}
    )
    results: Dict[AttackStage, Any] = field(default_factory=dict)

    def run_stage(self, stage: AttackStage, handler: Callable[[], Any]) -> Any:
        """执行单个阶段"""
        record = self.records[stage]
        record.status = StageStatus.RUNNING
        logger.info(f"📋 执行阶段: {stage.value}")
        start_time = time.time()

        try:
            result = handler()
        except StageError:
            record.status = StageStatus.FAILED
            raise
        except Exception as e:
            record.status = StageStatus.FAILED
            record.error = str(e)
            record.duration = time.time() - start_time
            logger.error(f"❌ 阶段执行失败: {stage.value}: {e}")
            raise StageError(stage.value, e) from e

        record.status = StageStatus.COMPLETED
        record.duration = time.time() - start_time
        self.results[stage] = result
        logger.info(f"✅ 阶段完成: {stage.value} ({record.duration:.2f}s)")
        return result

    def completed_stages(self) -> List[str]:
        return [s.value for s, r in self.records.items() if r.status == StageStatus.COMPLETED]

    def to_dict(self) -> List[Dict[str, Any]]:
        return [self.records[stage].to_dict() for stage in AttackStage]
