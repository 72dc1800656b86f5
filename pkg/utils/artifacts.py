#!/usr/bin/env python3
"""
实验产物与溯源管理

负责规范化 JSON 写入、配置哈希、文件哈希和子种子派生，
保证相同配置与种子的重复运行产生逐字节一致的 JSON 负载
"""

import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import pandas as pd
from loguru import logger

from utils.error_handler import ArtifactIOError


PathLike = Union[str, Path]

# 写入时排除在负载哈希之外的字段
TIMESTAMP_FIELD = "created_at"


def to_jsonable(value: Any) -> Any:
    """把 numpy 标量/数组、Path 等转换为 JSON 可序列化对象"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        value = float(value)
    if isinstance(value, float) and not np.isfinite(value):
        # NaN/Inf 不是合法 JSON
        return None
    if isinstance(value, Path):
        return value.as_posix()
    if hasattr(value, "model_dump"):
        return to_jsonable(value.model_dump(mode="json"))
    return value


def canonical_json(payload: Any) -> str:
    """规范化 JSON（键排序、紧凑分隔符），用于哈希"""
    return json.dumps(to_jsonable(payload), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def config_hash(config: Any) -> str:
    """配置哈希：规范化 JSON 的 SHA-256"""
    return sha256_text(canonical_json(config))


def file_sha256(path: PathLike) -> str:
    """文件内容的 SHA-256"""
    path = Path(path)
    if not path.is_file():
        raise ArtifactIOError(f"文件不存在: {path}")
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def derive_seed(master_seed: int, *labels: Any) -> int:
    """从主种子和标签路径派生确定性的子种子（63 位非负整数）"""
    key = ":".join([str(int(master_seed))] + [str(label) for label in labels])
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "big") >> 1


def ensure_dir(path: PathLike) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ArtifactIOError(f"无法创建目录 {path}: {e}") from e
    return path


def write_json(path: PathLike, data: Any) -> Path:
    """以规范格式写入 JSON 文件"""
    path = Path(path)
    ensure_dir(path.parent)
    text = json.dumps(to_jsonable(data), sort_keys=True, indent=2, ensure_ascii=False)
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    except OSError as e:
        raise ArtifactIOError(f"写入失败 {path}: {e}") from e
    return path


def read_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.is_file():
        raise ArtifactIOError(f"找不到产物文件: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ArtifactIOError(f"读取失败 {path}: {e}") from e


def write_payload(
    path: PathLike,
    payload: Dict[str, Any],
    provenance: Dict[str, Any],
    timestamp: Optional[str] = None,
) -> Path:
    """写入带溯源信息的 JSON 负载

    ``payload_hash`` 覆盖负载与溯源（不含时间戳），时间戳单独记录。
    """
    body = {"payload": to_jsonable(payload), "provenance": to_jsonable(provenance)}
    document = dict(body)
    document["payload_hash"] = sha256_text(canonical_json(body))
    document[TIMESTAMP_FIELD] = timestamp or datetime.now(timezone.utc).isoformat()
    written = write_json(path, document)
    logger.debug(f"💾 写入产物: {written}")
    return written


def read_payload(path: PathLike) -> Dict[str, Any]:
    """读取 ``write_payload`` 写出的文档，返回负载部分"""
    document = read_json(path)
    if "payload" not in document:
        raise ArtifactIOError(f"不是有效的产物文档: {path}")
    return document["payload"]


def write_frame(path: PathLike, frame: pd.DataFrame) -> Path:
    """以 17 位有效数字写出表格产物"""
    path = Path(path)
    ensure_dir(path.parent)
    try:
        frame.to_csv(path, index=False, float_format="%.17g", encoding="utf-8")
    except OSError as e:
        raise ArtifactIOError(f"写入失败 {path}: {e}") from e
    return path
