"""
检查点读写模块

格式（所有整数小端）：
    magic "SGUW" | u32 version=1 | u32 张量数
    每个张量: u16 名称长度 | UTF-8 名称 | u8 秩 | u64 各维长度 | 小端 float32 负载
"""

import logging
from pathlib import Path
from typing import Dict

import numpy as np

from .errors import CheckpointError
from .layers import ModelConfig, ModelParams, audit_params

logger = logging.getLogger(__name__)

MAGIC = b"SGUW"
VERSION = 1


def save_checkpoint(params: ModelParams, path) -> Path:
    """
    写出检查点（同一参数两次写出字节完全相同）

    Args:
        params: 模型参数（按 float32 存储）
        path: 输出路径

    Returns:
        写出的路径
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    named = params.named_tensors()
    chunks = [MAGIC, np.array([VERSION, len(named)], dtype="<u4").tobytes()]
    for name, value in named.items():
        encoded = name.encode("utf-8")
        chunks.append(np.array([len(encoded)], dtype="<u2").tobytes())
        chunks.append(encoded)
        chunks.append(np.array([value.ndim], dtype="u1").tobytes())
        chunks.append(np.array(value.shape, dtype="<u8").tobytes())
        chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    logger.info("检查点已保存: %s (%d 个张量)", path, len(named))
    return path


class _Reader:
    def __init__(self, raw: bytes, path: Path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, dtype: str, count: int, what: str) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.pos + size > len(self.raw):
            raise CheckpointError(f"{self.path}: 读取 {what} 时文件提前结束", what)
        out = np.frombuffer(self.raw, dtype=dtype, count=count, offset=self.pos)
        self.pos += size
        return out


def read_named_tensors(path) -> Dict[str, np.ndarray]:
    """读取检查点中的全部具名张量（不做形状审计）"""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"检查点不存在: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: magic 不匹配 {raw[:4]!r}")
    reader = _Reader(raw, path)
    reader.pos = 4
    version, count = (int(v) for v in reader.take("<u4", 2, "header"))
    if version != VERSION:
        raise CheckpointError(f"{path}: 不支持的版本 {version}")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        length = int(reader.take("<u2", 1, "name length")[0])
        name = reader.take("u1", length, "name").tobytes().decode("utf-8")
        rank = int(reader.take("u1", 1, name)[0])
        shape = tuple(int(v) for v in reader.take("<u8", rank, name))
        data = reader.take("<f4", int(np.prod(shape, dtype=np.int64)), name)
        tensors[name] = data.astype(np.float32).reshape(shape)
    if reader.pos != len(raw):
        raise CheckpointError(f"{path}: 末尾存在 {len(raw) - reader.pos} 字节多余数据")
    return tensors


def load_checkpoint(path, config: ModelConfig) -> ModelParams:
    """读取检查点并对照 config 做完整形状审计"""
    params = ModelParams.from_named(config, read_named_tensors(path))
    logger.debug("检查点 %s: 参数量 %d", path, audit_params(params, config))
    return params
