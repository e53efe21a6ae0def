"""
路径工具模块
"""

import os
from pathlib import Path


def resolve_path(path_str: str) -> Path:
    """
    解析路径，展开 ~ 和环境变量

    Args:
        path_str: 路径字符串

    Returns:
        解析后的绝对 Path 对象
    """
    path_str = os.path.expandvars(str(path_str))
    return Path(path_str).expanduser().absolute()


def ensure_dir(path_str: str) -> Path:
    """解析路径并创建目录（已存在则忽略）"""
    path = resolve_path(path_str)
    path.mkdir(parents=True, exist_ok=True)
    return path
