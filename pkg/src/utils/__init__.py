"""
工具函数模块
"""

from .path_utils import ensure_dir, resolve_path
from .rng import make_rng

__all__ = ["ensure_dir", "resolve_path", "make_rng"]
