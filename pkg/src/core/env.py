"""
环境变量管理模块
"""

import os
from typing import Optional

from dotenv import load_dotenv


def load_env(dotenv_path: Optional[str] = None) -> None:
    """加载 .env 文件（默认自本模块向上查找；已存在的环境变量不会被覆盖）"""
    load_dotenv(dotenv_path)


def get_log_level() -> Optional[str]:
    """
    获取日志级别

    优先从环境变量 SGUMLP_LOG_LEVEL 读取，如果不存在则尝试从.env文件加载

    Returns:
        日志级别字符串，如果未设置则返回None
    """
    load_env()
    return os.environ.get("SGUMLP_LOG_LEVEL") or None


def get_settings_path() -> Optional[str]:
    """获取替代的 settings.json 路径（SGUMLP_SETTINGS）"""
    load_env()
    return os.environ.get("SGUMLP_SETTINGS") or None
