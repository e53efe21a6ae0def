"""
日志配置模块
"""

import logging
from typing import Optional

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def setup_logging(level: Optional[str] = None) -> logging.Logger:
    """
    为 src 包配置日志处理器（重复调用不会叠加处理器）

    Args:
        level: 日志级别名称，默认 INFO

    Returns:
        包级 logger
    """
    logger = logging.getLogger("src")
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
        logger.addHandler(handler)
    logger.setLevel((level or "INFO").upper())
    return logger
