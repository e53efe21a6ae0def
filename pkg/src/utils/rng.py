"""
随机数生成模块

统一使用基于计数器的 Philox 生成器，保证跨平台逐位可复现。
"""

import numpy as np

# 各用途的独立随机流编号
STREAM_INIT = 0
STREAM_SHUFFLE = 1
STREAM_SPLIT = 2
STREAM_SCENE = 3
STREAM_GRADCHECK = 4


def make_rng(seed: int, stream: int = STREAM_INIT) -> np.random.Generator:
    """
    创建 Philox 随机数生成器

    Args:
        seed: 非负整数种子
        stream: 随机流编号，同一种子下不同编号互相独立

    Returns:
        numpy Generator
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))
