"""
分类图渲染

固定 16 色调色板，下标 0 保留给未标注/背景，类别 i 使用 PALETTE[i]。
最多支持 15 个类别。
"""

from pathlib import Path

import numpy as np
from PIL import Image

from src.core.errors import DataError

PALETTE = np.array([
    (0, 0, 0),        # 0 未标注 / 背景
    (0, 128, 0),      # 1
    (255, 0, 0),      # 2
    (128, 128, 128),  # 3
    (144, 238, 144),  # 4
    (255, 165, 0),    # 5
    (0, 0, 255),      # 6
    (255, 255, 0),    # 7
    (128, 0, 128),    # 8
    (0, 255, 255),    # 9
    (165, 42, 42),    # 10
    (255, 192, 203),  # 11
    (0, 0, 128),      # 12
    (128, 128, 0),    # 13
    (255, 255, 255),  # 14
    (0, 128, 128),    # 15
], dtype=np.uint8)


def colorize(labels: np.ndarray) -> np.ndarray:
    """[h, w] 标签 -> [h, w, 3] uint8 RGB"""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= len(PALETTE)):
        raise DataError(f"标签 {labels.min()}..{labels.max()} 超出调色板范围 [0, {len(PALETTE) - 1}]")
    return PALETTE[labels]


def write_ppm(labels: np.ndarray, path) -> Path:
    """写出 P6 二进制 PPM"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(colorize(labels)).save(path, format="PPM")
    return path


def read_ppm(path) -> np.ndarray:
    with Image.open(path) as image:
        return np.asarray(image.convert("RGB"))
