"""
sgumlp - SGU-MLP 多模态遥感地物分类
"""

__version__ = "0.1.0"
