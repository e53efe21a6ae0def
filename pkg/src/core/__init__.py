"""
核心模块：张量运算、网络层、数据、训练、检查点与精度评价
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import PatchDataset, Scene, load_scene, synth_scene
from .errors import SguMlpError
from .layers import ModelConfig, ModelParams, Variant, init_params, model_forward
from .metrics import ConfusionMatrix, render_report
from .training import TrainHyper, evaluate, grad_check, train

__all__ = [
    "load_checkpoint",
    "save_checkpoint",
    "PatchDataset",
    "Scene",
    "load_scene",
    "synth_scene",
    "SguMlpError",
    "ModelConfig",
    "ModelParams",
    "Variant",
    "init_params",
    "model_forward",
    "ConfusionMatrix",
    "render_report",
    "TrainHyper",
    "evaluate",
    "grad_check",
    "train",
]
