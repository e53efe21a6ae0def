"""
配置管理模块

三层配置，优先级由低到高：config/settings.json < --config 键值文件 < 命令行参数。
合并后的扁平映射交给 RunSettings 校验与类型转换。
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from src.core.env import get_settings_path
from src.core.errors import ConfigError
from src.core.layers import ModelConfig, Variant, parse_variant
from src.core.training import OPTIMIZERS, TrainHyper

logger = logging.getLogger(__name__)

DEFAULT_SETTINGS_PATH = Path(__file__).resolve().parent.parent.parent / "config" / "settings.json"
SECTIONS = ("model", "training", "data", "logging")


class RunSettings(BaseModel):
    """一次运行的全部可配置项（扁平）"""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # model
    patch_window: int = 9
    dwc_kernels: Tuple[int, ...] = (1, 3, 5)
    token_segment: int = 4
    hidden_dim: int = 256
    mixer_ffn_dim: int = 256
    num_blocks: int = 4
    variant: str = Variant.SGU_MLP.value
    ln_eps: float = 1e-5
    sgu_scope: str = "both"
    # training
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 100
    dtype: str = "float32"
    workers: int = 1
    seed: int = 0
    # data
    train_fraction: float = 0.1
    # logging
    log_level: str = "INFO"

    @field_validator("dwc_kernels", mode="before")
    @classmethod
    def _split_kernels(cls, value: Any) -> Any:
        if isinstance(value, str):
            return tuple(int(part) for part in value.replace(" ", "").split(",") if part)
        return value

    @field_validator("variant", mode="before")
    @classmethod
    def _canonical_variant(cls, value: Any) -> str:
        return parse_variant(str(value.value if isinstance(value, Variant) else value)).value

    @field_validator("optimizer")
    @classmethod
    def _known_optimizer(cls, value: str) -> str:
        if value not in OPTIMIZERS:
            raise ValueError(f"未知优化器 {value}，可选: {', '.join(OPTIMIZERS)}")
        return value

    @field_validator("dtype")
    @classmethod
    def _known_dtype(cls, value: str) -> str:
        if value not in ("float32", "float64"):
            raise ValueError(f"dtype 只能是 float32 或 float64: {value}")
        return value

    @field_validator("batch_size", "epochs", "workers")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError(f"必须为正整数: {value}")
        return value

    @field_validator("train_fraction")
    @classmethod
    def _fraction(cls, value: float) -> float:
        if not 0 < value < 1:
            raise ValueError(f"训练比例必须在 (0, 1) 内: {value}")
        return value

    def model_config_for(self, bands: int, num_classes: int) -> ModelConfig:
        """由数据决定的 bands / num_classes 与其余模型项组装 ModelConfig"""
        return ModelConfig(
            bands=bands,
            num_classes=num_classes,
            patch_window=self.patch_window,
            dwc_kernels=self.dwc_kernels,
            token_segment=self.token_segment,
            hidden_dim=self.hidden_dim,
            mixer_ffn_dim=self.mixer_ffn_dim,
            num_blocks=self.num_blocks,
            variant=self.variant,
            ln_eps=self.ln_eps,
            sgu_scope=self.sgu_scope,
        )

    def train_hyper(self) -> TrainHyper:
        return TrainHyper(
            optimizer=self.optimizer,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            momentum=self.momentum,
            batch_size=self.batch_size,
            epochs=self.epochs,
            dtype=self.dtype,
            workers=self.workers,
        )


def load_settings(path: Optional[str] = None) -> Dict[str, Any]:
    """
    加载项目默认配置 settings.json

    Args:
        path: 配置文件路径；默认依次取 SGUMLP_SETTINGS 与 config/settings.json

    Returns:
        配置字典；文件不存在时返回空字典
    """
    config_path = Path(path or get_settings_path() or DEFAULT_SETTINGS_PATH)
    try:
        with open(config_path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        logger.warning("配置文件不存在: %s", config_path)
        return {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"配置文件格式错误 {config_path}: {e}") from e


def flatten_settings(settings: Mapping[str, Any]) -> Dict[str, Any]:
    """把 {section: {key: value}} 展平为 {key: value}"""
    flat: Dict[str, Any] = {}
    for section, values in settings.items():
        if section not in SECTIONS or not isinstance(values, dict):
            raise ConfigError(f"settings.json 中未知的配置节: {section}")
        flat.update({("log_level" if key == "level" else key): value for key, value in values.items()})
    return flat


def load_config_file(path) -> Dict[str, str]:
    """读取扁平 key=value 配置文件（允许注释与空行）"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"配置文件不存在: {path}")
    values = dotenv_values(path)
    missing = [key for key, value in values.items() if value is None]
    if missing:
        raise ConfigError(f"{path}: 以下键缺少取值: {', '.join(missing)}")
    return dict(values)


def resolve_settings(
    settings: Optional[Mapping[str, Any]] = None,
    config_file: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunSettings:
    """
    按优先级合并三层配置并校验

    Args:
        settings: settings.json 内容（None 时自动加载）
        config_file: --config 文件路径
        overrides: 命令行给出的值（值为 None 的键视为未给出）

    Raises:
        ConfigError: 未知键或取值非法
    """
    merged = flatten_settings(load_settings() if settings is None else settings)
    if config_file:
        merged.update(load_config_file(config_file))
    merged.update({key: value for key, value in (overrides or {}).items() if value is not None})
    env_level = os.environ.get("SGUMLP_LOG_LEVEL")
    if env_level and not (overrides or {}).get("log_level"):
        merged["log_level"] = env_level
    try:
        return RunSettings(**merged)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"配置无效: {problems}") from None
