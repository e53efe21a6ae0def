"""
SGU-MLP 网络结构

DWC 块、空间门控单元 (SGU)、门控 MLP-Mixer 块、分词器、分类头以及四种消融
变体的组装。每个前向函数返回 (输出, 缓存)，对应的反向函数利用缓存计算梯度。
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, DimensionError
from .tensor import Tensor
from src.utils.rng import STREAM_INIT, make_rng

logger = logging.getLogger(__name__)

SGU_INIT_SCALE = 1e-3


class Variant(str, Enum):
    """消融变体"""

    MLP = "mlp"
    SGU_MLP_NO_DWC = "sgu_mlp_no_dwc"
    DWC_MLP = "dwc_mlp"
    SGU_MLP = "sgu_mlp"

    @property
    def uses_dwc(self) -> bool:
        return self in (Variant.DWC_MLP, Variant.SGU_MLP)

    @property
    def uses_sgu(self) -> bool:
        return self in (Variant.SGU_MLP_NO_DWC, Variant.SGU_MLP)


# 命令行名称 -> 变体（顺序即消融表的列顺序）
CLI_VARIANTS: Dict[str, Variant] = {
    "mlp": Variant.MLP,
    "sgu-mlp-nodwc": Variant.SGU_MLP_NO_DWC,
    "dwc-mlp": Variant.DWC_MLP,
    "sgu-mlp": Variant.SGU_MLP,
}

ABLATION_HEADERS: Dict[Variant, str] = {
    Variant.MLP: "MLP",
    Variant.SGU_MLP_NO_DWC: "SGU + MLP",
    Variant.DWC_MLP: "DWC + MLP",
    Variant.SGU_MLP: "SGUMLP",
}


def parse_variant(name: str) -> Variant:
    """接受命令行名称（sgu-mlp）或内部名称（sgu_mlp）"""
    if name in CLI_VARIANTS:
        return CLI_VARIANTS[name]
    try:
        return Variant(name)
    except ValueError:
        raise ConfigError(f"未知变体: {name}，可选: {', '.join(CLI_VARIANTS)}") from None


@dataclass(frozen=True)
class ModelConfig:
    """模型超参数"""

    bands: int
    num_classes: int
    patch_window: int = 9
    dwc_kernels: Tuple[int, ...] = (1, 3, 5)
    token_segment: int = 4
    hidden_dim: int = 256
    mixer_ffn_dim: int = 256
    num_blocks: int = 4
    variant: Variant = Variant.SGU_MLP
    ln_eps: float = 1e-5
    sgu_scope: str = "both"  # both | channel

    def __post_init__(self):
        if not isinstance(self.variant, Variant):
            object.__setattr__(self, "variant", parse_variant(str(self.variant)))
        object.__setattr__(self, "dwc_kernels", tuple(int(k) for k in self.dwc_kernels))
        for name in ("bands", "num_classes", "patch_window", "token_segment", "hidden_dim",
                     "mixer_ffn_dim", "num_blocks"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} 必须为正整数: {getattr(self, name)}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes 至少为 2: {self.num_classes}")
        if self.patch_window % 2 == 0:
            raise ConfigError(f"patch_window 必须为奇数: {self.patch_window}")
        if not self.dwc_kernels or any(k < 1 or k % 2 == 0 for k in self.dwc_kernels):
            raise ConfigError(f"dwc_kernels 必须全为正奇数: {self.dwc_kernels}")
        if len(set(self.dwc_kernels)) != len(self.dwc_kernels):
            raise ConfigError(f"dwc_kernels 不能重复: {self.dwc_kernels}")
        if self.sgu_scope not in ("both", "channel"):
            raise ConfigError(f"sgu_scope 只能是 both 或 channel: {self.sgu_scope}")
        if self.variant.uses_sgu and self.mixer_ffn_dim % 2:
            raise ConfigError(f"启用 SGU 时 mixer_ffn_dim 必须为偶数: {self.mixer_ffn_dim}")
        if self.ln_eps <= 0:
            raise ConfigError(f"ln_eps 必须为正: {self.ln_eps}")
        if self.token_count < 2:
            raise ConfigError(f"token 数 E={self.token_count} 必须 ≥ 2，请减小 token_segment")

    @property
    def flat_length(self) -> int:
        return self.patch_window * self.patch_window * self.bands

    @property
    def token_count(self) -> int:
        return math.ceil(self.flat_length / self.token_segment)

    @property
    def token_sgu(self) -> bool:
        return self.variant.uses_sgu and self.sgu_scope == "both"

    @property
    def channel_sgu(self) -> bool:
        return self.variant.uses_sgu

    def to_dict(self) -> Dict:
        return {
            "bands": self.bands,
            "num_classes": self.num_classes,
            "patch_window": self.patch_window,
            "dwc_kernels": list(self.dwc_kernels),
            "token_segment": self.token_segment,
            "hidden_dim": self.hidden_dim,
            "mixer_ffn_dim": self.mixer_ffn_dim,
            "num_blocks": self.num_blocks,
            "variant": self.variant.value,
            "ln_eps": self.ln_eps,
            "sgu_scope": self.sgu_scope,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelConfig":
        return cls(**{**data, "dwc_kernels": tuple(data.get("dwc_kernels", (1, 3, 5)))})


# ---------------------------------------------------------------------------
# 参数结构
# ---------------------------------------------------------------------------

@dataclass
class SguParams:
    """空间门控投影 f(D2) = W·D2 + b"""

    weight: Tensor
    bias: Tensor


@dataclass
class MlpParams:
    """LN -> 全连接 -> [SGU] -> GELU -> 全连接，外加残差"""

    ln_gain: Tensor
    ln_bias: Tensor
    w_in: Tensor
    b_in: Tensor
    w_out: Tensor
    b_out: Tensor
    sgu: Optional[SguParams] = None


@dataclass
class MixerBlockParams:
    token_mlp: MlpParams
    channel_mlp: MlpParams


@dataclass
class DwcBranch:
    kernels: Tensor
    bias: Tensor


@dataclass
class ModelParams:
    """具名参数集合，所有张量形状都可由 ModelConfig 推出"""

    embed_weight: Tensor
    embed_bias: Tensor
    blocks: List[MixerBlockParams]
    head_weight: Tensor
    head_bias: Tensor
    dwc: Dict[int, DwcBranch] = field(default_factory=dict)

    def named_tensors(self) -> Dict[str, Tensor]:
        """按检查点顺序展开为 名称 -> 张量"""
        out: Dict[str, Tensor] = {}
        for k, branch in self.dwc.items():
            out[f"dwc.k{k}.kernels"] = branch.kernels
            out[f"dwc.k{k}.bias"] = branch.bias
        out["embed.weight"] = self.embed_weight
        out["embed.bias"] = self.embed_bias
        for i, block in enumerate(self.blocks):
            for part in ("token_mlp", "channel_mlp"):
                mlp: MlpParams = getattr(block, part)
                prefix = f"blocks.{i}.{part}"
                out[f"{prefix}.ln_gain"] = mlp.ln_gain
                out[f"{prefix}.ln_bias"] = mlp.ln_bias
                out[f"{prefix}.w_in"] = mlp.w_in
                out[f"{prefix}.b_in"] = mlp.b_in
                if mlp.sgu is not None:
                    out[f"{prefix}.sgu.weight"] = mlp.sgu.weight
                    out[f"{prefix}.sgu.bias"] = mlp.sgu.bias
                out[f"{prefix}.w_out"] = mlp.w_out
                out[f"{prefix}.b_out"] = mlp.b_out
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    @classmethod
    def from_named(cls, config: ModelConfig, tensors: Dict[str, Tensor]) -> "ModelParams":
        """由具名张量构造（先做完整形状审计）"""
        audit_named(tensors, config)

        def mlp(prefix: str, with_sgu: bool) -> MlpParams:
            sgu = None
            if with_sgu:
                sgu = SguParams(tensors[f"{prefix}.sgu.weight"], tensors[f"{prefix}.sgu.bias"])
            return MlpParams(
                ln_gain=tensors[f"{prefix}.ln_gain"],
                ln_bias=tensors[f"{prefix}.ln_bias"],
                w_in=tensors[f"{prefix}.w_in"],
                b_in=tensors[f"{prefix}.b_in"],
                w_out=tensors[f"{prefix}.w_out"],
                b_out=tensors[f"{prefix}.b_out"],
                sgu=sgu,
            )

        dwc = {}
        if config.variant.uses_dwc:
            for k in config.dwc_kernels:
                dwc[k] = DwcBranch(tensors[f"dwc.k{k}.kernels"], tensors[f"dwc.k{k}.bias"])
        blocks = [
            MixerBlockParams(
                token_mlp=mlp(f"blocks.{i}.token_mlp", config.token_sgu),
                channel_mlp=mlp(f"blocks.{i}.channel_mlp", config.channel_sgu),
            )
            for i in range(config.num_blocks)
        ]
        return cls(
            embed_weight=tensors["embed.weight"],
            embed_bias=tensors["embed.bias"],
            blocks=blocks,
            head_weight=tensors["head.weight"],
            head_bias=tensors["head.bias"],
            dwc=dwc,
        )

    def astype(self, dtype) -> "ModelParams":
        """转换精度（返回副本）"""
        return self.map(lambda t: t.astype(dtype))

    def map(self, fn) -> "ModelParams":
        """对每个张量应用 fn，结构不变"""
        named = {name: fn(t) for name, t in self.named_tensors().items()}
        return _rebuild_like(self, named)


def _rebuild_like(template: ModelParams, named: Dict[str, Tensor]) -> ModelParams:
    """按模板结构（不审计）从具名张量重建"""

    def mlp(prefix: str, old: MlpParams) -> MlpParams:
        sgu = None
        if old.sgu is not None:
            sgu = SguParams(named[f"{prefix}.sgu.weight"], named[f"{prefix}.sgu.bias"])
        return MlpParams(
            named[f"{prefix}.ln_gain"], named[f"{prefix}.ln_bias"],
            named[f"{prefix}.w_in"], named[f"{prefix}.b_in"],
            named[f"{prefix}.w_out"], named[f"{prefix}.b_out"], sgu,
        )

    return ModelParams(
        embed_weight=named["embed.weight"],
        embed_bias=named["embed.bias"],
        blocks=[
            MixerBlockParams(
                mlp(f"blocks.{i}.token_mlp", blk.token_mlp),
                mlp(f"blocks.{i}.channel_mlp", blk.channel_mlp),
            )
            for i, blk in enumerate(template.blocks)
        ],
        head_weight=named["head.weight"],
        head_bias=named["head.bias"],
        dwc={k: DwcBranch(named[f"dwc.k{k}.kernels"], named[f"dwc.k{k}.bias"]) for k in template.dwc},
    )


# ---------------------------------------------------------------------------
# 形状审计
# ---------------------------------------------------------------------------

def expected_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """由配置推出的全部参数形状（有序）"""
    E, C, F, P = config.token_count, config.hidden_dim, config.mixer_ffn_dim, config.token_segment
    shapes: Dict[str, Tuple[int, ...]] = {}
    if config.variant.uses_dwc:
        for k in config.dwc_kernels:
            shapes[f"dwc.k{k}.kernels"] = (k, k, config.bands)
            shapes[f"dwc.k{k}.bias"] = (config.bands,)
    shapes["embed.weight"] = (P, C)
    shapes["embed.bias"] = (C,)

    # token 混合作用于转置后的 C×E 矩阵，通道混合作用于 E×C 矩阵
    mixers = (("token_mlp", C, E, config.token_sgu), ("channel_mlp", E, C, config.channel_sgu))
    for i in range(config.num_blocks):
        for part, rows, features, with_sgu in mixers:
            prefix = f"blocks.{i}.{part}"
            shapes[f"{prefix}.ln_gain"] = (features,)
            shapes[f"{prefix}.ln_bias"] = (features,)
            shapes[f"{prefix}.w_in"] = (features, F)
            shapes[f"{prefix}.b_in"] = (F,)
            if with_sgu:
                shapes[f"{prefix}.sgu.weight"] = (rows, rows)
                shapes[f"{prefix}.sgu.bias"] = (rows,)
            shapes[f"{prefix}.w_out"] = (F // 2 if with_sgu else F, features)
            shapes[f"{prefix}.b_out"] = (features,)
    shapes["head.weight"] = (C, config.num_classes)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for shape in expected_shapes(config).values())


def audit_named(tensors: Dict[str, Tensor], config: ModelConfig) -> None:
    """
    对照配置逐一检查张量名称与形状

    Raises:
        CheckpointError: 缺失、多余或形状不符的张量（错误信息包含张量名）
    """
    shapes = expected_shapes(config)
    for name, shape in shapes.items():
        if name not in tensors:
            raise CheckpointError(f"缺少张量 {name}", name)
        if tuple(tensors[name].shape) != shape:
            raise CheckpointError(
                f"张量 {name} 形状为 {tuple(tensors[name].shape)}，配置要求 {shape}", name
            )
    extra = [name for name in tensors if name not in shapes]
    if extra:
        raise CheckpointError(f"存在配置之外的张量 {extra[0]}", extra[0])


def audit_params(params: ModelParams, config: ModelConfig) -> int:
    """审计参数并返回参数总数"""
    named = params.named_tensors()
    audit_named(named, config)
    return sum(int(t.size) for t in named.values())


# ---------------------------------------------------------------------------
# 初始化
# ---------------------------------------------------------------------------

def init_params(config: ModelConfig, seed: int, dtype=np.float64) -> ModelParams:
    """
    确定性参数初始化

    全连接与卷积权重采用 Glorot 均匀分布；SGU 权重取 ±1e-3 内的均匀值、
    偏置取 1，使门控初始近似恒等；LN 增益为 1；其余偏置为 0。
    """
    rng = make_rng(seed, STREAM_INIT)
    tensors: Dict[str, Tensor] = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith("sgu.weight"):
            value = rng.uniform(-SGU_INIT_SCALE, SGU_INIT_SCALE, size=shape)
        elif name.endswith("sgu.bias") or name.endswith("ln_gain"):
            value = np.ones(shape)
        elif name.endswith(".kernels"):
            fan = shape[0] * shape[1]
            limit = math.sqrt(6.0 / (fan + fan))
            value = rng.uniform(-limit, limit, size=shape)
        elif len(shape) == 2:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, size=shape)
        else:
            value = np.zeros(shape)
        tensors[name] = value.astype(dtype)
    params = ModelParams.from_named(config, tensors)
    logger.debug("初始化参数: variant=%s, 参数量=%d", config.variant.value, parameter_count(config))
    return params


# ---------------------------------------------------------------------------
# DWC 块
# ---------------------------------------------------------------------------

def dwc_block_forward(x: Tensor, dwc: Dict[int, DwcBranch], config: ModelConfig) -> Tensor:
    """D_Z = Σ_k DWConv2D_{k×k}(x)"""
    pw = config.patch_window
    if x.shape[-3:] != (pw, pw, config.bands):
        raise DimensionError(f"DWC 输入形状 {x.shape} 应以 {(pw, pw, config.bands)} 结尾")
    out = np.zeros_like(x)
    for branch in dwc.values():
        out = T.add(out, T.depthwise_conv2d(x, branch.kernels, branch.bias))
    return out


def dwc_block_backward(x: Tensor, dwc: Dict[int, DwcBranch], g: Tensor) -> Tuple[Tensor, Dict[int, DwcBranch]]:
    dx = np.zeros_like(x)
    grads = {}
    for k, branch in dwc.items():
        dxk, dker, dbias = T.depthwise_conv2d_backward(x, branch.kernels, g)
        dx += dxk
        grads[k] = DwcBranch(dker, dbias)
    return dx, grads


# ---------------------------------------------------------------------------
# 分词器
# ---------------------------------------------------------------------------

def _segments(x_flat: Tensor, config: ModelConfig) -> Tensor:
    E, P = config.token_count, config.token_segment
    if x_flat.shape[-1] != config.flat_length:
        raise DimensionError(f"tokenize: 展平长度 {x_flat.shape[-1]} 应为 {config.flat_length}")
    pad = E * P - x_flat.shape[-1]
    padded = np.pad(x_flat, [(0, 0)] * (x_flat.ndim - 1) + [(0, pad)])
    return padded.reshape(x_flat.shape[:-1] + (E, P))


def tokenize(x_flat: Tensor, embed_weight: Tensor, embed_bias: Tensor, config: ModelConfig) -> Tensor:
    """尾部补零到 E·P，切成 E 段长为 P 的片段，共享 P→C 嵌入"""
    return T.add_bias(T.matmul(_segments(x_flat, config), embed_weight), embed_bias)


def tokenize_backward(
    x_flat: Tensor, embed_weight: Tensor, g: Tensor, config: ModelConfig
) -> Tuple[Tensor, Tensor, Tensor]:
    segments = _segments(x_flat, config)
    g, d_bias = T.add_bias_backward(g)
    d_segments, d_weight = T.matmul_backward(segments, embed_weight, g)
    d_flat = d_segments.reshape(x_flat.shape[:-1] + (-1,))[..., : x_flat.shape[-1]]
    return np.ascontiguousarray(d_flat), d_weight, d_bias


# ---------------------------------------------------------------------------
# 空间门控单元
# ---------------------------------------------------------------------------

def _split_channels(d: Tensor, sgu: SguParams) -> Tuple[Tensor, Tensor]:
    f = d.shape[-1]
    if f % 2:
        raise ConfigError(f"SGU 输入通道数必须为偶数: {f}")
    if sgu.weight.shape != (d.shape[-2], d.shape[-2]) or sgu.bias.shape != (d.shape[-2],):
        raise DimensionError(
            f"SGU 参数形状 {sgu.weight.shape}/{sgu.bias.shape} 与序列长度 {d.shape[-2]} 不符"
        )
    return d[..., : f // 2], d[..., f // 2:]


def _gate(d2: Tensor, sgu: SguParams) -> Tensor:
    # 偏置按行（token）广播到全部通道
    return T.add(T.matmul(sgu.weight, d2), np.broadcast_to(sgu.bias[:, None], d2.shape))


def sgu_forward(d: Tensor, sgu: SguParams) -> Tensor:
    """S(D) = D1 ⊙ (W·D2 + b)，输出通道数减半"""
    d1, d2 = _split_channels(d, sgu)
    return T.mul(d1, _gate(d2, sgu))


def sgu_backward(d: Tensor, sgu: SguParams, g: Tensor) -> Tuple[Tensor, SguParams]:
    d1, d2 = _split_channels(d, sgu)
    gate = _gate(d2, sgu)
    d_d1, d_gate = T.mul_backward(d1, gate, g)
    d_w, d_d2 = T.matmul_backward(sgu.weight, d2, d_gate)
    d_b = d_gate.sum(axis=-1).reshape(-1, d.shape[-2]).sum(axis=0)
    return np.concatenate([d_d1, d_d2], axis=-1), SguParams(d_w, d_b)


# ---------------------------------------------------------------------------
# 门控 MLP 与 Mixer 块
# ---------------------------------------------------------------------------

@dataclass
class _MlpCache:
    v: Tensor
    h_norm: Tensor
    h_in: Tensor
    h_gated: Tensor
    h_act: Tensor


def gated_mlp_forward(v: Tensor, mlp: MlpParams, eps: float) -> Tuple[Tensor, _MlpCache]:
    """v + W_out·GELU([SGU](W_in·LN(v)))"""
    h_norm = T.layer_norm(v, mlp.ln_gain, mlp.ln_bias, eps)
    h_in = T.add_bias(T.matmul(h_norm, mlp.w_in), mlp.b_in)
    h_gated = sgu_forward(h_in, mlp.sgu) if mlp.sgu is not None else h_in
    h_act = T.gelu(h_gated)
    out = T.add(v, T.add_bias(T.matmul(h_act, mlp.w_out), mlp.b_out))
    return out, _MlpCache(v, h_norm, h_in, h_gated, h_act)


def gated_mlp_backward(
    cache: _MlpCache, mlp: MlpParams, eps: float, g: Tensor
) -> Tuple[Tensor, MlpParams]:
    d_v_residual, d_branch = T.add_backward(g)
    d_branch, d_b_out = T.add_bias_backward(d_branch)
    d_act, d_w_out = T.matmul_backward(cache.h_act, mlp.w_out, d_branch)
    d_gated = T.gelu_backward(cache.h_gated, d_act)
    d_sgu = None
    if mlp.sgu is not None:
        d_in, d_sgu = sgu_backward(cache.h_in, mlp.sgu, d_gated)
    else:
        d_in = d_gated
    d_in, d_b_in = T.add_bias_backward(d_in)
    d_norm, d_w_in = T.matmul_backward(cache.h_norm, mlp.w_in, d_in)
    d_v, d_gain, d_ln_bias = T.layer_norm_backward(cache.v, mlp.ln_gain, eps, d_norm)
    grads = MlpParams(d_gain, d_ln_bias, d_w_in, d_b_in, d_w_out, d_b_out, d_sgu)
    return d_v_residual + d_v, grads


@dataclass
class _BlockCache:
    token: _MlpCache
    channel: _MlpCache


def mixer_block_forward(m: Tensor, block: MixerBlockParams, eps: float) -> Tuple[Tensor, _BlockCache]:
    """token 混合（沿 E 轴）后接通道混合（沿 C 轴）"""
    t, token_cache = gated_mlp_forward(T.transpose(m), block.token_mlp, eps)
    u = T.transpose(t)
    y, channel_cache = gated_mlp_forward(u, block.channel_mlp, eps)
    return y, _BlockCache(token_cache, channel_cache)


def mixer_block(m: Tensor, block: MixerBlockParams, eps: float = 1e-5) -> Tensor:
    return mixer_block_forward(m, block, eps)[0]


def mixer_block_backward(
    cache: _BlockCache, block: MixerBlockParams, eps: float, g: Tensor
) -> Tuple[Tensor, MixerBlockParams]:
    d_u, channel_grads = gated_mlp_backward(cache.channel, block.channel_mlp, eps, g)
    d_t, token_grads = gated_mlp_backward(cache.token, block.token_mlp, eps, T.transpose_backward(d_u))
    return T.transpose_backward(d_t), MixerBlockParams(token_grads, channel_grads)


# ---------------------------------------------------------------------------
# 分类头与整网
# ---------------------------------------------------------------------------

def head_logits(tokens: Tensor, head_weight: Tensor, head_bias: Tensor) -> Tensor:
    pooled = T.mean_axis(tokens, axis=-2)
    return T.add_bias(T.matmul(pooled[..., None, :], head_weight)[..., 0, :], head_bias)


def head_forward(tokens: Tensor, head_weight: Tensor, head_bias: Tensor) -> Tensor:
    """token 轴全局平均 -> 仿射 -> softmax"""
    return T.softmax(head_logits(tokens, head_weight, head_bias))


@dataclass
class ModelCache:
    config: ModelConfig
    patch: Tensor
    flat: Tensor
    tokens_in: List[Tensor]
    blocks: List[_BlockCache]
    tokens_out: Tensor


def _check_patch(patch: Tensor, params: ModelParams, config: ModelConfig) -> None:
    pw = config.patch_window
    if patch.ndim < 3 or patch.shape[-3:] != (pw, pw, config.bands):
        raise DimensionError(f"输入 patch 形状 {patch.shape} 应以 {(pw, pw, config.bands)} 结尾")
    if bool(params.dwc) != config.variant.uses_dwc or len(params.blocks) != config.num_blocks:
        raise ConfigError(f"参数结构与变体 {config.variant.value} 不一致")


def model_forward_cached(patch: Tensor, params: ModelParams, config: ModelConfig) -> Tuple[Tensor, ModelCache]:
    """返回 (类别概率, 反向缓存)；patch 形状为 [..., 9, 9, B]"""
    _check_patch(patch, params, config)
    features = dwc_block_forward(patch, params.dwc, config) if config.variant.uses_dwc else patch
    flat = features.reshape(patch.shape[:-3] + (config.flat_length,))
    tokens = tokenize(flat, params.embed_weight, params.embed_bias, config)
    tokens_in, block_caches = [], []
    for block in params.blocks:
        tokens_in.append(tokens)
        tokens, cache = mixer_block_forward(tokens, block, config.ln_eps)
        block_caches.append(cache)
    probs = head_forward(tokens, params.head_weight, params.head_bias)
    return probs, ModelCache(config, patch, flat, tokens_in, block_caches, tokens)


def model_forward(patch: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    """
    整网前向

    mlp: 分词 -> 无 SGU 的 Mixer -> 分类头；sgu_mlp_no_dwc: 同上但带 SGU；
    dwc_mlp: DWC -> 分词 -> 无 SGU 的 Mixer -> 分类头；sgu_mlp: DWC + SGU。
    """
    return model_forward_cached(patch, params, config)[0]


def model_backward(params: ModelParams, cache: ModelCache, d_logits: Tensor) -> ModelParams:
    """由 logits 的余切计算全部参数梯度（结构与 params 相同）"""
    config = cache.config
    tokens = cache.tokens_out
    d_logits, d_head_bias = T.add_bias_backward(d_logits)
    pooled = T.mean_axis(tokens, axis=-2)[..., None, :]
    d_pooled, d_head_weight = T.matmul_backward(pooled, params.head_weight, d_logits[..., None, :])
    d_tokens = T.mean_axis_backward(tokens.shape, -2, d_pooled[..., 0, :])

    block_grads: List[MixerBlockParams] = []
    for block, block_cache in zip(reversed(params.blocks), reversed(cache.blocks)):
        d_tokens, grads = mixer_block_backward(block_cache, block, config.ln_eps, d_tokens)
        block_grads.append(grads)
    block_grads.reverse()

    d_flat, d_embed_weight, d_embed_bias = tokenize_backward(cache.flat, params.embed_weight, d_tokens, config)
    dwc_grads: Dict[int, DwcBranch] = {}
    if config.variant.uses_dwc:
        _, dwc_grads = dwc_block_backward(cache.patch, params.dwc, d_flat.reshape(cache.patch.shape))
    return ModelParams(d_embed_weight, d_embed_bias, block_grads, d_head_weight, d_head_bias, dwc_grads)


def predict_labels(params: ModelParams, config: ModelConfig, patches: Tensor, batch_size: int = 256) -> np.ndarray:
    """逐批预测，返回 1 起始的类别标签"""
    labels = np.empty(patches.shape[0], dtype=np.int64)
    for start in range(0, patches.shape[0], batch_size):
        probs = model_forward(patches[start:start + batch_size], params, config)
        labels[start:start + batch_size] = probs.argmax(axis=-1) + 1
    return labels
