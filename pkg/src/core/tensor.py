"""
张量核心模块

Tensor 即 numpy.ndarray（float64 用于测试，float32 用于训练）。每个前向运算
都有手工推导的反向（向量-雅可比积）函数，反向函数接收保存的输入和上游余切，
返回各输入的余切。所有运算都允许一个可选的前导批次轴。
"""

from dataclasses import dataclass, field
from typing import Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DimensionError, NonFiniteError

Tensor = np.ndarray

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def as_tensor(values, dtype=np.float64) -> Tensor:
    """
    构造张量（总是复制，且要求所有维度为正、数值有限）

    Args:
        values: 任意可转换为数组的数据
        dtype: 目标精度

    Returns:
        新的 ndarray
    """
    arr = np.array(values, dtype=dtype, copy=True)
    if any(extent <= 0 for extent in arr.shape):
        raise DimensionError(f"张量维度必须为正: {arr.shape}")
    return _ensure_finite(arr, "as_tensor")


def _ensure_finite(out: Tensor, op: str) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} 产生了非有限值")
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: 形状不匹配 {a.shape} vs {b.shape}")


def _sum_to_shape(grad: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """把批次广播出来的梯度求和回共享操作数的形状"""
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    return grad


@dataclass
class Dual:
    """值与累积余切的配对"""

    value: Tensor
    grad: Tensor = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    def accumulate(self, g: Tensor) -> None:
        """把余切累加到 grad（单线程持有者负责调用）"""
        _check_same_shape(self.grad, g, "Dual.accumulate")
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """c[..., i, j] = Σ_t a[..., i, t]·b[..., t, j]；二维操作数在批次间共享"""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: 形状不匹配 {a.shape} x {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: 批次维度不匹配 {a.shape} x {b.shape}")
    return _ensure_finite(np.matmul(a, b), "matmul")


def matmul_backward(a: Tensor, b: Tensor, g: Tensor) -> Tuple[Tensor, Tensor]:
    """dA = G·Bᵀ, dB = Aᵀ·G"""
    expected = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
    if g.shape != expected:
        raise DimensionError(f"matmul_backward: 余切形状 {g.shape} 应为 {expected}")
    da = np.matmul(g, np.swapaxes(b, -1, -2))
    db = np.matmul(np.swapaxes(a, -1, -2), g)
    return _sum_to_shape(da, a.shape), _sum_to_shape(db, b.shape)


# ---------------------------------------------------------------------------
# 逐元素运算
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    if np.ndim(b) == 0:
        return _ensure_finite(a + b, "add")
    _check_same_shape(a, b, "add")
    return _ensure_finite(a + b, "add")


def add_backward(g: Tensor) -> Tuple[Tensor, Tensor]:
    return g, g


def mul(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    if np.ndim(b) == 0:
        return _ensure_finite(a * b, "mul")
    _check_same_shape(a, b, "mul")
    return _ensure_finite(a * b, "mul")


def mul_backward(a: Tensor, b: Tensor, g: Tensor) -> Tuple[Tensor, Tensor]:
    _check_same_shape(a, g, "mul_backward")
    return g * b, g * a


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """沿最后一轴加偏置"""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"add_bias: 形状不匹配 {x.shape} + {bias.shape}")
    return _ensure_finite(x + bias, "add_bias")


def add_bias_backward(g: Tensor) -> Tuple[Tensor, Tensor]:
    return g, g.reshape(-1, g.shape[-1]).sum(axis=0)


def transpose(x: Tensor) -> Tensor:
    """交换最后两轴"""
    return np.ascontiguousarray(np.swapaxes(x, -1, -2))


def transpose_backward(g: Tensor) -> Tensor:
    return np.ascontiguousarray(np.swapaxes(g, -1, -2))


def mean_axis(x: Tensor, axis: int) -> Tensor:
    return _ensure_finite(x.mean(axis=axis), "mean_axis")


def mean_axis_backward(x_shape: Sequence[int], axis: int, g: Tensor) -> Tensor:
    n = x_shape[axis]
    return np.broadcast_to(np.expand_dims(g, axis) / n, tuple(x_shape)).copy()


# ---------------------------------------------------------------------------
# 激活与归一化
# ---------------------------------------------------------------------------

def gelu(x: Tensor) -> Tensor:
    """精确 erf 形式：x·Φ(x)"""
    return _ensure_finite(0.5 * x * (1.0 + erf(x / _SQRT2)), "gelu")


def gelu_backward(x: Tensor, g: Tensor) -> Tensor:
    _check_same_shape(x, g, "gelu_backward")
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def _standardize(x: Tensor, eps: float) -> Tuple[Tensor, Tensor]:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return (x - mu) * inv_std, inv_std


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """沿最后一轴标准化，再做仿射 gain⊙x̂ + bias"""
    if eps <= 0:
        raise ConfigError(f"layer_norm: eps 必须为正: {eps}")
    if x.shape[-1] == 0:
        raise DimensionError(f"layer_norm: 特征轴长度为 0: {x.shape}")
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm: 仿射参数形状 {gain.shape}/{bias.shape} 与输入 {x.shape} 不符")
    xhat, _ = _standardize(x, eps)
    return _ensure_finite(xhat * gain + bias, "layer_norm")


def layer_norm_backward(
    x: Tensor, gain: Tensor, eps: float, g: Tensor
) -> Tuple[Tensor, Tensor, Tensor]:
    """返回 (dx, dgain, dbias)"""
    _check_same_shape(x, g, "layer_norm_backward")
    xhat, inv_std = _standardize(x, eps)
    dxhat = g * gain
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    f = x.shape[-1]
    dgain = (g * xhat).reshape(-1, f).sum(axis=0)
    dbias = g.reshape(-1, f).sum(axis=0)
    return dx, dgain, dbias


def softmax(x: Tensor) -> Tensor:
    """最后一轴 softmax，先减最大值保证数值稳定"""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return _ensure_finite(e / e.sum(axis=-1, keepdims=True), "softmax")


def softmax_backward(x: Tensor, g: Tensor) -> Tensor:
    _check_same_shape(x, g, "softmax_backward")
    y = softmax(x)
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def softmax_cross_entropy_backward(probs: Tensor, labels: np.ndarray) -> Tensor:
    """softmax + 平均交叉熵融合反向：(probs − onehot) / N，labels 为 0 起始"""
    n = probs.shape[0]
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return grad / n


# ---------------------------------------------------------------------------
# 深度可分离卷积
# ---------------------------------------------------------------------------

def _check_conv(x: Tensor, kernels: Tensor, bias: Tensor) -> int:
    if kernels.ndim != 3 or kernels.shape[0] != kernels.shape[1]:
        raise DimensionError(f"depthwise_conv2d: 卷积核形状应为 k×k×c: {kernels.shape}")
    k = kernels.shape[0]
    if k % 2 == 0:
        raise ConfigError(f"depthwise_conv2d: 卷积核尺寸必须为奇数: {k}")
    if x.ndim < 3 or x.shape[-1] != kernels.shape[-1] or bias.shape != (kernels.shape[-1],):
        raise DimensionError(
            f"depthwise_conv2d: 通道数不匹配 输入 {x.shape} 卷积核 {kernels.shape} 偏置 {bias.shape}"
        )
    return k


def _pad_spatial(x: Tensor, margin: int) -> Tensor:
    pad = [(0, 0)] * (x.ndim - 3) + [(margin, margin), (margin, margin), (0, 0)]
    return np.pad(x, pad)


def depthwise_conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """
    深度卷积（深度乘子 1，零填充 same）

    Args:
        x: [..., h, w, c]
        kernels: [k, k, c]
        bias: [c]

    Returns:
        [..., h, w, c]，输出通道 c 只依赖输入通道 c
    """
    k = _check_conv(x, kernels, bias)
    h, w = x.shape[-3], x.shape[-2]
    xp = _pad_spatial(x, k // 2)
    out = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            out += xp[..., i:i + h, j:j + w, :] * kernels[i, j]
    out += bias
    return _ensure_finite(out, "depthwise_conv2d")


def depthwise_conv2d_backward(
    x: Tensor, kernels: Tensor, g: Tensor
) -> Tuple[Tensor, Tensor, Tensor]:
    """返回 (dx, dkernels, dbias)"""
    _check_same_shape(x, g, "depthwise_conv2d_backward")
    k = kernels.shape[0]
    m = k // 2
    h, w, c = x.shape[-3:]
    xp = _pad_spatial(x, m)
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(kernels)
    g_flat = g.reshape(-1, c)
    for i in range(k):
        for j in range(k):
            dxp[..., i:i + h, j:j + w, :] += g * kernels[i, j]
            dk[i, j] = (xp[..., i:i + h, j:j + w, :].reshape(-1, c) * g_flat).sum(axis=0)
    dx = dxp[..., m:m + h, m:m + w, :]
    return np.ascontiguousarray(dx), dk, g_flat.sum(axis=0)
