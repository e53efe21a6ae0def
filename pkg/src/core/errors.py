"""
异常定义模块

所有异常都派生自 SguMlpError，并通过 exit_code 映射到命令行退出码。
"""


class SguMlpError(Exception):
    """sgumlp 异常基类"""

    exit_code = 1


class UsageError(SguMlpError):
    """命令行用法错误"""

    exit_code = 2


class ConfigError(SguMlpError, ValueError):
    """超参数或配置非法"""

    exit_code = 2


class DimensionError(SguMlpError, ValueError):
    """张量形状不匹配"""

    exit_code = 4


class NonFiniteError(SguMlpError, FloatingPointError):
    """运算产生 NaN/Inf"""

    exit_code = 3


class DataError(SguMlpError, ValueError):
    """标签或样本数据非法"""

    exit_code = 2


class FormatError(SguMlpError, ValueError):
    """文件头声明了不支持的 dtype/layout"""

    exit_code = 4


class CorruptFileError(SguMlpError):
    """文件长度与文件头不符"""

    exit_code = 4


class CoRegistrationError(SguMlpError, ValueError):
    """多模态栅格尺寸不一致"""

    exit_code = 4


class BoundsError(SguMlpError, IndexError):
    """像素坐标越界"""

    exit_code = 2


class StratificationError(SguMlpError, ValueError):
    """分层采样时某些类别样本不足"""

    exit_code = 2

    def __init__(self, classes):
        self.classes = list(classes)
        super().__init__(f"以下类别的标注像素少于 2 个，无法分层划分: {self.classes}")


class UndefinedMetricError(SguMlpError, ValueError):
    """指标在当前混淆矩阵上无定义"""

    exit_code = 4


class CheckpointError(SguMlpError):
    """检查点文件损坏或与模型配置不符"""

    exit_code = 4

    def __init__(self, message: str, tensor_name: str = ""):
        self.tensor_name = tensor_name
        super().__init__(message)


class DivergenceError(SguMlpError):
    """训练损失出现非有限值"""

    exit_code = 3

    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"训练发散: epoch={epoch}, batch={batch}, loss={loss}")


class VerificationError(SguMlpError):
    """梯度检查未通过"""

    exit_code = 5

    def __init__(self, worst_tensor: str, error: float):
        self.worst_tensor = worst_tensor
        self.error = error
        super().__init__(f"梯度检查失败，最差张量 {worst_tensor}: 相对误差 {error:.3e}")
