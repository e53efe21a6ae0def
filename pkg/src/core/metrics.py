"""
精度评价模块

混淆矩阵（行 = 参考类别，列 = 预测类别）及 OA、AA、Kappa、逐类 F1，
并按结果表的版式输出报告。
"""

from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from .errors import ConfigError, DataError, UndefinedMetricError

NAME_WIDTH = 24


@dataclass
class ConfusionMatrix:
    """C×C 非负整数计数"""

    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @classmethod
    def from_labels(cls, reference: Sequence[int], predicted: Sequence[int], num_classes: int) -> "ConfusionMatrix":
        cm = cls.empty(num_classes)
        cm.accumulate_many(reference, predicted)
        return cm

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def _check(self, labels: np.ndarray) -> None:
        if labels.size and (labels.min() < 1 or labels.max() > self.num_classes):
            raise DataError(f"标签超出范围 [1, {self.num_classes}]: {labels.min()}..{labels.max()}")

    def accumulate(self, reference: int, predicted: int) -> "ConfusionMatrix":
        """counts[ref−1, pred−1] += 1"""
        self._check(np.array([reference, predicted]))
        self.counts[reference - 1, predicted - 1] += 1
        return self

    def accumulate_many(self, reference: Sequence[int], predicted: Sequence[int]) -> "ConfusionMatrix":
        ref = np.asarray(reference, dtype=np.int64).reshape(-1)
        pred = np.asarray(predicted, dtype=np.int64).reshape(-1)
        if ref.shape != pred.shape:
            raise DataError(f"参考与预测数量不一致: {ref.size} vs {pred.size}")
        self._check(ref)
        self._check(pred)
        np.add.at(self.counts, (ref - 1, pred - 1), 1)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """逐元素求和（满足交换律和结合律）"""
        if other.counts.shape != self.counts.shape:
            raise DataError(f"混淆矩阵尺寸不一致: {self.counts.shape} vs {other.counts.shape}")
        return ConfusionMatrix(self.counts + other.counts)


def overall_accuracy(cm: ConfusionMatrix) -> float:
    """trace / total"""
    total = cm.total
    if total == 0:
        raise UndefinedMetricError("混淆矩阵为空，OA 无定义")
    return int(np.trace(cm.counts)) / total


def recall_per_class(cm: ConfusionMatrix) -> np.ndarray:
    rows = cm.counts.sum(axis=1)
    empty = np.flatnonzero(rows == 0)
    if empty.size:
        raise UndefinedMetricError(f"类别 {int(empty[0]) + 1} 没有参考样本，召回率无定义")
    return np.diag(cm.counts) / rows


def precision_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """未被预测过的类别精度记为 0"""
    cols = cm.counts.sum(axis=0)
    diag = np.diag(cm.counts).astype(np.float64)
    return np.divide(diag, cols, out=np.zeros_like(diag), where=cols > 0)


def average_accuracy(cm: ConfusionMatrix) -> float:
    """逐类召回率的平均"""
    return float(recall_per_class(cm).mean())


def kappa(cm: ConfusionMatrix) -> float:
    """
    Cohen's kappa：(p_o − p_e) / (1 − p_e)

    用整数运算化为 (N·trace − Σ row·col) / (N² − Σ row·col)，
    使 p_o = p_e 时结果恰为 0。
    """
    n = cm.total
    if n == 0:
        raise UndefinedMetricError("混淆矩阵为空，kappa 无定义")
    rows = [int(v) for v in cm.counts.sum(axis=1)]
    cols = [int(v) for v in cm.counts.sum(axis=0)]
    chance = sum(r * c for r, c in zip(rows, cols))
    denominator = n * n - chance
    if denominator == 0:
        raise UndefinedMetricError("p_e = 1，kappa 无定义")
    return (n * int(np.trace(cm.counts)) - chance) / denominator


def f1_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """2PR/(P+R)，P+R = 0 时记为 0"""
    if cm.total == 0:
        raise UndefinedMetricError("混淆矩阵为空，F1 无定义")
    diag = np.diag(cm.counts).astype(np.float64)
    rows = cm.counts.sum(axis=1)
    cols = cm.counts.sum(axis=0)
    precision = np.divide(diag, cols, out=np.zeros_like(diag), where=cols > 0)
    recall = np.divide(diag, rows, out=np.zeros_like(diag), where=rows > 0)
    denom = precision + recall
    return np.divide(2 * precision * recall, denom, out=np.zeros_like(diag), where=denom > 0)


# ---------------------------------------------------------------------------
# 报告
# ---------------------------------------------------------------------------

@dataclass
class RenderedReport:
    table: str
    key_values: str
    values: Dict[str, float]


def metric_values(cm: ConfusionMatrix, class_names: Sequence[str]) -> Dict[str, float]:
    """有序的 指标名 -> 数值（oa, aa, kappa, f1.<类别>）"""
    if len(class_names) != cm.num_classes:
        raise ConfigError(f"类别名数量 {len(class_names)} 与混淆矩阵类别数 {cm.num_classes} 不一致")
    values = {
        "oa": overall_accuracy(cm),
        "aa": average_accuracy(cm),
        "kappa": kappa(cm),
    }
    for name, f1 in zip(class_names, f1_per_class(cm)):
        values[f"f1.{name}"] = float(f1)
    return values


def format_key_values(values: Dict[str, float]) -> str:
    return "".join(f"{key}={value!r}\n" for key, value in values.items())


def parse_key_values(text: str) -> Dict[str, float]:
    """解析 key=value 报告（按第一个 '=' 切分）"""
    values: Dict[str, float] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        values[key] = float(value)
    return values


def format_table(rows: List[str], columns: Dict[str, List[float]]) -> str:
    """类别列左对齐，数值列右对齐并保留两位小数"""
    widths = {name: max(len(name), 8) for name in columns}
    header = "Class".ljust(NAME_WIDTH) + "".join(f" | {name.rjust(widths[name])}" for name in columns)
    lines = [header, "-" * len(header)]
    for i, row in enumerate(rows):
        cells = "".join(
            f" | {_cell(columns[name][i]).rjust(widths[name])}" for name in columns
        )
        lines.append(row[:NAME_WIDTH].ljust(NAME_WIDTH) + cells)
    return "\n".join(lines) + "\n"


def _cell(value: float) -> str:
    return "n/a" if value is None or np.isnan(value) else f"{value:.2f}"


def report_rows(values: Dict[str, float], class_names: Sequence[str]) -> List[float]:
    """逐类 F1，然后 OA×100、AA×100、κ×100"""
    return [values[f"f1.{name}"] for name in class_names] + [
        values["oa"] * 100, values["aa"] * 100, values["kappa"] * 100,
    ]


ROW_LABELS_TAIL = ["OA×100", "AA×100", "κ×100"]


def render_report(cm: ConfusionMatrix, class_names: Sequence[str], column: str = "SGU-MLP") -> RenderedReport:
    values = metric_values(cm, class_names)
    table = format_table(list(class_names) + ROW_LABELS_TAIL, {column: report_rows(values, class_names)})
    return RenderedReport(table=table, key_values=format_key_values(values), values=values)
