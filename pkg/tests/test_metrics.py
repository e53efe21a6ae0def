"""
精度评价测试：公式对照、sklearn 对照、边界情况与报告版式
"""

import numpy as np
import pytest
from sklearn.metrics import accuracy_score, cohen_kappa_score, confusion_matrix, f1_score, recall_score

from src.core import metrics as M
from src.core.errors import ConfigError, DataError, UndefinedMetricError


def direct_formulas(counts):
    n = counts.sum()
    po = np.trace(counts) / n
    pe = (counts.sum(axis=1) * counts.sum(axis=0)).sum() / n ** 2
    recall = np.diag(counts) / counts.sum(axis=1)
    cols = counts.sum(axis=0)
    precision = np.array([counts[i, i] / cols[i] if cols[i] else 0.0 for i in range(len(counts))])
    f1 = np.array([2 * p * r / (p + r) if p + r else 0.0 for p, r in zip(precision, recall)])
    return po, recall.mean(), (po - pe) / (1 - pe), f1


class TestConfusionMatrix:
    def test_accumulate_indexes_one_based(self):
        cm = M.ConfusionMatrix.empty(3).accumulate(1, 3).accumulate(2, 2)
        assert cm.counts[0, 2] == 1 and cm.counts[1, 1] == 1 and cm.total == 2

    def test_matches_sklearn(self, rng):
        ref, pred = rng.integers(1, 6, size=500), rng.integers(1, 6, size=500)
        cm = M.ConfusionMatrix.from_labels(ref, pred, 5)
        np.testing.assert_array_equal(cm.counts, confusion_matrix(ref, pred, labels=[1, 2, 3, 4, 5]))

    def test_merge_commutative_and_associative(self, rng):
        parts = [M.ConfusionMatrix(rng.integers(0, 20, size=(4, 4))) for _ in range(3)]
        a, b, c = parts
        np.testing.assert_array_equal(a.merge(b).counts, b.merge(a).counts)
        np.testing.assert_array_equal(a.merge(b).merge(c).counts, a.merge(b.merge(c)).counts)

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            M.ConfusionMatrix.empty(3).accumulate(0, 1)


class TestMetrics:
    def test_direct_formula_oracle(self, rng):
        for _ in range(1000):
            k = int(rng.integers(2, 8))
            counts = rng.integers(0, 50, size=(k, k))
            counts[np.arange(k), np.arange(k)] += 1
            cm = M.ConfusionMatrix(counts)
            oa, aa, kap, f1 = direct_formulas(counts.astype(np.float64))
            assert abs(M.overall_accuracy(cm) - oa) < 1e-12
            assert abs(M.average_accuracy(cm) - aa) < 1e-12
            assert abs(M.kappa(cm) - kap) < 1e-12
            np.testing.assert_allclose(M.f1_per_class(cm), f1, atol=1e-12)

    def test_matches_sklearn(self, rng):
        ref, pred = rng.integers(1, 5, size=400), rng.integers(1, 5, size=400)
        pred[:200] = ref[:200]
        cm = M.ConfusionMatrix.from_labels(ref, pred, 4)
        assert M.overall_accuracy(cm) == pytest.approx(accuracy_score(ref, pred), abs=1e-12)
        assert M.average_accuracy(cm) == pytest.approx(recall_score(ref, pred, average="macro"), abs=1e-12)
        assert M.kappa(cm) == pytest.approx(cohen_kappa_score(ref, pred), abs=1e-12)
        np.testing.assert_allclose(M.f1_per_class(cm), f1_score(ref, pred, average=None), atol=1e-12)

    def test_diagonal_is_perfect(self):
        cm = M.ConfusionMatrix(np.diag([5, 3, 7]))
        assert M.overall_accuracy(cm) == 1.0
        assert M.average_accuracy(cm) == 1.0
        assert M.kappa(cm) == 1.0
        np.testing.assert_array_equal(M.f1_per_class(cm), [1.0, 1.0, 1.0])

    def test_half_accuracy(self):
        cm = M.ConfusionMatrix(np.array([[5, 5], [5, 5]]))
        assert M.overall_accuracy(cm) == 0.5
        assert M.kappa(cm) == 0.0

    def test_independence_gives_zero_kappa(self, rng):
        for _ in range(50):
            rows, cols = rng.integers(1, 6, size=3), rng.integers(1, 6, size=3)
            cm = M.ConfusionMatrix(np.outer(rows, cols))
            assert M.kappa(cm) == 0.0

    def test_empty_matrix(self):
        with pytest.raises(UndefinedMetricError):
            M.overall_accuracy(M.ConfusionMatrix.empty(3))

    def test_missing_reference_class(self):
        cm = M.ConfusionMatrix(np.array([[3, 0], [0, 0]]))
        with pytest.raises(UndefinedMetricError):
            M.average_accuracy(cm)

    def test_never_predicted_class_has_zero_f1(self):
        cm = M.ConfusionMatrix(np.array([[4, 0], [2, 0]]))
        np.testing.assert_allclose(M.f1_per_class(cm), [0.8, 0.0])
        np.testing.assert_array_equal(M.precision_per_class(cm), [4 / 6, 0.0])


class TestReport:
    def test_rows_and_columns(self):
        cm = M.ConfusionMatrix(np.array([[8, 2], [1, 9]]))
        report = M.render_report(cm, ["Forest", "Water"], column="SGUMLP")
        lines = report.table.splitlines()
        assert "SGUMLP" in lines[0]
        body = lines[2:]
        assert [line.split("|")[0].strip() for line in body] == ["Forest", "Water", "OA×100", "AA×100", "κ×100"]
        assert body[2].split("|")[1].strip() == "85.00"

    def test_key_values_round_trip(self):
        cm = M.ConfusionMatrix(np.array([[8, 2], [1, 9]]))
        report = M.render_report(cm, ["Forest", "Water"])
        parsed = M.parse_key_values(report.key_values)
        assert list(parsed) == ["oa", "aa", "kappa", "f1.Forest", "f1.Water"]
        assert parsed == report.values

    def test_missing_value_cell(self):
        table = M.format_table(["a"], {"X": [None], "Y": [float("nan")]})
        assert table.splitlines()[2].count("n/a") == 2

    def test_name_count_mismatch(self):
        with pytest.raises(ConfigError):
            M.render_report(M.ConfusionMatrix(np.eye(2, dtype=np.int64)), ["only"])
