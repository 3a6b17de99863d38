import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from balanced_il.data import LabeledDataset
from balanced_il.metrics import (
    RunRecord,
    StepReport,
    average_incremental_accuracy,
    confusion_matrix,
    evaluate,
    group_accuracy,
    log_confusion,
    top_k_accuracy,
    write_confusion_csv,
)
from balanced_il.model import ClassifierModel


class TestTopK:
    def test_k_equals_n(self):
        z = np.random.default_rng(0).normal(size=(10, 4))
        assert top_k_accuracy(z, np.arange(10) % 4, 4) == 1.0

    def test_simple(self):
        assert top_k_accuracy([[2.0, 1.0], [0.0, 3.0]], [0, 1], 1) == 1.0

    def test_tie_goes_to_lower_index(self):
        assert top_k_accuracy([[1.0, 1.0]], [1], 1) == 0.0
        assert top_k_accuracy([[1.0, 1.0]], [0], 1) == 1.0

    def test_tie_at_boundary_of_k(self):
        z = [[3.0, 1.0, 1.0, 1.0]]
        assert top_k_accuracy(z, [1], 2) == 1.0
        assert top_k_accuracy(z, [2], 2) == 0.0

    @pytest.mark.parametrize("k", [0, 3])
    def test_k_out_of_range(self, k):
        with pytest.raises(ValueError):
            top_k_accuracy([[1.0, 0.0]], [0], k)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_top_k_monotone(seed):
    rng = np.random.default_rng(seed)
    z = rng.integers(-2, 3, size=(20, 6)).astype(float)  # coarse values force ties
    y = rng.integers(0, 6, size=20)
    accs = [top_k_accuracy(z, y, k) for k in range(1, 7)]
    assert all(a <= b for a, b in zip(accs, accs[1:])) and accs[-1] == 1.0


class TestConfusion:
    def test_perfect(self):
        cm = confusion_matrix([0, 1, 2, 2], [0, 1, 2, 2], 3)
        assert np.array_equal(cm, np.diag([1, 1, 2]))

    def test_single_error(self):
        cm = confusion_matrix([1], [0], 2)
        assert cm.tolist() == [[0, 1], [0, 0]]

    def test_total_and_row_sums(self):
        rng = np.random.default_rng(1)
        y, p = rng.integers(0, 5, 40), rng.integers(0, 5, 40)
        cm = confusion_matrix(p, y, 5)
        assert cm.sum() == 40
        assert cm.sum(axis=1).tolist() == np.bincount(y, minlength=5).tolist()

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            confusion_matrix([0], [3], 3)

    def test_log_transform(self):
        np.testing.assert_allclose(log_confusion(np.array([[0, 1], [2, 0]])),
                                   [[0.0, np.log(2)], [np.log(3), 0.0]])


class TestAIA:
    def test_mean(self):
        assert average_incremental_accuracy([80, 70, 60]) == 70.0

    def test_single(self):
        assert average_incremental_accuracy([42.5]) == 42.5

    def test_permutation_invariant(self):
        v = [81.3, 64.2, 70.0, 55.5]
        assert average_incremental_accuracy(v) == pytest.approx(
            average_incremental_accuracy(v[::-1]), abs=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            average_incremental_accuracy([])


class TestGroupAccuracy:
    cm = np.array([[3, 1, 0], [0, 0, 2], [1, 0, 3]])

    def test_all_classes_is_top1(self):
        assert group_accuracy(self.cm, range(3)) == np.trace(self.cm) / self.cm.sum()

    def test_diagonal(self):
        assert group_accuracy(np.diag([4, 5, 6]), range(1, 2)) == 1.0

    def test_zero_correct(self):
        assert group_accuracy(self.cm, [1]) == 0.0

    def test_empty(self):
        with pytest.raises(ValueError):
            group_accuracy(self.cm, [])

    def test_partition_recomposes_top1(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            y, p = rng.integers(0, 8, 100), rng.integers(0, 8, 100)
            cm = confusion_matrix(p, y, 8)
            cuts = sorted(rng.choice(np.arange(1, 8), size=2, replace=False))
            parts = [range(0, cuts[0]), range(cuts[0], cuts[1]), range(cuts[1], 8)]
            parts = [g for g in parts if cm[list(g)].sum() > 0]
            weighted = sum(group_accuracy(cm, g) * cm[list(g)].sum() for g in parts) / cm.sum()
            assert abs(weighted - np.trace(cm) / cm.sum()) < 1e-12


def make_report():
    model = ClassifierModel(4, 6, hidden=(5,), seed=3)
    rng = np.random.default_rng(0)
    test = LabeledDataset(rng.normal(size=(60, 4)), np.repeat(np.arange(6), 10), 6)
    return evaluate(model, test, 1, (0, 4), (4, 6), alpha_trajectory=[0.9, 0.8], seconds=1.5)


class TestReports:
    def test_invariants(self):
        r = make_report()
        assert r.confusion.sum(axis=1).tolist() == [10] * 6
        assert abs(r.top1_accuracy - np.trace(r.confusion) / r.confusion.sum()) < 1e-12
        assert r.top5_accuracy >= r.top1_accuracy
        assert r.group(0, 6) == pytest.approx(r.top1_accuracy, abs=1e-12)

    def test_json_round_trip(self):
        r = make_report()
        record = RunRecord({"loss": "balanced"}, [r, r])
        back = RunRecord.from_json(record.to_json())
        assert [s.to_dict() for s in back.reports] == [s.to_dict() for s in record.reports]
        assert back.to_json() == record.to_json()

    def test_json_fields(self):
        doc = json.loads(RunRecord({}, [make_report()]).to_json())
        step = doc["steps"][0]
        assert {"top1", "top5", "confusion", "base_accuracy", "newest_accuracy",
                "alpha_trajectory", "per_class_accuracy"} <= set(step)
        assert isinstance(step["top1"]["percent"], float)
        assert "seconds" not in step

    def test_aia_over_reports(self):
        r = make_report()
        assert RunRecord({}, [r, r]).average_incremental_accuracy == pytest.approx(
            100 * r.top1_accuracy)

    def test_confusion_csv(self, tmp_path):
        cm = np.array([[2, 0], [1, 3]])
        write_confusion_csv(cm, tmp_path / "c.csv")
        write_confusion_csv(cm, tmp_path / "l.csv", log_scale=True)
        assert np.loadtxt(tmp_path / "c.csv", delimiter=",").tolist() == cm.tolist()
        np.testing.assert_allclose(np.loadtxt(tmp_path / "l.csv", delimiter=","),
                                   np.log1p(cm), atol=1e-6)


def test_step_report_fields_are_exact_fractions():
    r = StepReport(0, 2, (3, 4), (4, 4), np.array([[2, 0], [1, 1]]), (0, 2), (0, 2))
    assert r.top1_accuracy == 0.75
    assert r.to_dict()["top1"] == {"correct": 3, "total": 4, "percent": 75.0}
