"""Accuracy metrics, step reports and run records."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor


def _array(x) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, Tensor) else x)


def topk_hits(logits, labels, k: int) -> np.ndarray:
    """Boolean per row: label among the k largest logits (ties favour lower ids)."""
    z = _array(logits).astype(np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = z.shape[1]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    # stable sort on -z keeps the smaller index first among equal logits
    ranked = np.argsort(-z, axis=1, kind="stable")[:, :k]
    return np.any(ranked == y[:, None], axis=1)


def top_k_accuracy(logits, labels, k: int = 1) -> float:
    hits = topk_hits(logits, labels, k)
    return float(hits.mean()) if hits.size else 0.0


def predict(logits) -> np.ndarray:
    return np.argmax(_array(logits), axis=1)  # argmax returns the first maximum


def confusion_matrix(predictions, labels, n: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    for name, v in (("prediction", p), ("label", y)):
        if v.size and (v.min() < 0 or v.max() >= n):
            raise ValueError(f"{name} outside [0, {n})")
    cm = np.zeros((n, n), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    return cm


def log_confusion(cm: np.ndarray) -> np.ndarray:
    return np.log1p(cm)


def average_incremental_accuracy(per_step_top1) -> float:
    values = list(per_step_top1)
    if not values:
        raise ValueError("need at least one step accuracy")
    return float(np.mean(values))


def group_accuracy(confusion: np.ndarray, group) -> float:
    """Correct predictions over all samples whose true class lies in ``group``."""
    cm = np.asarray(confusion)
    ids = np.asarray(list(group), dtype=np.int64)
    if ids.size == 0:
        raise ValueError("empty class group")
    if ids.min() < 0 or ids.max() >= cm.shape[0]:
        raise ValueError("group outside the confusion matrix")
    total = cm[ids].sum()
    if total == 0:
        raise ValueError("group has no test samples")
    return float(cm[ids, ids].sum() / total)


def _pct(correct: int, total: int) -> float:
    return round(100.0 * correct / total, 2) if total else 0.0


@dataclass
class StepReport:
    """Evaluation of the model after step ``step`` on the cumulative test set."""

    step: int
    num_classes: int
    top1: tuple  # (correct, total)
    top5: tuple
    confusion: np.ndarray
    base_group: tuple  # class id range [start, stop)
    newest_group: tuple
    alpha_trajectory: list = field(default_factory=list)
    seconds: float = field(default=0.0, compare=False)

    @property
    def top1_accuracy(self) -> float:
        c, t = self.top1
        return c / t

    @property
    def top5_accuracy(self) -> float:
        c, t = self.top5
        return c / t

    @property
    def per_class_accuracy(self) -> np.ndarray:
        rows = self.confusion.sum(axis=1)
        return np.divide(np.diag(self.confusion), rows, out=np.zeros(len(rows)), where=rows > 0)

    @property
    def base_accuracy(self) -> float:
        return group_accuracy(self.confusion, range(*self.base_group))

    @property
    def newest_accuracy(self) -> float:
        return group_accuracy(self.confusion, range(*self.newest_group))

    def group(self, start: int, stop: int) -> float:
        return group_accuracy(self.confusion, range(start, stop))

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "num_classes": self.num_classes,
            "top1": {"correct": int(self.top1[0]), "total": int(self.top1[1]),
                     "percent": _pct(*self.top1)},
            "top5": {"correct": int(self.top5[0]), "total": int(self.top5[1]),
                     "percent": _pct(*self.top5)},
            "per_class_accuracy": [round(100.0 * a, 2) for a in self.per_class_accuracy],
            "base_group": list(self.base_group),
            "base_accuracy": round(100.0 * self.base_accuracy, 2),
            "newest_group": list(self.newest_group),
            "newest_accuracy": round(100.0 * self.newest_accuracy, 2),
            "alpha_trajectory": [float(a) for a in self.alpha_trajectory],
            "confusion": self.confusion.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepReport":
        return cls(
            step=d["step"],
            num_classes=d["num_classes"],
            top1=(d["top1"]["correct"], d["top1"]["total"]),
            top5=(d["top5"]["correct"], d["top5"]["total"]),
            confusion=np.asarray(d["confusion"], dtype=np.int64),
            base_group=tuple(d["base_group"]),
            newest_group=tuple(d["newest_group"]),
            alpha_trajectory=list(d["alpha_trajectory"]),
        )


def evaluate(model, test, step: int, base_group, newest_group,
             alpha_trajectory=(), seconds: float = 0.0) -> StepReport:
    """Score ``model`` on a test set whose labels lie below ``model.num_classes``."""
    n = model.num_classes
    logits = model.forward(test.samples)
    hits1 = topk_hits(logits, test.labels, 1)
    hits5 = topk_hits(logits, test.labels, min(5, n))
    cm = confusion_matrix(predict(logits), test.labels, n)
    total = len(test.labels)
    return StepReport(step, n, (int(hits1.sum()), total), (int(hits5.sum()), total), cm,
                      tuple(base_group), tuple(newest_group), list(alpha_trajectory), seconds)


@dataclass
class RunRecord:
    config: dict
    reports: list

    @property
    def average_incremental_accuracy(self) -> float:
        return average_incremental_accuracy([100.0 * r.top1_accuracy for r in self.reports])

    @property
    def final(self) -> StepReport:
        return self.reports[-1]

    def to_json(self) -> str:
        doc = {
            "config": self.config,
            "steps": [r.to_dict() for r in self.reports],
            "average_incremental_accuracy": round(self.average_incremental_accuracy, 2),
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        doc = json.loads(text)
        return cls(doc["config"], [StepReport.from_dict(s) for s in doc["steps"]])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_json(Path(path).read_text())


def write_confusion_csv(cm: np.ndarray, path, log_scale: bool = False) -> None:
    data = log_confusion(cm) if log_scale else cm
    fmt = "%.6f" if log_scale else "%d"
    np.savetxt(path, data, fmt=fmt, delimiter=",")
