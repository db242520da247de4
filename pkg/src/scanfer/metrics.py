"""Challenge scoring: accuracy, per-class and macro F1, and the 0.67/0.33 overall score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import NUM_CLASSES, predict

F1_WEIGHT = 0.67
ACC_WEIGHT = 0.33


def confusion_matrix(y_true, y_pred, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"{y_true.size} labels vs {y_pred.size} predictions")
    for arr in (y_true, y_pred):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"class indices must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    if total == 0:
        raise ValueError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm) / total)


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def precision_recall(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    tp = np.diag(cm).astype(np.float64)
    return _safe_ratio(tp, cm.sum(axis=0)), _safe_ratio(tp, cm.sum(axis=1))


def f1_scores(cm: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class F1 and their unweighted mean. 0/0 anywhere counts as 0."""
    precision, recall = precision_recall(cm)
    per_class = _safe_ratio(2.0 * precision * recall, precision + recall)
    return per_class, float(per_class.mean())


def overall_score(f1: float, acc: float) -> float:
    for label, value in (("f1", f1), ("accuracy", acc)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{label} must lie in [0, 1], got {value}")
    return F1_WEIGHT * f1 + ACC_WEIGHT * acc


@dataclass(frozen=True)
class EvalReport:
    confusion: np.ndarray
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_f1: float
    overall: float

    @classmethod
    def from_confusion(cls, cm: np.ndarray) -> "EvalReport":
        acc = accuracy(cm)
        precision, recall = precision_recall(cm)
        per_class, macro = f1_scores(cm)
        return cls(cm, acc, precision, recall, per_class, macro, overall_score(macro, acc))

    @classmethod
    def from_predictions(cls, y_true, y_pred, num_classes: int = NUM_CLASSES) -> "EvalReport":
        return cls.from_confusion(confusion_matrix(y_true, y_pred, num_classes))

    def to_text(self) -> str:
        """Multi-line ``key=value`` form."""
        lines = [
            f"samples={int(self.confusion.sum())}",
            f"accuracy={self.accuracy!r}",
            f"macro_f1={self.macro_f1!r}",
            f"overall={self.overall!r}",
        ]
        for c in range(len(self.f1)):
            lines.append(f"precision_{c}={self.precision[c]!r}")
            lines.append(f"recall_{c}={self.recall[c]!r}")
            lines.append(f"f1_{c}={self.f1[c]!r}")
        for c, row in enumerate(self.confusion):
            lines.append(f"confusion_{c}={' '.join(str(int(v)) for v in row)}")
        return "\n".join(lines) + "\n"

    def to_record(self) -> str:
        """Single tab-separated line: accuracy, macro_f1, overall, then f1/precision/recall per class."""
        fields = [self.accuracy, self.macro_f1, self.overall, *self.f1, *self.precision, *self.recall]
        return "\t".join(repr(float(v)) for v in fields)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EvalReport):
            return NotImplemented
        return self.to_text() == other.to_text()


def parse_report_text(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def evaluate(model, images: np.ndarray, labels, batch_size: int = 64) -> EvalReport:
    """Predict every image (eval mode) and score against ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = predict(model, images, batch_size=batch_size)
    return EvalReport.from_predictions(labels, preds, model.config.num_classes)
