"""Top-k accuracy, confusion matrices and the evaluation report."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np


def topk_predictions(logits, k):
    """Indices of the k largest logits per row; ties go to the lower index."""
    logits = np.asarray(logits)
    k = min(k, logits.shape[1])
    return np.argsort(-logits, axis=1, kind="stable")[:, :k]


def topk_accuracy(logits, labels, k=1):
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    top = topk_predictions(logits, k)
    return float((top == labels[:, None]).any(axis=1).mean())


def confusion_matrix(labels, predictions, n):
    cm = np.zeros((n, n), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


@dataclass
class MetricsReport:
    top1: float
    top5: float
    per_category: list
    confusion: list
    sample_count: int
    seconds: float
    category_names: list = None

    @classmethod
    def from_logits(cls, logits, labels, n_categories, seconds=0.0, names=None):
        logits = np.asarray(logits)
        labels = np.asarray(labels, dtype=np.int64)
        pred = topk_predictions(logits, 1)[:, 0] if len(labels) else labels
        cm = confusion_matrix(labels, pred, n_categories)
        rows = cm.sum(axis=1)
        per = [float(cm[i, i] / rows[i]) if rows[i] else 0.0 for i in range(n_categories)]
        return cls(
            top1=topk_accuracy(logits, labels, 1),
            top5=topk_accuracy(logits, labels, 5),
            per_category=per,
            confusion=cm.tolist(),
            sample_count=int(len(labels)),
            seconds=float(seconds),
            category_names=list(names) if names is not None else None,
        )

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def confusion_csv(self):
        n = len(self.confusion)
        names = self.category_names or [str(i) for i in range(n)]
        lines = ["true\\pred," + ",".join(names)]
        for name, row in zip(names, self.confusion):
            lines.append(name + "," + ",".join(str(v) for v in row))
        return "\n".join(lines) + "\n"
