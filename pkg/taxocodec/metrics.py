"""
metrics.py
Task scores for the synthetic bench
===================================

Classification tasks report accuracy, segmentation tasks mean IoU (classes
absent from both prediction and label are skipped) plus non-background
pixel accuracy, regression tasks mean L1 distance.
"""

import logging
from typing import Dict, Optional

import numpy as np
from sklearn.metrics import accuracy_score, confusion_matrix, mean_absolute_error

from .errors import ShapeMismatchError

logger = logging.getLogger(__name__)

# primary metric per task kind and whether larger is better
PRIMARY_METRIC = {
    "classification": ("accuracy", True),
    "segmentation": ("miou", True),
    "regression": ("l1", False),
}


def _check(predictions: np.ndarray, labels: np.ndarray) -> None:
    if predictions.shape != labels.shape:
        raise ShapeMismatchError(f"predictions {predictions.shape} vs labels {labels.shape}")
    if labels.size == 0:
        raise ShapeMismatchError("cannot score an empty set")


class MetricSuite:
    def accuracy(self, predictions, labels) -> float:
        predictions, labels = np.asarray(predictions), np.asarray(labels)
        _check(predictions, labels)
        return float(accuracy_score(labels.ravel(), predictions.ravel()))

    def per_class_iou(self, predictions, labels, num_classes: int) -> Dict[int, float]:
        predictions, labels = np.asarray(predictions), np.asarray(labels)
        _check(predictions, labels)
        cm = confusion_matrix(labels.ravel(), predictions.ravel(), labels=list(range(num_classes)))
        intersection = np.diag(cm).astype(np.float64)
        union = cm.sum(axis=0) + cm.sum(axis=1) - intersection
        return {k: float(intersection[k] / union[k]) for k in range(num_classes) if union[k] > 0}

    def mean_iou(self, predictions, labels, num_classes: int) -> float:
        ious = self.per_class_iou(predictions, labels, num_classes)
        return float(np.mean(list(ious.values())))

    def non_background_accuracy(self, predictions, labels, background: int = 0) -> Optional[float]:
        predictions, labels = np.asarray(predictions), np.asarray(labels)
        _check(predictions, labels)
        keep = labels != background
        if not keep.any():
            return None
        return float(accuracy_score(labels[keep], predictions[keep]))

    def cross_entropy(self, logits, labels) -> float:
        """Mean per-position cross-entropy (nats) of (N, K, ...) logits."""
        logits, labels = np.asarray(logits, dtype=np.float64), np.asarray(labels)
        k = logits.shape[1]
        flat = np.moveaxis(logits, 1, -1).reshape(-1, k)
        labels = labels.reshape(-1)
        if flat.shape[0] != labels.size or labels.size == 0:
            raise ShapeMismatchError(f"logits {logits.shape} vs labels of size {labels.size}")
        shifted = flat - flat.max(axis=1, keepdims=True)
        log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return float(-log_p[np.arange(labels.size), labels].mean())

    def l1(self, predictions, targets) -> float:
        predictions = np.asarray(predictions, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        _check(predictions, targets)
        return float(mean_absolute_error(targets.reshape(len(targets), -1),
                                         predictions.reshape(len(predictions), -1)))

    def evaluate(self, kind: str, predictions, labels, num_classes: int = 2) -> Dict[str, float]:
        """Scores for one task; the first key is the task's primary metric."""
        if kind == "classification":
            return {"accuracy": self.accuracy(predictions, labels)}
        if kind == "segmentation":
            scores = {"miou": self.mean_iou(predictions, labels, num_classes),
                      "pixel_accuracy": self.accuracy(predictions, labels)}
            nb = self.non_background_accuracy(predictions, labels)
            if nb is not None:
                scores["non_background_accuracy"] = nb
            return scores
        if kind == "regression":
            return {"l1": self.l1(predictions, labels)}
        raise ValueError(f"unknown task kind '{kind}'")
