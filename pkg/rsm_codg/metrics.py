"""
Classification metrics from a confusion matrix.

Rows of the confusion matrix are true classes, columns predictions. Macro
averages run over the classes present in the labels; all rates are
reported in percent.
"""

import logging
from typing import Any, Dict, Sequence

import numpy as np
from sklearn import metrics as skm

logger = logging.getLogger(__name__)


def confusion_matrix(predictions: np.ndarray, labels: np.ndarray, classes: int) -> np.ndarray:
    return skm.confusion_matrix(labels, predictions, labels=np.arange(classes)).astype(np.int64)


def row_normalize(confusion: np.ndarray) -> np.ndarray:
    """Divide each row by its count; empty rows stay zero."""
    confusion = np.asarray(confusion, dtype=np.float64)
    totals = confusion.sum(axis=1, keepdims=True)
    return np.divide(confusion, totals, out=np.zeros_like(confusion), where=totals > 0)


def per_class_rates(predictions: np.ndarray, labels: np.ndarray, classes: int) -> Dict[str, np.ndarray]:
    """
    One-vs-rest precision, recall, specificity and F1 per class, as fractions.

    Recall is NaN for a class absent from ``labels``; precision and F1 fall
    back to 0 when undefined. Specificity is NaN when a class has no negatives.
    """
    precision, recall, f1, support = skm.precision_recall_fscore_support(
        labels, predictions, labels=np.arange(classes), average=None, zero_division=0)
    confusion = confusion_matrix(predictions, labels, classes).astype(np.float64)
    tp = np.diag(confusion)
    fp = confusion.sum(axis=0) - tp
    tn = confusion.sum() - confusion.sum(axis=1) - fp
    with np.errstate(invalid="ignore", divide="ignore"):
        specificity = np.where(tn + fp > 0, tn / (tn + fp), np.nan)
    return {
        "precision": np.asarray(precision, dtype=np.float64),
        "recall": np.where(support > 0, recall, np.nan),
        "specificity": specificity,
        "f1": np.asarray(f1, dtype=np.float64),
    }


def compute_metrics(predictions: Sequence[int], labels: Sequence[int], classes: int) -> Dict[str, Any]:
    """
    Accuracy, macro F1, macro sensitivity and macro specificity in percent.

    Args:
        predictions: Predicted class per sample
        labels: True class per sample
        classes: Number of classes C

    Returns:
        Dictionary with the four scores, the raw ``confusion`` matrix and
        ``per_class`` precision/recall lists

    Raises:
        ValueError: On empty or length-mismatched input
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("Cannot compute metrics on empty input")
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")

    confusion = confusion_matrix(predictions, labels, classes)
    rates = per_class_rates(predictions, labels, classes)
    present = confusion.sum(axis=1) > 0

    specificity = rates["specificity"][present]
    specificity = specificity[~np.isnan(specificity)]
    result = {
        "accuracy": 100.0 * float(skm.accuracy_score(labels, predictions)),
        "macro_f1": 100.0 * float(np.mean(rates["f1"][present])),
        "sensitivity": 100.0 * float(np.mean(rates["recall"][present])),
        # a single present class has no negatives; its specificity is vacuous
        "specificity": 100.0 * float(np.mean(specificity)) if len(specificity) else 100.0,
        "confusion": confusion,
        "per_class": {
            "precision": [round(float(p) * 100.0, 6) for p in rates["precision"]],
            "recall": [None if np.isnan(r) else round(float(r) * 100.0, 6) for r in rates["recall"]],
        },
    }
    logger.debug(f"Metrics: acc={result['accuracy']:.2f}% f1={result['macro_f1']:.2f}%")
    return result


def mean_and_std(values: Sequence[float]) -> Dict[str, float]:
    """Mean and population standard deviation (divide by n)."""
    array = np.asarray(values, dtype=np.float64)
    if len(array) == 0:
        return {"mean": float("nan"), "std": float("nan")}
    return {"mean": float(array.mean()), "std": float(array.std(ddof=0))}
