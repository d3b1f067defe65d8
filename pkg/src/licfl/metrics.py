"""Evaluation metrics: MSE, positive-class F1 and the adjusted Rand index."""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np


@dataclass(frozen=True)
class EvalReport:
    mse: float
    f1: float
    support: int
    threshold: float = 0.5


def _paired(predictions, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {y.size} labels")
    return p, y


def mse(predictions, labels) -> float:
    p, y = _paired(predictions, labels)
    if p.size == 0:
        raise ValueError("mse of an empty sequence")
    return float(np.mean((p - y) ** 2))


def f1(predictions, labels, threshold: float = 0.5) -> float:
    """F1 of the positive class; predictions are binarized at ``threshold``.

    Returns 0 when precision and recall are both zero (including the case of
    no positive predictions and no positive labels).
    """
    p, y = _paired(predictions, labels)
    pred = p >= threshold
    true = y >= 0.5
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    if tp == 0:
        return 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def evaluate(predictions, labels, threshold: float = 0.5) -> EvalReport:
    p, y = _paired(predictions, labels)
    return EvalReport(mse=mse(p, y), f1=f1(p, y, threshold), support=int(p.size), threshold=threshold)


def adjusted_rand_index(labels_a, labels_b) -> float:
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    n = a.size
    if n < 2:
        raise ValueError("ARI needs at least two items")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    sum_cells = sum(comb(int(c), 2) for c in table.ravel())
    sum_rows = sum(comb(int(c), 2) for c in table.sum(axis=1))
    sum_cols = sum(comb(int(c), 2) for c in table.sum(axis=0))
    total = comb(n, 2)
    expected = sum_rows * sum_cols / total
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        # only reachable when both partitions are all-one-cluster or both all-singletons
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))
