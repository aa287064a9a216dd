"""Clustering quality metrics: ACC, FP-measure, NMI, ARI and pairwise F1.

All functions take two label mappings (record id -> cluster label); cluster
labels are opaque and every metric is invariant under relabeling.
"""

from __future__ import annotations

import math
from itertools import combinations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import ERError, UniverseMismatch


class TooFewRecords(ERError):
    pass


def _check_universe(pred: dict, truth: dict) -> None:
    if set(pred) != set(truth):
        raise UniverseMismatch("pred and truth cover different record ids")


def contingency(pred: dict, truth: dict) -> tuple[np.ndarray, list, list]:
    """Contingency table t[i][j] = |pred cluster i ∩ truth cluster j|."""
    _check_universe(pred, truth)
    pred_labels = sorted(set(pred.values()), key=str)
    truth_labels = sorted(set(truth.values()), key=str)
    pi = {label: i for i, label in enumerate(pred_labels)}
    ti = {label: j for j, label in enumerate(truth_labels)}
    table = np.zeros((len(pred_labels), len(truth_labels)), dtype=int)
    for rid in pred:
        table[pi[pred[rid]], ti[truth[rid]]] += 1
    return table, pred_labels, truth_labels


def acc(pred: dict, truth: dict) -> float:
    """Fraction correct under the optimal one-to-one cluster assignment."""
    table, _, _ = contingency(pred, truth)
    rows, cols = linear_sum_assignment(-table)
    return float(table[rows, cols].sum()) / len(pred)


def fp_measure(pred: dict, truth: dict) -> float:
    """Harmonic mean of purity and inverse purity."""
    table, _, _ = contingency(pred, truth)
    n = table.sum()
    purity = float(table.max(axis=1).sum()) / n
    inverse_purity = float(table.max(axis=0).sum()) / n
    if purity == 0.0 or inverse_purity == 0.0:
        return 0.0
    return 2.0 / (1.0 / purity + 1.0 / inverse_purity)


def nmi(pred: dict, truth: dict) -> float:
    """Normalized mutual information, natural log.

    Degenerate conventions: 1.0 when both entropies are zero, 0.0 when
    exactly one is.
    """
    table, _, _ = contingency(pred, truth)
    n = table.sum()
    pa = table.sum(axis=1) / n
    pb = table.sum(axis=0) / n
    ha = -sum(p * math.log(p) for p in pa if p > 0)
    hb = -sum(p * math.log(p) for p in pb if p > 0)
    if ha + hb == 0.0:
        return 1.0
    if ha == 0.0 or hb == 0.0:
        return 0.0
    mi = 0.0
    for i in range(table.shape[0]):
        for j in range(table.shape[1]):
            pij = table[i, j] / n
            if pij > 0:
                mi += pij * math.log(pij / (pa[i] * pb[j]))
    return 2.0 * mi / (ha + hb)


def ari(pred: dict, truth: dict) -> float:
    """Adjusted Rand index over the pair-counting contingency table.

    Returns 1.0 in the degenerate cases where the expected index equals the
    maximum index (both all-singletons or both single-cluster).
    """
    table, _, _ = contingency(pred, truth)
    n = int(table.sum())
    if n < 2:
        raise TooFewRecords("ARI needs at least 2 records")

    def comb2(x) -> float:
        return x * (x - 1) / 2.0

    sum_ij = sum(comb2(int(t)) for t in table.flat)
    sum_a = sum(comb2(int(a)) for a in table.sum(axis=1))
    sum_b = sum(comb2(int(b)) for b in table.sum(axis=0))
    expected = sum_a * sum_b / comb2(n)
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        return 1.0
    return (sum_ij - expected) / (max_index - expected)


def pairwise_f1(pred: dict, truth: dict) -> tuple[float, float, float]:
    """(precision, recall, f1) over unordered record pairs; 0 on empty denominators."""
    _check_universe(pred, truth)
    tp = fp = fn = 0
    for a, b in combinations(sorted(pred), 2):
        same_pred = pred[a] == pred[b]
        same_truth = truth[a] == truth[b]
        if same_pred and same_truth:
            tp += 1
        elif same_pred:
            fp += 1
        elif same_truth:
            fn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1
